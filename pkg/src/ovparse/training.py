"""Pair sampling, Adam, concept-stream pretraining and joint two-stream training."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .embedding import (
    EmbeddingTable,
    PixelEmbedder,
    ScoreKind,
    concept_loss_batch,
    project_concepts,
    ranking_hinge,
    score_matrix,
    score_matrix_backward,
    softmax_xent,
)
from .taxonomy import ConceptGraph, InformationContentTable, closure_array

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    dim: int = 300
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 1.0
    lambda_: float = 5.0
    epochs: int = 30
    concept_epochs: int = 1000
    negatives_per_positive: int = 1
    image_loss: str = "softmax"
    image_score_kind: str = "hyper"
    score_p: float = 2.0
    target_norm: float = 30.0
    batch_size: int = 64
    seed: int = 0
    ic_weighting: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lr", "alpha", "beta", "lambda_", "target_norm", "score_p"):
            v = getattr(self, name)
            # lambda = 0 switches the concept stream off during joint training
            if not (v > 0 or (name == "lambda_" and v == 0)) or not math.isfinite(v):
                raise ConfigError(f"{self._key(name)} must be positive, got {v}")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")
        if self.dim < 1 or self.batch_size < 1 or self.epochs < 0 or self.concept_epochs < 0:
            raise ConfigError("dim and batch_size must be >= 1, epoch counts >= 0")
        if self.image_loss not in ("softmax", "margin"):
            raise ConfigError(f"image_loss must be softmax or margin, got {self.image_loss!r}")
        try:
            self.score_kind
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def score_kind(self) -> ScoreKind:
        return ScoreKind.parse(self.image_score_kind, self.score_p)

    @staticmethod
    def _key(attr):
        return "lambda" if attr == "lambda_" else attr

    def to_text(self) -> str:
        out = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{self._key(f.name)}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {cls._key(f.name): (f.name, f.type) for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            attr, typ = types[key]
            try:
                if typ in ("bool", bool):
                    if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError
                    values[attr] = value.lower() in ("true", "1", "yes")
                elif typ in ("int", int):
                    values[attr] = int(value)
                elif typ in ("float", float):
                    values[attr] = float(value)
                else:
                    values[attr] = value
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), **overrides)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


class EpochLog(NamedTuple):
    epoch: int
    concept_loss: float
    image_loss: float
    total: float


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EpochLog._fields)
        for r in rows:
            w.writerow([r.epoch, repr(r.concept_loss), repr(r.image_loss), repr(r.total)])


# -- pair generation ------------------------------------------------------------


def epoch_rng(seed: int, stream: int, epoch: int) -> np.random.Generator:
    """Independent generator per (seed, stream, epoch)."""
    return np.random.default_rng([seed, stream, epoch])


class PairSampler:
    """Closure positives plus uniformly sampled negatives, fresh each epoch."""

    def __init__(self, graph: ConceptGraph):
        self.num_concepts = len(graph)
        self.positives = closure_array(graph)
        blocked = np.eye(self.num_concepts, dtype=bool)
        if len(self.positives):
            blocked[self.positives[:, 0], self.positives[:, 1]] = True
        self._blocked = blocked
        self.num_candidates = int((~blocked).sum())

    def negatives(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.num_candidates == 0:
            raise ValueError("graph too small: every ordered pair is a self-pair or a closure pair")
        n = self.num_concepts
        out = np.empty((0, 2), dtype=np.int64)
        while len(out) < count:
            need = count - len(out)
            draw = rng.integers(0, n, size=(2 * need + 8, 2))
            draw = draw[~self._blocked[draw[:, 0], draw[:, 1]]]
            out = np.vstack([out, draw[:need]])
        return out


def generate_concept_pairs(graph: ConceptGraph, k: int, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Closure positives and ``k * |positives|`` random non-closure, non-self pairs."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sampler = PairSampler(graph)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return sampler.positives, sampler.negatives(k * len(sampler.positives), rng)


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              constrained: tuple = ("concepts",)) -> None:
    """One bias-corrected Adam update, in place.

    Arrays named in ``constrained`` are concept tables: after the update they
    are clamped to be nonnegative and their root row is reset to zero.
    """
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(f"non-finite gradient for {key!r}: {bad} entries at step {state.t + 1}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for key, g in grads.items():
        p = params[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {key!r} {p.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        if key in constrained:
            project_concepts(p)


# -- concept stream -------------------------------------------------------------


def train_concepts(graph: ConceptGraph, config: TrainConfig, epochs: int | None = None):
    """Pretrain the concept table on closure pairs; one full-batch Adam step per epoch.

    Returns ``(table, losses)`` where ``losses[e]`` is the mean pair loss of epoch ``e``.
    """
    epochs = config.concept_epochs if epochs is None else epochs
    rng = np.random.default_rng([config.seed, 0])
    table = EmbeddingTable.initialize(len(graph), config.dim, rng)
    if len(graph) < 2:
        return table, []
    sampler = PairSampler(graph)
    pos = sampler.positives
    k = config.negatives_per_positive
    state = AdamState()
    losses = []
    for epoch in range(epochs):
        neg = sampler.negatives(k * len(pos), epoch_rng(config.seed, 1, epoch))
        loss, grad = concept_loss_batch(table.vectors, pos, neg, config.alpha, config.score_p)
        if not math.isfinite(loss):
            raise NonFiniteError(f"concept loss became non-finite at epoch {epoch}")
        adam_step({"concepts": table.vectors}, {"concepts": grad}, state, config.lr)
        losses.append(loss)
    return table, losses


def order_violation_rate(graph: ConceptGraph, table: EmbeddingTable, tol: float = 0.01, p: float = 2.0) -> float:
    """Fraction of closure pairs whose hypernym score is below ``-tol``."""
    pos = closure_array(graph)
    if not len(pos):
        return 0.0
    m = np.maximum(table.vectors[pos[:, 0]] - table.vectors[pos[:, 1]], 0.0)
    s = -(m ** p).sum(1)
    return float((s < -tol).mean())


# -- joint model ---------------------------------------------------------------


@dataclass
class TrainedModel:
    graph: ConceptGraph
    table: EmbeddingTable
    embedder: PixelEmbedder
    config: TrainConfig
    candidates: tuple = ()
    training_log: list = field(default_factory=list)
    ic: InformationContentTable | None = None

    @property
    def kind(self) -> ScoreKind:
        return self.config.score_kind

    def embed(self, features, strict: bool = True):
        return self.embedder.embed(features, strict=strict)

    def scores(self, features, concept_ids, strict: bool = True) -> np.ndarray:
        """``(B, C)`` scores of the given concepts against embedded features."""
        g = self.embed(features, strict=strict)
        return score_matrix(self.table.vectors[list(concept_ids)], g, self.kind)


def _image_step(model_parts, x, targets, weights, config, kind):
    table, embedder, cand = model_parts
    concepts = table.vectors[cand]
    g, cache = embedder.forward(x)
    valid = cache["valid"]
    if not valid.any():
        return 0.0, np.zeros_like(table.vectors), np.zeros_like(embedder.weights)
    gv = g[valid]
    s = score_matrix(concepts, gv, kind)
    w = None if weights is None else weights[valid]
    if config.image_loss == "softmax":
        loss, ds = softmax_xent(s, targets[valid], w)
    else:
        loss, ds = ranking_hinge(s, targets[valid], config.beta, w)
    dc, dg = score_matrix_backward(concepts, gv, kind, ds)
    d_out = np.zeros_like(g)
    d_out[valid] = dg
    dw, _ = embedder.backward(cache, d_out)
    d_table = np.zeros_like(table.vectors)
    np.add.at(d_table, cand, dc)
    return loss, d_table, dw


def joint_loss_and_grads(table, embedder, candidates, features, targets, positives, negatives,
                         config: TrainConfig, weights=None):
    """Loss ``L_image + lambda * L_concept`` on one batch, with gradients for the
    concept table and the embedder weights.

    ``targets`` index into ``candidates``; ``weights`` are optional per-sample
    image-loss weights.
    """
    kind = config.score_kind
    cand = np.asarray(candidates, dtype=np.int64)
    if len(targets):
        li, d_table, dw = _image_step((table, embedder, cand), features, targets, weights, config, kind)
    else:
        li, d_table, dw = 0.0, np.zeros_like(table.vectors), np.zeros_like(embedder.weights)
    lc, dc = concept_loss_batch(table.vectors, positives, negatives, config.alpha, config.score_p)
    return li, lc, d_table + config.lambda_ * dc, dw


def train_joint(graph: ConceptGraph, dataset, candidate_labels, config: TrainConfig,
                init_table: EmbeddingTable, ic: InformationContentTable | None = None) -> TrainedModel:
    """Joint training of concept table and pixel embedder by mini-batch Adam.

    Each epoch shuffles the samples into batches of ``config.batch_size`` and
    spreads one pass over the closure pairs (with fresh negatives) across the
    same number of steps. Image negatives are all other candidate labels.
    """
    cand = [int(c) for c in candidate_labels]
    if len(set(cand)) != len(cand) or not cand:
        raise ValueError("candidate labels must be nonempty and unique")
    pos_of = {c: i for i, c in enumerate(cand)}
    labels = np.asarray(dataset.labels, dtype=np.int64)
    features = np.asarray(dataset.features, dtype=np.float64)
    outside = sorted({int(l) for l in labels} - set(cand))
    if outside:
        raise ValueError(f"labels outside the candidate set: {', '.join(graph.names[l] for l in outside[:5])}")
    if init_table.vectors.shape != (len(graph), config.dim):
        raise ValueError(
            f"initial table has shape {init_table.vectors.shape}, expected ({len(graph)}, {config.dim})"
        )
    targets = np.array([pos_of[int(l)] for l in labels], dtype=np.int64)
    weights = None
    if config.ic_weighting:
        if ic is None:
            raise ValueError("ic_weighting requires an information content table")
        weights = ic.information[labels]

    rng = np.random.default_rng([config.seed, 2])
    table = init_table.copy()
    table.project()
    embedder = PixelEmbedder.initialize(dataset.dim, config.dim, rng, config.target_norm)
    sampler = PairSampler(graph) if len(graph) > 1 else None
    state = AdamState()
    history = []
    n = len(labels)
    for epoch in range(config.epochs):
        erng = epoch_rng(config.seed, 3, epoch)
        order = erng.permutation(n)
        steps = max(1, -(-n // config.batch_size))
        if sampler is not None:
            pos = sampler.positives
            neg = sampler.negatives(config.negatives_per_positive * len(pos), erng)
            pairs = np.vstack([pos, neg])
            is_pos = np.arange(len(pairs)) < len(pos)
            perm = erng.permutation(len(pairs))
            chunks = np.array_split(perm, steps)
        else:
            pairs = np.empty((0, 2), dtype=np.int64)
            is_pos = np.empty(0, dtype=bool)
            chunks = [np.empty(0, dtype=np.int64)] * steps
        sums = np.zeros(3)
        for step in range(steps):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            chunk = chunks[step]
            li, lc, d_table, dw = joint_loss_and_grads(
                table, embedder, cand, features[idx], targets[idx],
                pairs[chunk[is_pos[chunk]]], pairs[chunk[~is_pos[chunk]]],
                config, None if weights is None else weights[idx],
            )
            total = li + config.lambda_ * lc
            if not math.isfinite(total):
                raise NonFiniteError(f"joint loss became non-finite at epoch {epoch}, step {step}")
            adam_step({"concepts": table.vectors, "embedder": embedder.weights},
                      {"concepts": d_table, "embedder": dw}, state, config.lr)
            sums += (lc, li, total)
        sums /= steps
        history.append(EpochLog(epoch, float(sums[0]), float(sums[1]), float(sums[2])))
        log.debug("epoch %d concept=%.4f image=%.4f total=%.4f", epoch, *sums)
    return TrainedModel(graph, table, embedder, config, tuple(cand), history, ic)
