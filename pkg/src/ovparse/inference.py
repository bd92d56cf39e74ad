"""Closed-set and zero-shot label inference, threshold calibration, baselines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conceptops import nearest_concepts_batch
from .embedding import COSINE, ScoreKind
from .metrics import hierarchical_tables
from .taxonomy import ConceptGraph
from .training import AdamState, TrainConfig, TrainedModel, adam_step, epoch_rng


@dataclass
class Prediction:
    primary: int
    accepted: list = field(default_factory=list)  # [(concept_id, score), ...]
    mode: str = "closed_set"


def usable_vocabulary(model: TrainedModel, vocabulary) -> np.ndarray:
    """Vocabulary ids as a sorted array; under cosine, zero vectors (the root)
    are dropped because their score is undefined."""
    vocab = np.array(sorted({int(v) for v in vocabulary}), dtype=np.int64)
    if model.kind.name == "cosine" and not model.kind.raw_dot:
        vocab = vocab[np.linalg.norm(model.table.vectors[vocab], axis=1) > 0]
    return vocab


# -- closed set --------------------------------------------------------------


def classify_closed_batch(model: TrainedModel, features, candidates) -> np.ndarray:
    """Argmax candidate per feature row; ties go to the smallest id."""
    cand = np.array(sorted({int(c) for c in candidates}), dtype=np.int64)
    if not len(cand):
        raise ValueError("candidate set is empty")
    s = model.scores(features, cand)
    return cand[np.argmax(s, axis=1)]


def classify_closed(model: TrainedModel, feature, candidates) -> Prediction:
    cand = np.array(sorted({int(c) for c in candidates}), dtype=np.int64)
    if not len(cand):
        raise ValueError("candidate set is empty")
    s = model.scores(np.asarray(feature)[None], cand)[0]
    best = int(np.argmax(s))
    return Prediction(int(cand[best]), [(int(cand[best]), float(s[best]))], "closed_set")


# -- zero shot -----------------------------------------------------------------


def _hierarchy_order(graph: ConceptGraph, vocab: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # per row: deepest first, then highest score, then smallest id
    depth = graph.depth[vocab].astype(np.float64)
    keys = (np.broadcast_to(vocab, scores.shape), -scores, np.broadcast_to(-depth, scores.shape))
    return np.lexsort(keys, axis=-1)


def zero_shot_primary(graph: ConceptGraph, vocab: np.ndarray, scores: np.ndarray, cutoff: float,
                      order: np.ndarray | None = None) -> np.ndarray:
    """Primary prediction per row of ``scores`` (n, |vocab|); rows with no score
    at or above ``cutoff`` fall back to the root."""
    if order is None:
        order = _hierarchy_order(graph, vocab, scores)
    s_sorted = np.take_along_axis(scores, order, axis=1)
    ok = s_sorted >= cutoff
    first = np.argmax(ok, axis=1)
    rows = np.arange(len(scores))
    out = vocab[order[rows, first]]
    return np.where(ok.any(axis=1), out, graph.root)


def predict_zero_shot(model: TrainedModel, feature, vocabulary, cutoff: float) -> Prediction:
    """Every vocabulary concept scoring at least ``cutoff``, most specific first."""
    vocab = usable_vocabulary(model, vocabulary)
    s = model.scores(np.asarray(feature)[None], vocab)[0]
    order = _hierarchy_order(model.graph, vocab, s[None])[0]
    accepted = [(int(vocab[i]), float(s[i])) for i in order if s[i] >= cutoff]
    if not accepted:
        root = model.graph.root
        try:
            s_root = float(model.scores(np.asarray(feature)[None], [root])[0, 0])
        except ValueError:  # cosine against the zero root vector
            s_root = float("nan")
        accepted = [(root, s_root)]
    return Prediction(accepted[0][0], accepted, "zero_shot")


def predict_zero_shot_batch(model: TrainedModel, features, vocabulary, cutoff: float) -> np.ndarray:
    vocab = usable_vocabulary(model, vocabulary)
    return zero_shot_primary(model.graph, vocab, model.scores(features, vocab), cutoff)


@dataclass
class Calibration:
    cutoff: float
    score: float
    grid: np.ndarray = field(repr=False)
    objective: np.ndarray = field(repr=False)


def calibrate_from_scores(graph: ConceptGraph, scores, labels, vocab, steps: int = 50) -> Calibration:
    """Grid search over the empirical score range for the cutoff that maximizes
    mean hierarchical F-score of the primary predictions. Ties keep the lowest cutoff."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    vocab = np.asarray(vocab, dtype=np.int64)
    if not len(labels):
        raise ValueError("validation set is empty")
    finite = scores[np.isfinite(scores)]
    grid = np.linspace(finite.min(), finite.max(), steps)
    uniq = np.unique(labels)
    _, _, hf, _ = hierarchical_tables(graph, None, uniq, range(len(graph)))
    li = np.searchsorted(uniq, labels)
    order = _hierarchy_order(graph, vocab, scores)
    objective = np.empty(steps)
    for i, c in enumerate(grid):
        primary = zero_shot_primary(graph, vocab, scores, c, order)
        objective[i] = hf[li, primary].mean()
    best = int(np.argmax(objective))
    return Calibration(float(grid[best]), float(objective[best]), grid, objective)


def calibrate_threshold(model: TrainedModel, validation_set, vocabulary, steps: int = 50) -> Calibration:
    if len(validation_set) == 0:
        raise ValueError("validation set is empty")
    vocab = usable_vocabulary(model, vocabulary)
    s = model.scores(validation_set.features, vocab)
    return calibrate_from_scores(model.graph, s, validation_set.labels, vocab, steps)


# -- softmax baselines ------------------------------------------------------------


@dataclass
class SoftmaxBaseline:
    """Multinomial logistic regression from features to candidate labels."""

    weights: np.ndarray
    bias: np.ndarray
    candidates: tuple

    def logits(self, features):
        return np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weights + self.bias

    def probabilities(self, features):
        z = self.logits(features)
        z -= z.max(1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(1, keepdims=True)

    def predict(self, features) -> np.ndarray:
        cand = np.asarray(self.candidates)
        return cand[np.argmax(self.logits(features), axis=1)]


def _fit_softmax(x, y, num_classes, config: TrainConfig, stream: int):
    # x (n, D), y (n,) class indices; Adam on mean cross-entropy
    d = x.shape[1]
    params = {"w": np.zeros((d, num_classes)), "b": np.zeros(num_classes)}
    state = AdamState()
    n = len(y)
    for epoch in range(config.epochs):
        order = epoch_rng(config.seed, stream, epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            z = x[idx] @ params["w"] + params["b"]
            z -= z.max(1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(1, keepdims=True)
            p[np.arange(len(idx)), y[idx]] -= 1.0
            p /= len(idx)
            adam_step(params, {"w": x[idx].T @ p, "b": p.sum(0)}, state, config.lr, constrained=())
    return params["w"], params["b"]


def softmax_baseline_train(dataset, candidates, config: TrainConfig) -> SoftmaxBaseline:
    cand = tuple(sorted({int(c) for c in candidates}))
    pos = {c: i for i, c in enumerate(cand)}
    try:
        y = np.array([pos[int(l)] for l in dataset.labels], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]} outside the candidate set") from None
    w, b = _fit_softmax(np.asarray(dataset.features, dtype=np.float64), y, len(cand), config, stream=10)
    return SoftmaxBaseline(w, b, cand)


def softmax_baseline_predict(baseline: SoftmaxBaseline, feature) -> Prediction:
    prob = baseline.probabilities(np.asarray(feature)[None])[0]
    best = int(np.argmax(prob))
    c = int(baseline.candidates[best])
    return Prediction(c, [(c, float(prob[best]))], "closed_set")


@dataclass
class ConditionalSoftmax:
    """Sibling softmax heads keyed by parent id: ``{parent: (children, W, b)}``."""

    heads: dict
    candidates: tuple
    nodes: frozenset = frozenset()


def _label_subgraph(graph: ConceptGraph, candidates) -> frozenset:
    nodes = set()
    for c in candidates:
        nodes.update(graph.ancestors(c, include_self=True))
    return frozenset(nodes)


def conditional_softmax_train(graph: ConceptGraph, dataset, candidates, config: TrainConfig) -> ConditionalSoftmax:
    """One softmax head per node of the label hierarchy that has two or more children."""
    cand = tuple(sorted({int(c) for c in candidates}))
    nodes = _label_subgraph(graph, cand)
    x = np.asarray(dataset.features, dtype=np.float64)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if set(labels.tolist()) - set(cand):
        raise ValueError("dataset labels outside the candidate set")
    heads = {}
    for v in sorted(nodes):
        kids = tuple(sorted(c for c in graph.children[v] if c in nodes))
        if len(kids) < 2:
            continue
        # label -> first child whose subtree contains it
        route = {}
        for l in set(labels.tolist()):
            for i, k in enumerate(kids):
                if graph.is_ancestor(k, l):
                    route[l] = i
                    break
        mask = np.array([l in route for l in labels], dtype=bool)
        y = np.array([route[l] for l in labels[mask]], dtype=np.int64)
        if len(y) == 0:
            w, b = np.zeros((x.shape[1], len(kids))), np.zeros(len(kids))
        else:
            w, b = _fit_softmax(x[mask], y, len(kids), config, stream=100 + v)
        heads[v] = (kids, w, b)
    return ConditionalSoftmax(heads, cand, nodes)


def absolute_probabilities(graph: ConceptGraph, model: ConditionalSoftmax, features) -> np.ndarray:
    """``(n, |V|)`` product of sibling-conditional probabilities along root paths,
    maximized over paths where a node has several parents. Nodes outside the
    label hierarchy get 0."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = len(x)
    cond = {}
    for parent, (kids, w, b) in model.heads.items():
        z = x @ w + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        for i, k in enumerate(kids):
            cond[(parent, k)] = p[:, i]
    nodes = model.nodes or frozenset(range(len(graph)))
    prob = np.zeros((n, len(graph)))
    prob[:, graph.root] = 1.0
    for v in range(len(graph)):
        if v == graph.root or v not in nodes:
            continue
        best = np.zeros(n)
        for p in graph.parents[v]:
            if p not in nodes:
                continue
            siblings = [c for c in graph.children[p] if c in nodes]
            if len(siblings) >= 2:
                if (p, v) not in cond:
                    raise ValueError(f"no trained head for {graph.names[p]!r}")
                c = cond[(p, v)]
            else:
                c = 1.0
            best = np.maximum(best, prob[:, p] * c)
        prob[:, v] = best
    return prob


def conditional_softmax_predict(graph: ConceptGraph, model: ConditionalSoftmax, feature) -> Prediction:
    prob = absolute_probabilities(graph, model, np.asarray(feature)[None])[0]
    cand = np.asarray(model.candidates)
    best = int(np.argmax(prob[cand]))
    return Prediction(int(cand[best]), [(int(cand[best]), float(prob[cand[best]]))], "closed_set")


def conditional_softmax_predict_batch(graph: ConceptGraph, model: ConditionalSoftmax, features) -> np.ndarray:
    cand = np.asarray(model.candidates)
    return cand[np.argmax(absolute_probabilities(graph, model, features)[:, cand], axis=1)]


# -- convex combination ---------------------------------------------------------


def convex_combination_embed(probabilities, table_vectors, candidates=None) -> np.ndarray:
    """Probability-weighted mix of candidate concept vectors.

    ``probabilities`` is ``(C,)`` or ``(n, C)`` over ``candidates`` (all table
    rows when None).
    """
    p = np.asarray(probabilities, dtype=np.float64)
    vecs = np.asarray(table_vectors, dtype=np.float64)
    if candidates is not None:
        vecs = vecs[list(candidates)]
    if p.shape[-1] != len(vecs):
        raise ValueError(f"{p.shape[-1]} probabilities for {len(vecs)} candidates")
    if np.any(p < 0) or np.any(np.abs(p.sum(-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must be nonnegative and sum to 1")
    return p @ vecs


def convex_combination_predict(baseline: SoftmaxBaseline, table_vectors, features, vocabulary,
                               kind: ScoreKind = COSINE) -> np.ndarray:
    """Nearest vocabulary concept to each mixed embedding."""
    mixed = convex_combination_embed(baseline.probabilities(features), table_vectors, baseline.candidates)
    ids, _ = nearest_concepts_batch(table_vectors, mixed, 1, kind, vocabulary)
    return ids[:, 0]
