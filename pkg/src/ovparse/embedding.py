"""Scoring functions, losses and their gradients for the joint concept/pixel space.

All scores take the concept embedding first and the pixel (or hyponym)
embedding second, ``S(f(x), g(y))``. Batched routines work on a concept
matrix ``(C, N)`` against a pixel matrix ``(B, N)`` and return ``(B, C)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class DegenerateEmbeddingError(ArithmeticError):
    """The rectified pixel embedding is all zero, so its norm cannot be fixed."""


class EmbeddingFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreKind:
    """Which score to use: ``lp`` and ``hyper`` take exponent ``p``; ``cosine``
    is the normalized cosine unless ``raw_dot`` is set."""

    name: str
    p: float = 2.0
    raw_dot: bool = False

    def __post_init__(self):
        if self.name not in ("lp", "cosine", "hyper"):
            raise ValueError(f"unknown score kind {self.name!r}")
        if self.p <= 0:
            raise ValueError("score exponent p must be positive")

    @classmethod
    def parse(cls, text: str, p: float = 2.0) -> "ScoreKind":
        text = text.strip().lower()
        if text in ("l2", "lp"):
            return cls("lp", p=2.0 if text == "l2" else p)
        if text in ("cosine", "cos"):
            return cls("cosine")
        if text == "dot":
            return cls("cosine", raw_dot=True)
        if text == "hyper":
            return cls("hyper", p=p)
        raise ValueError(f"unknown score kind {text!r} (expected l2, lp, cosine, dot or hyper)")

    def __str__(self):
        if self.name == "cosine":
            return "dot" if self.raw_dot else "cosine"
        if self.name == "lp" and self.p == 2.0:
            return "l2"
        return self.name


L2 = ScoreKind("lp")
COSINE = ScoreKind("cosine")
HYPER = ScoreKind("hyper")


def _pow(m, p):
    # m >= 0; exponent p on the magnitude
    return m * m if p == 2.0 else m ** p


def _dpow(m, p):
    # derivative of m**p for m >= 0, with 0 on the flat side
    if p == 2.0:
        return 2.0 * m
    return np.where(m > 0, p * np.where(m > 0, m, 1.0) ** (p - 1.0), 0.0)


def _check_pair(concepts, pixels):
    if concepts.shape[-1] != pixels.shape[-1]:
        raise ValueError(f"dimension mismatch: {concepts.shape[-1]} vs {pixels.shape[-1]}")


def _norms(a, what):
    n = np.linalg.norm(a, axis=-1)
    if np.any(n == 0):
        raise ValueError(f"cosine score undefined for a zero {what} vector")
    return n


def score_matrix(concepts, pixels, kind: ScoreKind = HYPER) -> np.ndarray:
    """Scores of every concept row against every pixel row, shape ``(B, C)``."""
    concepts = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    _check_pair(concepts, pixels)
    if kind.name == "cosine":
        s = pixels @ concepts.T
        if not kind.raw_dot:
            s = s / np.outer(_norms(pixels, "pixel"), _norms(concepts, "concept"))
        return s
    if kind.name == "lp" and kind.p == 2.0:
        sq = (pixels ** 2).sum(1)[:, None] + (concepts ** 2).sum(1)[None, :] - 2.0 * pixels @ concepts.T
        # expanded form can dip below zero by rounding
        return -np.maximum(sq, 0.0)
    diff = concepts[None, :, :] - pixels[:, None, :]
    if kind.name == "lp":
        return -(np.abs(diff) ** kind.p).sum(-1)
    return -_pow(np.maximum(diff, 0.0), kind.p).sum(-1)


def score_matrix_backward(concepts, pixels, kind: ScoreKind, d_scores):
    """Backpropagate ``d_scores`` (B, C) to the concept and pixel matrices."""
    concepts = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    w = np.asarray(d_scores, dtype=np.float64)
    if kind.name == "cosine":
        if kind.raw_dot:
            return w.T @ pixels, w @ concepts
        nf = _norms(concepts, "concept")
        ng = _norms(pixels, "pixel")
        fh = concepts / nf[:, None]
        gh = pixels / ng[:, None]
        s = gh @ fh.T
        d_concepts = (w.T @ gh - (w * s).sum(0)[:, None] * fh) / nf[:, None]
        d_pixels = (w @ fh - (w * s).sum(1)[:, None] * gh) / ng[:, None]
        return d_concepts, d_pixels
    if kind.name == "lp" and kind.p == 2.0:
        d_concepts = -2.0 * w.sum(0)[:, None] * concepts + 2.0 * w.T @ pixels
        d_pixels = -2.0 * w.sum(1)[:, None] * pixels + 2.0 * w @ concepts
        return d_concepts, d_pixels
    diff = concepts[None, :, :] - pixels[:, None, :]
    if kind.name == "lp":
        dd = -_dpow(np.abs(diff), kind.p) * np.sign(diff)
    else:
        dd = -_dpow(np.maximum(diff, 0.0), kind.p)
    dd *= w[:, :, None]
    return dd.sum(0), -dd.sum(1)


def score(x, y, kind: ScoreKind = HYPER) -> float:
    """Score of concept ``x`` against ``y``.

    >>> score([2.0, 1.0], [1.0, 2.0], HYPER)
    -1.0
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(score_matrix(x[None], y[None], kind)[0, 0])


def score_grad(x, y, kind: ScoreKind = HYPER):
    """Gradient of ``score(x, y)`` with respect to ``x`` and ``y``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = score_matrix_backward(x[None], y[None], kind, np.ones((1, 1)))
    return dx[0], dy[0]


# -- concept stream ---------------------------------------------------------


def _hyper_pairs(F, u, v, p):
    m = np.maximum(F[u] - F[v], 0.0)
    return -_pow(m, p).sum(1), _dpow(m, p)


def concept_loss(fu, fv, positive: bool, alpha: float = 1.0, p: float = 2.0):
    """Max-margin order loss for a single pair ``u`` (hypernym candidate), ``v``.

    Returns ``(loss, d_fu, d_fv)``. Positive pairs pay ``-S_hyper``; negative
    pairs pay the hinge ``max(0, alpha + S_hyper)``.
    """
    fu = np.asarray(fu, dtype=np.float64)
    fv = np.asarray(fv, dtype=np.float64)
    if fu.shape != fv.shape:
        raise ValueError(f"dimension mismatch: {fu.shape} vs {fv.shape}")
    m = np.maximum(fu - fv, 0.0)
    s = -float(_pow(m, p).sum())
    ds_dfu = -_dpow(m, p)
    if positive:
        return -s, -ds_dfu, ds_dfu
    h = alpha + s
    if h <= 0:
        z = np.zeros_like(fu)
        return 0.0, z, z.copy()
    return h, ds_dfu, -ds_dfu


def concept_loss_batch(F, positives, negatives, alpha: float = 1.0, p: float = 2.0):
    """Mean concept loss over all given pairs and its gradient wrt the table ``F``.

    ``positives``/``negatives`` are ``(P, 2)`` arrays of ``(u, v)`` ids.
    """
    F = np.asarray(F, dtype=np.float64)
    grad = np.zeros_like(F)
    total = 0.0
    count = 0
    if len(positives):
        u, v = positives[:, 0], positives[:, 1]
        s, dm = _hyper_pairs(F, u, v, p)
        total -= s.sum()
        np.add.at(grad, u, dm)
        np.add.at(grad, v, -dm)
        count += len(positives)
    if len(negatives):
        u, v = negatives[:, 0], negatives[:, 1]
        s, dm = _hyper_pairs(F, u, v, p)
        h = alpha + s
        active = h > 0
        total += h[active].sum()
        dm = dm * active[:, None]
        np.add.at(grad, u, -dm)
        np.add.at(grad, v, dm)
        count += len(negatives)
    if count == 0:
        return 0.0, grad
    return total / count, grad / count


# -- image stream ------------------------------------------------------------


def softmax_xent(scores, targets, weights=None):
    """Mean (weighted) softmax cross-entropy over rows of ``scores`` (B, C).

    Returns ``(loss, d_scores)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    b = scores.shape[0]
    shifted = scores - scores.max(1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(1))
    rows = np.arange(b)
    per = lse - shifted[rows, targets]
    prob = np.exp(shifted - lse[:, None])
    prob[rows, targets] -= 1.0
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    return float((w * per).sum() / b), prob * (w / b)[:, None]


def ranking_hinge(scores, targets, beta: float = 1.0, weights=None):
    """Mean (weighted) sum over negatives of ``max(0, beta - S_true + S_neg)``."""
    scores = np.asarray(scores, dtype=np.float64)
    b = scores.shape[0]
    rows = np.arange(b)
    h = beta - scores[rows, targets][:, None] + scores
    h[rows, targets] = 0.0
    active = (h > 0).astype(np.float64)
    active[rows, targets] = 0.0
    per = (h * active).sum(1)
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    d = active.copy()
    d[rows, targets] = -active.sum(1)
    return float((w * per).sum() / b), d * (w / b)[:, None]


def _single_image_loss(pixel, true_label, negatives, kind, reducer):
    negatives = [np.asarray(n, dtype=np.float64) for n in negatives]
    if not negatives:
        raise ValueError("image loss needs at least one negative label")
    concepts = np.vstack([np.asarray(true_label, dtype=np.float64)] + negatives)
    pixel = np.asarray(pixel, dtype=np.float64)
    s = score_matrix(concepts, pixel[None], kind)
    loss, ds = reducer(s, np.array([0]))
    dc, dp = score_matrix_backward(concepts, pixel[None], kind, ds)
    return loss, {"pixel": dp[0], "true": dc[0], "negatives": dc[1:]}


def image_loss_softmax(pixel, true_label, negatives, kind: ScoreKind = HYPER):
    """Softmax ranking loss of the true label against the negatives for one pixel.

    Returns ``(loss, grads)`` with keys ``pixel``, ``true`` and ``negatives``.
    """
    return _single_image_loss(pixel, true_label, negatives, kind, softmax_xent)


def image_loss_margin(pixel, true_label, negatives, beta: float = 1.0, kind: ScoreKind = HYPER):
    """Max-margin ranking loss summed over negatives for one pixel."""
    return _single_image_loss(
        pixel, true_label, negatives, kind, lambda s, t: ranking_hinge(s, t, beta)
    )


# -- embedder ----------------------------------------------------------------


@dataclass
class PixelEmbedder:
    """Linear map from D-dim features to the N-dim space, then ReLU, then the
    output is rescaled to a fixed Euclidean norm."""

    weights: np.ndarray
    target_norm: float = 30.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("embedder weights must be a D x N matrix")
        if not self.target_norm > 0:
            raise ValueError("target_norm must be positive")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initialize(cls, in_dim: int, out_dim: int, rng: np.random.Generator, target_norm: float = 30.0):
        std = np.sqrt(2.0 / (in_dim + out_dim))
        return cls(rng.normal(0.0, std, size=(in_dim, out_dim)), target_norm)

    def forward(self, features):
        """Embed rows of ``features``. Returns ``(out, cache)``; degenerate rows
        come back as zeros and are flagged in ``cache['valid']``."""
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"feature dimension {x.shape[1]} does not match embedder input {self.in_dim}")
        z = x @ self.weights
        r = np.maximum(z, 0.0)
        norm = np.linalg.norm(r, axis=1)
        valid = norm > 0
        scale = np.where(valid, self.target_norm / np.where(valid, norm, 1.0), 0.0)
        out = r * scale[:, None]
        return out, {"x": x, "z": z, "r": r, "norm": norm, "valid": valid, "out": out}

    def embed(self, features, strict: bool = True) -> np.ndarray:
        out, cache = self.forward(features)
        if strict and not cache["valid"].all():
            bad = np.flatnonzero(~cache["valid"])
            raise DegenerateEmbeddingError(
                f"rectified embedding is all zero for {len(bad)} feature(s) (first index {bad[0]})"
            )
        return out

    def backward(self, cache, d_out):
        """Gradients of the loss wrt the weights and the input features."""
        d_out = np.asarray(d_out, dtype=np.float64)
        valid = cache["valid"]
        norm = np.where(valid, cache["norm"], 1.0)
        unit = cache["out"] / self.target_norm
        # d(t * r/|r|) = t/|r| (I - u u^T) dr
        d_r = (self.target_norm / norm)[:, None] * (d_out - (d_out * unit).sum(1)[:, None] * unit)
        d_r[~valid] = 0.0
        d_z = d_r * (cache["z"] > 0)
        return cache["x"].T @ d_z, d_z @ self.weights.T


def embed_feature(embedder: PixelEmbedder, feature) -> np.ndarray:
    """Embed a single D-vector; raises :class:`DegenerateEmbeddingError`."""
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise ValueError("embed_feature expects a single feature vector")
    return embedder.embed(feature[None])[0]


# -- concept table -------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """Concept vectors, one row per concept id; row 0 (the root) stays at the origin."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.array(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("embedding table must be 2-d")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    def __getitem__(self, concept_id):
        return self.vectors[concept_id]

    @classmethod
    def initialize(cls, num_concepts: int, dim: int, rng: np.random.Generator, high: float = 0.1):
        vectors = rng.uniform(0.0, high, size=(num_concepts, dim))
        vectors[0] = 0.0
        return cls(vectors)

    def project(self) -> None:
        project_concepts(self.vectors)

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.vectors.copy())


def project_concepts(vectors: np.ndarray, root: int = 0) -> None:
    """Clamp to the nonnegative orthant and pin the root at the origin, in place."""
    np.maximum(vectors, 0.0, out=vectors)
    vectors[root] = 0.0


def write_embedding_tsv(names, table: EmbeddingTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name, row in zip(names, table.vectors):
            fh.write(name + "\t" + ",".join(repr(float(c)) for c in row) + "\n")


def read_embedding_tsv(path, names) -> EmbeddingTable:
    """Read a dump and order its rows by ``names`` (the graph's id order)."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                name, coords = line.split("\t")
                rows[name] = np.array([float(c) for c in coords.split(",")])
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: malformed embedding row") from None
    missing = [n for n in names if n not in rows]
    if missing:
        raise EmbeddingFormatError(f"{path}: no embedding for {', '.join(missing[:5])}")
    dims = {len(rows[n]) for n in names}
    if len(dims) != 1:
        raise EmbeddingFormatError(f"{path}: inconsistent embedding dimensions {sorted(dims)}")
    return EmbeddingTable(np.vstack([rows[n] for n in names]))


_OVSW = struct.Struct("<4sIII")


def write_embedder(embedder: PixelEmbedder, path) -> None:
    d, n = embedder.weights.shape
    with open(path, "wb") as fh:
        fh.write(_OVSW.pack(b"OVSW", 1, d, n))
        fh.write(embedder.weights.astype("<f4").tobytes(order="C"))


def read_embedder(path, target_norm: float = 30.0) -> PixelEmbedder:
    with open(path, "rb") as fh:
        head = fh.read(_OVSW.size)
        if len(head) != _OVSW.size:
            raise EmbeddingFormatError(f"{path}: truncated header")
        magic, version, d, n = _OVSW.unpack(head)
        if magic != b"OVSW" or version != 1:
            raise EmbeddingFormatError(f"{path}: not an OVSW v1 file")
        body = fh.read()
    if len(body) != 4 * d * n:
        raise EmbeddingFormatError(f"{path}: expected {d}x{n} float32 weights, got {len(body)} bytes")
    return PixelEmbedder(np.frombuffer(body, dtype="<f4").reshape(d, n).astype(np.float64), target_norm)
