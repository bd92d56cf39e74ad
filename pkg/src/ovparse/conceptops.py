"""Embedding-space tools: concept search over feature grids, nearest concepts,
and concept synthesis by coordinatewise min / max."""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass

import numpy as np

from .embedding import COSINE, HYPER, ScoreKind, score_matrix


@dataclass
class ScoreMap:
    scores: np.ndarray  # (H, W); -inf marks cells whose embedding was degenerate
    query: str
    degenerate: int = 0

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    def normalized(self) -> np.ndarray:
        """Min-max scaled copy in [0, 1]; undefined cells map to 0."""
        s = self.scores
        ok = np.isfinite(s)
        out = np.zeros_like(s, dtype=np.float64)
        if ok.any():
            lo, hi = s[ok].min(), s[ok].max()
            out[ok] = (s[ok] - lo) / (hi - lo) if hi > lo else 1.0
        return out

    def to_pgm(self) -> str:
        levels = np.rint(self.normalized() * 255).astype(int)
        rows = [" ".join(str(v) for v in row) for row in levels]
        return f"P2\n# {self.query}\n{self.width} {self.height}\n255\n" + "\n".join(rows) + "\n"

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(v)) for v in row) for row in self.scores) + "\n"

    def save(self, stem) -> tuple[str, str]:
        stem = str(stem)
        with open(stem + ".pgm", "w", encoding="ascii") as fh:
            fh.write(self.to_pgm())
        with open(stem + ".csv", "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())
        return stem + ".pgm", stem + ".csv"


def synth_concept(a, b, op: str) -> np.ndarray:
    """Coordinatewise ``max`` (common specialization) or ``min`` (common generalization)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if op == "max":
        return np.maximum(a, b)
    if op == "min":
        return np.minimum(a, b)
    raise ValueError(f"unknown synthesis op {op!r}")


_TOKEN = re.compile(r"\s*(?:(min|max)\s*\(|([(),])|([^(),]+))")


def parse_expression(text: str):
    """Parse ``name`` / ``min(e, e)`` / ``max(e, e)`` into a nested tuple tree.

    Concept names are taken verbatim (trimmed); ``min``/``max`` followed by ``(``
    always start an operation.
    """
    pos = 0

    def expr():
        nonlocal pos
        m = _TOKEN.match(text, pos)
        if not m:
            raise ValueError(f"unexpected end of expression in {text!r}")
        pos = m.end()
        if m.group(1):
            left = expr()
            _expect(",")
            right = expr()
            _expect(")")
            return (m.group(1), left, right)
        if m.group(3) and m.group(3).strip():
            return m.group(3).strip()
        raise ValueError(f"unexpected {m.group(0).strip()!r} at offset {m.start()} in {text!r}")

    def _expect(ch):
        nonlocal pos
        m = _TOKEN.match(text, pos)
        if not m or m.group(2) != ch:
            raise ValueError(f"expected {ch!r} at offset {pos} in {text!r}")
        pos = m.end()

    tree = expr()
    if text[pos:].strip():
        raise ValueError(f"trailing input {text[pos:]!r} in expression")
    return tree


def evaluate_expression(tree, lookup) -> np.ndarray:
    """Evaluate a parsed expression; ``lookup(name)`` returns a concept vector."""
    if isinstance(tree, str):
        return np.asarray(lookup(tree), dtype=np.float64)
    op, left, right = tree
    return synth_concept(evaluate_expression(left, lookup), evaluate_expression(right, lookup), op)


def nearest_concepts_batch(table_vectors, queries, k: int, kind: ScoreKind = COSINE, vocabulary=None):
    """Top-``k`` concept ids and scores per query row, ties broken by smaller id.

    Under cosine, zero vectors are skipped. Returns ``(ids, scores)``, each ``(n, k')``.
    """
    vecs = np.asarray(table_vectors, dtype=np.float64)
    ids = np.arange(len(vecs)) if vocabulary is None else np.array(sorted({int(v) for v in vocabulary}))
    if kind.name == "cosine" and not kind.raw_dot:
        ids = ids[np.linalg.norm(vecs[ids], axis=1) > 0]
    s = score_matrix(vecs[ids], np.atleast_2d(queries), kind)
    # stable sort on -score keeps id order among ties
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    return ids[order], np.take_along_axis(s, order, axis=1)


def nearest_concepts(table_vectors, v, k: int, kind: ScoreKind = COSINE, vocabulary=None):
    """Ranked ``[(concept_id, score), ...]`` of length ``min(k, |table|)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(table_vectors) if vocabulary is None else len(set(vocabulary))
    if k > n:
        warnings.warn(f"k={k} exceeds the {n} available concepts; returning all", stacklevel=2)
    ids, s = nearest_concepts_batch(table_vectors, np.asarray(v)[None], k, kind, vocabulary)
    return [(int(i), float(x)) for i, x in zip(ids[0], s[0])]


def concept_search(model, feature_grid, query, label: str | None = None) -> ScoreMap:
    """Score every cell of an ``(H, W, D)`` feature grid against a concept.

    ``query`` is a concept id or a raw embedding vector. Cells whose rectified
    embedding is all zero score ``-inf``.
    """
    grid = np.asarray(feature_grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError("feature grid must be H x W x D")
    h, w, d = grid.shape
    if d != model.embedder.in_dim:
        raise ValueError(f"grid feature dim {d} does not match embedder input {model.embedder.in_dim}")
    if np.ndim(query) == 0:
        qvec = model.table.vectors[int(query)]
        label = label or model.graph.names[int(query)]
    else:
        qvec = np.asarray(query, dtype=np.float64)
        label = label or "vector"
    g, cache = model.embedder.forward(grid.reshape(-1, d))
    valid = cache["valid"]
    out = np.full(h * w, -np.inf)
    if valid.any():
        out[valid] = score_matrix(qvec[None], g[valid], model.kind)[:, 0]
    bad = int((~valid).sum())
    if bad:
        warnings.warn(f"{bad} grid cell(s) have degenerate embeddings; scored -inf", stacklevel=2)
    return ScoreMap(out.reshape(h, w), label, bad)


def hyper_dominates(a, b, tol: float = 0.0) -> bool:
    """True when ``a`` sits below ``b`` in every coordinate (hypernym score 0)."""
    return float(score_matrix(np.asarray(a)[None], np.asarray(b)[None], HYPER)[0, 0]) >= -tol
