"""Synthetic hierarchical Gaussian worlds: a stand-in for CNN pixel features.

Class means follow a root-to-leaf random walk, so concepts that share a deep
ancestor have nearby means; samples are the class mean plus isotropic noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datasets import FeatureDataset
from .taxonomy import ROOT_NAME, ConceptGraph, build_graph


def balanced_tree(branching: Sequence[int], prefix: str = "n") -> list[tuple[str, str]]:
    """Edge records of a complete tree; ``branching[i]`` children per node at depth i+1."""
    edges = []
    level = [ROOT_NAME]
    for depth, b in enumerate(branching, start=2):
        nxt = []
        for parent in level:
            for j in range(b):
                name = f"{prefix}{depth}_{len(nxt)}"
                edges.append((name, parent))
                nxt.append(name)
        level = nxt
    return edges


def random_tree(num_nodes: int, seed: int, prefix: str = "c") -> list[tuple[str, str]]:
    """Random recursive tree: node i attaches to a uniformly chosen earlier node."""
    rng = np.random.default_rng(seed)
    names = [ROOT_NAME] + [f"{prefix}{i}" for i in range(1, num_nodes)]
    return [(names[i], names[int(rng.integers(0, i))]) for i in range(1, num_nodes)]


@dataclass
class SyntheticSpec:
    graph: ConceptGraph
    leaves: tuple
    dim: int = 64
    # drift per depth level; a scalar applies to every level
    sigma_level: float | Sequence[float] = 1.0
    sigma_obs: float = 0.5
    samples_per_class: int = 100
    held_out: tuple = ()
    seed: int = 0
    validation_fraction: float = 0.2
    # own-count skew: class of rank r gets samples_per_class * r**-skew samples
    frequency_skew: float = 0.0

    def __post_init__(self):
        self.leaves = tuple(int(v) for v in self.leaves)
        self.held_out = tuple(int(v) for v in self.held_out)
        if not set(self.held_out) <= set(self.leaves):
            raise ValueError("held-out classes must be among the leaf classes")
        if not set(self.leaves) - set(self.held_out):
            raise ValueError("held-out set covers every leaf class; no training classes remain")
        levels = np.atleast_1d(np.asarray(self.sigma_level, dtype=np.float64))
        if np.any(levels <= 0) or self.sigma_obs <= 0:
            raise ValueError("sigma values must be positive")
        if self.samples_per_class < 2 or not 0 <= self.validation_fraction < 1:
            raise ValueError("need samples_per_class >= 2 and 0 <= validation_fraction < 1")

    @property
    def train_classes(self) -> tuple:
        return tuple(c for c in self.leaves if c not in set(self.held_out))

    def level_sigma(self, depth: int) -> float:
        levels = np.atleast_1d(np.asarray(self.sigma_level, dtype=np.float64))
        return float(levels[min(depth - 2, len(levels) - 1)])


@dataclass
class SyntheticWorld:
    spec: SyntheticSpec
    train: FeatureDataset
    validation: FeatureDataset
    zero_shot_test: FeatureDataset
    means: np.ndarray
    own_counts: dict = field(default_factory=dict)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticWorld:
    g = spec.graph
    rng = np.random.default_rng(spec.seed)
    means = np.zeros((len(g), spec.dim))
    for v in range(1, len(g)):  # ids are topologically ordered
        base = np.mean([means[p] for p in sorted(g.parents[v])], axis=0)
        means[v] = base + rng.normal(0.0, spec.level_sigma(int(g.depth[v])), spec.dim)

    ranks = rng.permutation(len(spec.leaves)) + 1
    counts = {
        c: max(2, int(round(spec.samples_per_class * float(r) ** -spec.frequency_skew)))
        for c, r in zip(spec.leaves, ranks)
    }
    held = set(spec.held_out)
    parts = {"train": ([], []), "validation": ([], []), "zero_shot_test": ([], [])}
    for c in spec.leaves:
        n = counts[c]
        x = means[c] + rng.normal(0.0, spec.sigma_obs, size=(n, spec.dim))
        if c in held:
            parts["zero_shot_test"][0].append(np.full(n, c))
            parts["zero_shot_test"][1].append(x)
            continue
        n_val = int(round(n * spec.validation_fraction))
        parts["validation"][0].append(np.full(n_val, c))
        parts["validation"][1].append(x[:n_val])
        parts["train"][0].append(np.full(n - n_val, c))
        parts["train"][1].append(x[n_val:])

    def make(labels, feats):
        if not labels:
            return FeatureDataset(spec.dim, np.empty(0, np.int64), np.empty((0, spec.dim)))
        return FeatureDataset(spec.dim, np.concatenate(labels), np.concatenate(feats))

    return SyntheticWorld(
        spec=spec,
        train=make(*parts["train"]),
        validation=make(*parts["validation"]),
        zero_shot_test=make(*parts["zero_shot_test"]),
        means=means,
        own_counts={g.names[c]: counts[c] for c in spec.leaves},
    )


def zero_shot_world(seed: int, branching=(5, 5), held_per_group: int = 1, dim: int = 64,
                    sigma_level=(3.0, 1.5), sigma_obs: float = 0.6, samples_per_class: int = 60,
                    frequency_skew: float = 0.5) -> SyntheticSpec:
    """A balanced taxonomy with ``held_per_group`` leaves held out under every
    bottom-level parent, chosen at random."""
    graph = build_graph(balanced_tree(branching))
    rng = np.random.default_rng([seed, 77])
    leaves = graph.leaves
    held = []
    for parent in sorted({min(graph.parents[l]) for l in leaves}):
        kids = sorted(graph.children[parent])
        held.extend(int(k) for k in rng.choice(kids, size=held_per_group, replace=False))
    return SyntheticSpec(
        graph=graph, leaves=tuple(leaves), dim=dim, sigma_level=sigma_level, sigma_obs=sigma_obs,
        samples_per_class=samples_per_class, held_out=tuple(sorted(held)), seed=seed,
        frequency_skew=frequency_skew,
    )
