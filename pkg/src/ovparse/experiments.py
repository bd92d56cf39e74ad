"""Experiment drivers on synthetic worlds: closed-set, zero-shot comparison,
and the training-class diversity sweep."""

from __future__ import annotations

import logging

import numpy as np

from .inference import (
    calibrate_threshold,
    classify_closed_batch,
    conditional_softmax_predict_batch,
    conditional_softmax_train,
    convex_combination_predict,
    predict_zero_shot_batch,
    softmax_baseline_train,
)
from .metrics import aggregate
from .synthetic import SyntheticSpec, balanced_tree, generate_synthetic, zero_shot_world
from .taxonomy import build_graph, information_content
from .training import TrainConfig, train_concepts, train_joint

log = logging.getLogger(__name__)

ZERO_SHOT_METHODS = ("joint-hyper", "softmax", "conditional-softmax", "convex-combination")


def zero_shot_comparison(seed: int, config: TrainConfig | None = None, spec: SyntheticSpec | None = None,
                         methods=ZERO_SHOT_METHODS):
    """Train on the world's seen leaves and score every method on the held-out ones.

    Returns ``(reports, details)``: a MetricsReport per method, plus the joint
    model's calibration and raw zero-shot primaries.
    """
    config = config or TrainConfig(seed=seed, epochs=100)
    spec = spec or zero_shot_world(seed)
    world = generate_synthetic(spec)
    g = spec.graph
    ic = information_content(g, world.own_counts)
    vocab = range(len(g))
    zs = world.zero_shot_test
    train_cls = spec.train_classes
    table, _ = train_concepts(g, config)
    reports, details = {}, {"world": world, "ic": ic}

    if "joint-hyper" in methods:
        cfg = config.replace(image_score_kind="hyper")
        model = train_joint(g, world.train, train_cls, cfg, table, ic)
        cal = calibrate_threshold(model, world.validation, vocab)
        primary = predict_zero_shot_batch(model, zs.features, vocab, cal.cutoff)
        reports["joint-hyper"] = aggregate(g, ic, primary, zs.labels)
        details.update(model=model, calibration=cal, joint_primary=primary)
    if {"softmax", "convex-combination"} & set(methods):
        base = softmax_baseline_train(world.train, train_cls, config)
        if "softmax" in methods:
            reports["softmax"] = aggregate(g, ic, base.predict(zs.features), zs.labels)
        if "convex-combination" in methods:
            pred = convex_combination_predict(base, table.vectors, zs.features, vocab)
            reports["convex-combination"] = aggregate(g, ic, pred, zs.labels)
    if "conditional-softmax" in methods:
        cs = conditional_softmax_train(g, world.train, train_cls, config)
        pred = conditional_softmax_predict_batch(g, cs, zs.features)
        reports["conditional-softmax"] = aggregate(g, ic, pred, zs.labels)
    return reports, details


def closed_set_comparison(seed: int, config: TrainConfig | None = None, num_classes: int = 10,
                          dim: int = 64, samples_per_class: int = 200, sigma_obs: float = 2.0):
    """Held-out accuracy of Joint-Cosine and the Softmax baseline on a flat-ish
    10-class world (two groups of five leaves)."""
    config = config or TrainConfig(seed=seed, epochs=30)
    if num_classes % 2:
        raise ValueError("num_classes must be even")
    g = build_graph(balanced_tree((2, num_classes // 2)))
    spec = SyntheticSpec(g, tuple(g.leaves), dim=dim, sigma_level=1.0, sigma_obs=sigma_obs,
                         samples_per_class=samples_per_class, seed=seed)
    world = generate_synthetic(spec)
    val = world.validation
    cfg = config.replace(image_score_kind="cosine")
    table, _ = train_concepts(g, cfg)
    model = train_joint(g, world.train, spec.train_classes, cfg, table)
    base = softmax_baseline_train(world.train, spec.train_classes, config)
    return {
        "joint-cosine": float((classify_closed_batch(model, val.features, spec.train_classes) == val.labels).mean()),
        "softmax": float((base.predict(val.features) == val.labels).mean()),
    }


def sample_classes_by_frequency(pool, counts, rng: np.random.Generator) -> list[int]:
    """Order ``pool`` by repeated inverse-CDF draws without replacement, each draw
    proportional to the class pixel count. Prefixes of the result are nested samples."""
    pool = list(pool)
    weights = np.array([float(counts[c]) for c in pool])
    out = []
    while pool:
        cdf = np.cumsum(weights)
        i = int(np.searchsorted(cdf, rng.uniform(0.0, cdf[-1]), side="right"))
        i = min(i, len(pool) - 1)
        out.append(pool.pop(i))
        weights = np.delete(weights, i)
    return out


def diversity_world(seed: int, branching=(4, 4, 5), test_classes: int = 16, dim: int = 64,
                    samples_per_class: int = 60, frequency_skew: float = 1.0) -> SyntheticSpec:
    graph = build_graph(balanced_tree(branching))
    leaves = graph.leaves
    rng = np.random.default_rng([seed, 91])
    held = sorted(int(c) for c in rng.choice(leaves, size=test_classes, replace=False))
    return SyntheticSpec(graph, tuple(leaves), dim=dim, sigma_level=(3.0, 2.0, 1.0), sigma_obs=0.6,
                         samples_per_class=samples_per_class, held_out=tuple(held), seed=seed,
                         frequency_skew=frequency_skew)


def diversity_test(train_counts, seed: int = 0, config: TrainConfig | None = None,
                   spec: SyntheticSpec | None = None):
    """Zero-shot metrics of Joint-Hyper (information-content weighted loss) as the
    number of training classes grows, on a fixed world and fixed test classes.

    Returns a list of dict rows, one per training-class count.
    """
    config = config or TrainConfig(seed=seed, epochs=60)
    config = config.replace(image_score_kind="hyper", ic_weighting=True)
    spec = spec or diversity_world(seed)
    world = generate_synthetic(spec)
    g = spec.graph
    ic = information_content(g, world.own_counts)
    pool = spec.train_classes
    if max(train_counts) > len(pool):
        raise ValueError(f"at most {len(pool)} training classes are available")
    counts = {c: world.own_counts[g.names[c]] for c in pool}
    ordering = sample_classes_by_frequency(pool, counts, np.random.default_rng([seed, 92]))
    table, _ = train_concepts(g, config)
    vocab = range(len(g))
    zs = world.zero_shot_test
    rows = []
    for n in train_counts:
        chosen = sorted(ordering[:n])
        keep = np.isin(world.train.labels, chosen)
        vkeep = np.isin(world.validation.labels, chosen)
        model = train_joint(g, world.train.subset(keep), chosen, config, table, ic)
        cal = calibrate_threshold(model, world.validation.subset(vkeep), vocab)
        rep = aggregate(g, ic, predict_zero_shot_batch(model, zs.features, vocab, cal.cutoff), zs.labels)
        log.info("diversity n=%d hf=%.4f", n, rep.hier_f)
        rows.append({
            "train_classes": n, "cutoff": cal.cutoff, "hier_precision": rep.hier_precision,
            "hier_recall": rep.hier_recall, "hier_f": rep.hier_f, "info_ratio": rep.info_ratio,
        })
    return rows
