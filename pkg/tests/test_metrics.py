import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovparse.metrics import (
    UndefinedMetricError,
    aggregate,
    flat_metrics,
    hierarchical_scores,
    info_content_ratio,
)
from ovparse.taxonomy import build_graph, build_taxonomy


def instrument_edges():
    # musical_instrument sits at depth 8, guitar and piano at depth 10
    chain = ["entity"] + [f"level{i}" for i in range(2, 8)] + ["musical_instrument"]
    edges = [(chain[i], chain[i - 1]) for i in range(1, len(chain))]
    edges += [("stringed", "musical_instrument"), ("keyboard", "musical_instrument"),
              ("guitar", "stringed"), ("piano", "keyboard")]
    return edges


def instrument_graph():
    return build_graph(instrument_edges())


def confusion_oracle(pred, gt, k, ignore=None):
    conf = np.zeros((k, k))
    gt_tot = np.zeros(k)
    for p, g in zip(pred, gt):
        if ignore is not None and g == ignore:
            continue
        gt_tot[g] += 1
        if 0 <= p < k:
            conf[g, p] += 1
    return conf, gt_tot


def flat_oracle(pred, gt, k, ignore=None):
    conf, gt_tot = confusion_oracle(pred, gt, k, ignore)
    total = gt_tot.sum()
    correct = sum(conf[i, i] for i in range(k))
    accs, ious, wiou = [], [], 0.0
    for c in range(k):
        pred_c = sum(conf[g, c] for g in range(k))
        union = gt_tot[c] + pred_c - conf[c, c]
        if gt_tot[c] > 0:
            accs.append(conf[c, c] / gt_tot[c])
            wiou += gt_tot[c] / total * conf[c, c] / union
        if union > 0:
            ious.append(conf[c, c] / union)
    return correct / total, sum(accs) / len(accs), sum(ious) / len(ious), wiou


def test_paper_worked_example():
    g = instrument_graph()
    i = g.id_of
    assert g.depth[i("guitar")] == 10 and g.depth[i("musical_instrument")] == 8
    assert hierarchical_scores(g, i("guitar"), i("piano"))[2] == pytest.approx(0.8, abs=1e-12)
    hp, hr, hf = hierarchical_scores(g, i("guitar"), i("musical_instrument"))
    assert hf == pytest.approx(2 * 8 / 18, abs=1e-12)
    assert hp == 1.0 and hr == pytest.approx(0.8)
    assert hierarchical_scores(g, i("piano"), i("piano")) == (1.0, 1.0, 1.0)


def test_flat_hand_example():
    m = flat_metrics(np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]), 2)
    assert m.pixel_accuracy == 0.75
    assert m.class_iou.tolist() == [0.5, 2 / 3]
    assert m.mean_iou == pytest.approx(7 / 12)
    same = flat_metrics(np.array([[0, 1], [2, 2]]), np.array([[0, 1], [2, 2]]), 3)
    assert (same.pixel_accuracy, same.mean_accuracy, same.mean_iou, same.weighted_iou) == (1.0, 1.0, 1.0, 1.0)


def test_flat_errors():
    with pytest.raises(UndefinedMetricError):
        flat_metrics(np.array([0, 1]), np.array([255, 255]), 2)
    with pytest.raises(ValueError, match="shape"):
        flat_metrics(np.array([0, 1]), np.array([0, 1, 1]), 2)
    with pytest.raises(ValueError, match="outside"):
        flat_metrics(np.array([0]), np.array([5]), 2)


def test_out_of_range_prediction_is_a_miss():
    m = flat_metrics(np.array([0, 9]), np.array([0, 1]), 2)
    assert m.pixel_accuracy == 0.5 and m.class_accuracy[1] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flat_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 7))
    gt = rng.integers(0, k, size=(6, 7))
    pred = rng.integers(0, k, size=(6, 7))
    gt[rng.random(gt.shape) < 0.1] = 255
    if np.all(gt == 255):
        gt[0, 0] = 0
    got = flat_metrics(pred, gt, k)
    want = flat_oracle(pred.ravel(), gt.ravel(), k, 255)
    np.testing.assert_allclose(
        [got.pixel_accuracy, got.mean_accuracy, got.mean_iou, got.weighted_iou], want, atol=1e-12)


def test_info_ratio_examples():
    g, ic = build_taxonomy([("animal", "entity"), ("dog", "animal"), ("cat", "animal"), ("rock", "entity")],
                           {"dog": 1, "cat": 1, "rock": 2})
    i = g.id_of
    assert info_content_ratio(g, ic, i("dog"), i("dog")) == 1.0
    assert info_content_ratio(g, ic, i("dog"), i("cat")) == pytest.approx(
        2 * math.log(0.5) / (math.log(0.25) * 2))
    assert info_content_ratio(g, ic, i("dog"), i("animal")) == pytest.approx(2 / 3)
    assert info_content_ratio(g, ic, i("dog"), i("rock")) == 0.0
    g1, ic1 = build_taxonomy([("a", "entity")], {"a": 1})
    with pytest.raises(UndefinedMetricError):
        info_content_ratio(g1, ic1, 0, 1)


def test_aggregate_examples():
    g = instrument_graph()
    i = g.id_of
    one = aggregate(g, None, [i("piano")], [i("guitar")])
    assert one.hier_f == pytest.approx(0.8) and one.count == 1
    # x and y sit at depth 5 under a depth-3 lca: HF 0.6
    extra = [("x1", "level3"), ("x", "x1"), ("y1", "level3"), ("y", "y1")]
    g2 = build_graph(instrument_edges() + extra)
    j = g2.id_of
    rep = aggregate(g2, None, [j("piano"), j("y")], [j("guitar"), j("x")])
    assert rep.hier_f == pytest.approx(0.7, abs=1e-12)
    rep = aggregate(g, None, [i("piano"), i("guitar")], [i("guitar"), i("guitar")])
    assert rep.hier_f == pytest.approx(0.9)
    with pytest.raises(UndefinedMetricError):
        aggregate(g, None, [], [])


def test_aggregate_matches_brute_force():
    edges = [("animal", "entity"), ("dog", "animal"), ("cat", "animal"), ("puppy", "dog"),
             ("furniture", "entity"), ("chair", "furniture"), ("table", "furniture")]
    counts = {"puppy": 5, "dog": 3, "cat": 4, "chair": 6, "table": 2}
    g, ic = build_taxonomy(edges, counts)
    rng = np.random.default_rng(3)
    labels = rng.choice([g.id_of(n) for n in counts], size=1000)
    preds = rng.integers(0, len(g), size=1000)
    w = rng.uniform(0.5, 3.0, size=1000)
    rep = aggregate(g, ic, preds, labels, weights=w)
    sums = np.zeros(4)
    for l, p, wt in zip(labels, preds, w):
        sums += wt * np.array(list(hierarchical_scores(g, l, p)) + [info_content_ratio(g, ic, l, p)])
    np.testing.assert_allclose([rep.hier_precision, rep.hier_recall, rep.hier_f, rep.info_ratio],
                               sums / w.sum(), atol=1e-12)
    cls = aggregate(g, ic, preds, labels, mode="class")
    per = [np.mean([hierarchical_scores(g, l, p)[2] for l, p in zip(labels, preds) if l == c])
           for c in np.unique(labels)]
    assert cls.hier_f == pytest.approx(np.mean(per), abs=1e-12)


def test_report_csv_layout():
    g, ic = build_taxonomy([("a", "entity"), ("b", "entity")], {"a": 1, "b": 1})
    rep = aggregate(g, ic, [1, 2], [1, 2])
    text = rep.to_csv()
    head, tail = text.split("\n\n")
    assert head.splitlines()[0] == "metric,value"
    assert "hier_f,1" in head
    assert tail.splitlines() == ["class,acc,iou", "a,1,1", "b,1,1"]
    assert "hier_f" in rep.to_table()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hierarchical_bounds(seed):
    rng = np.random.default_rng(seed)
    n = 12
    edges = [(f"v{i}", "entity" if i == 1 else f"v{int(rng.integers(1, i))}") for i in range(1, n)]
    g = build_graph(edges)
    for _ in range(20):
        l, p = rng.integers(0, len(g), 2)
        hp, hr, hf = hierarchical_scores(g, l, p)
        assert 0 < hp <= 1 and 0 < hr <= 1 and 0 < hf <= 1
        assert hf == pytest.approx(2 * hp * hr / (hp + hr))
        if g.is_ancestor(p, l):
            assert hp == 1.0
