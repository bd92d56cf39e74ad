import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import check_concept_loss, check_embedder, check_image_margin, check_image_softmax
from ovparse.embedding import (
    COSINE,
    HYPER,
    L2,
    DegenerateEmbeddingError,
    EmbeddingFormatError,
    EmbeddingTable,
    PixelEmbedder,
    ScoreKind,
    concept_loss,
    concept_loss_batch,
    embed_feature,
    image_loss_margin,
    image_loss_softmax,
    read_embedder,
    read_embedding_tsv,
    score,
    score_matrix,
    write_embedder,
    write_embedding_tsv,
)

vec = arrays(np.float64, 4, elements=st.floats(0, 10, allow_nan=False))


def test_score_examples():
    assert score([0, 0], [3, 1], HYPER) == 0.0
    assert score([2, 1], [1, 2], HYPER) == -1.0
    assert score([1, 2], [2, 1], HYPER) == -1.0
    assert score([2, 1], [2, 1], L2) == 0.0
    assert score([2, 1], [2, 1], COSINE) == pytest.approx(1.0)
    assert score([3, 0], [1, 1], HYPER) == -4.0
    assert score([3, 0], [1, 1], ScoreKind("hyper", p=1)) == -2.0


def test_hyper_asymmetric():
    x, y = np.array([2.0, 1.0]), np.array([1.0, 3.0])
    assert score(x, y, HYPER) == -1.0
    assert score(y, x, HYPER) == -4.0
    assert score([0, 0], [1, 1], HYPER) == 0.0 and score([1, 1], [0, 0], HYPER) == -2.0


def test_score_kind_parse():
    assert ScoreKind.parse("l2") == L2
    assert ScoreKind.parse("Cosine") == COSINE
    assert ScoreKind.parse("dot").raw_dot
    assert str(ScoreKind.parse("hyper")) == "hyper"
    with pytest.raises(ValueError):
        ScoreKind.parse("manhattan")


def test_score_errors():
    with pytest.raises(ValueError, match="dimension"):
        score([1, 2], [1, 2, 3])
    with pytest.raises(ValueError, match="zero"):
        score([0, 0], [1, 1], COSINE)


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_score_properties(x, y):
    assert score(x, y, HYPER) <= 0.0
    assert score(x, y, L2) <= 0.0
    if np.all(x <= y):
        assert score(x, y, HYPER) == 0.0
    assert score(x, y, L2) == pytest.approx(score(y, x, L2), abs=1e-9)
    if np.linalg.norm(x) > 0 and np.linalg.norm(y) > 0:
        assert -1 - 1e-12 <= score(x, y, COSINE) <= 1 + 1e-12


def test_score_matrix_matches_pairwise(rng):
    c = rng.uniform(0, 2, (5, 3))
    p = rng.uniform(0, 2, (4, 3))
    for kind in (HYPER, L2, COSINE, ScoreKind("lp", p=3.0), ScoreKind("hyper", p=1.5)):
        m = score_matrix(c, p, kind)
        assert m.shape == (4, 5)
        for b in range(4):
            for k in range(5):
                assert m[b, k] == pytest.approx(score(c[k], p[b], kind), abs=1e-12)


def test_concept_loss_examples():
    assert concept_loss([0, 0], [1, 1], True)[0] == 0.0
    assert concept_loss([2, 0], [1, 1], True)[0] == 1.0
    # S_hyper = -3: margin satisfied
    loss, du, dv = concept_loss([2, 1.0 + math.sqrt(2)], [1, 0], False, alpha=1.0)
    assert loss == 0.0 and not du.any() and not dv.any()
    assert concept_loss([1.5, 0], [1, 0], False, alpha=1.0)[0] == pytest.approx(0.75)


def test_concept_loss_batch_is_mean(rng):
    F = rng.uniform(0, 1, (6, 4))
    pos = np.array([[0, 1], [1, 2], [0, 3]])
    neg = np.array([[2, 1], [5, 4]])
    loss, grad = concept_loss_batch(F, pos, neg)
    parts = [concept_loss(F[u], F[v], True) for u, v in pos] + [concept_loss(F[u], F[v], False) for u, v in neg]
    assert loss == pytest.approx(np.mean([p[0] for p in parts]))
    expect = np.zeros_like(F)
    for (u, v), (_, du, dv) in zip(np.vstack([pos, neg]), parts):
        expect[u] += du / 5
        expect[v] += dv / 5
    np.testing.assert_allclose(grad, expect, atol=1e-14)


def test_softmax_examples():
    assert image_loss_softmax([1.0, 1.0], [0.0, 0.0], [[0.0, 0.0]])[0] == pytest.approx(math.log(2))
    gap20 = image_loss_softmax([0.0], [0.0], [[math.sqrt(20.0)]])[0]
    assert 0 < gap20 < 1e-3
    loss = image_loss_softmax([0.0], [0.0], [[1.0], [math.sqrt(2.0)]])[0]
    assert loss == pytest.approx(-math.log(1 / (1 + math.exp(-1) + math.exp(-2))))


def test_margin_examples():
    assert image_loss_margin([0.0], [0.0], [[math.sqrt(5.0)]], beta=1.0)[0] == 0.0
    assert image_loss_margin([0.0], [0.0], [[0.0], [0.0]], beta=1.0)[0] == 2.0
    # true -1, negatives -1.5: each violates the margin by 0.5
    loss = image_loss_margin([0.0], [1.0], [[math.sqrt(1.5)], [math.sqrt(1.5)]], beta=1.0)[0]
    assert loss == pytest.approx(1.0)


def test_image_loss_needs_negatives():
    with pytest.raises(ValueError, match="negative"):
        image_loss_softmax([1.0], [1.0], [])
    with pytest.raises(ValueError):
        image_loss_margin([1.0], [1.0], [])


@pytest.mark.parametrize("check", [check_concept_loss, check_image_softmax, check_image_margin, check_embedder])
def test_gradients_small(check):
    rng = np.random.default_rng(7)
    assert max(check(rng) for _ in range(20)) <= 1e-4


@pytest.mark.parametrize("kind", [L2, COSINE, ScoreKind("lp", p=3.0), ScoreKind("cosine", raw_dot=True)])
def test_image_gradients_other_kinds(kind):
    rng = np.random.default_rng(8)
    assert max(check_image_softmax(rng, kind) for _ in range(10)) <= 1e-4


def test_embedder_rescale_identity():
    x = np.abs(np.random.default_rng(0).normal(size=5))
    x /= np.linalg.norm(x)
    out = embed_feature(PixelEmbedder(np.eye(5)), x)
    np.testing.assert_allclose(out, 30.0 * x, rtol=1e-12)


def test_embedder_degenerate():
    with pytest.raises(DegenerateEmbeddingError):
        embed_feature(PixelEmbedder(np.eye(3)), np.array([-1.0, -2.0, -0.5]))
    out, cache = PixelEmbedder(np.eye(2)).forward([[-1.0, -1.0], [1.0, 0.0]])
    assert cache["valid"].tolist() == [False, True]
    assert not out[0].any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_embedder_norm(seed):
    rng = np.random.default_rng(seed)
    emb = PixelEmbedder.initialize(8, 12, rng)
    x = rng.normal(size=(5, 8))
    out, cache = emb.forward(x)
    norms = np.linalg.norm(out[cache["valid"]], axis=1)
    assert np.all(np.abs(norms - 30.0) <= 1e-9)
    assert np.all(out >= 0)


def test_embedding_table_init(rng):
    t = EmbeddingTable.initialize(5, 4, rng)
    assert not t.vectors[0].any() and np.all(t.vectors >= 0) and t.dim == 4


def test_embedding_io(tmp_path, rng):
    names = ["entity", "a", "b"]
    t = EmbeddingTable.initialize(3, 4, rng)
    write_embedding_tsv(names, t, tmp_path / "e.tsv")
    back = read_embedding_tsv(tmp_path / "e.tsv", ["entity", "a", "b"])
    assert np.array_equal(back.vectors, t.vectors)
    with pytest.raises(EmbeddingFormatError, match="no embedding"):
        read_embedding_tsv(tmp_path / "e.tsv", names + ["c"])
    emb = PixelEmbedder.initialize(3, 4, rng)
    write_embedder(emb, tmp_path / "w.ovsw")
    back = read_embedder(tmp_path / "w.ovsw")
    np.testing.assert_array_equal(back.weights, emb.weights.astype(np.float32))
    (tmp_path / "bad.ovsw").write_bytes(b"OVSW")
    with pytest.raises(EmbeddingFormatError):
        read_embedder(tmp_path / "bad.ovsw")
