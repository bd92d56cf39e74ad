"""Central finite differences and the non-kink point samplers used by the
gradient tests."""

import numpy as np

from ovparse.embedding import (
    HYPER,
    PixelEmbedder,
    concept_loss,
    image_loss_margin,
    image_loss_softmax,
)

STEP = 1e-4
KINK_GAP = 1e-2  # keep every hinge / ReLU argument this far from its kink


def numeric_grad(f, x, h=STEP):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8))


def _away_from_zero(rng, shape, gap=KINK_GAP, scale=1.0):
    x = rng.normal(0.0, scale, size=shape)
    return np.where(x < 0, -1.0, 1.0) * (gap + np.abs(x))


def concept_loss_case(rng, n=6):
    """fu, fv with every coordinate difference away from 0 and the negative
    hinge away from its corner."""
    positive = bool(rng.integers(2))
    while True:
        fv = rng.uniform(0.0, 2.0, n)
        fu = fv + _away_from_zero(rng, n, scale=0.7)
        s = -np.sum(np.maximum(fu - fv, 0.0) ** 2)
        if positive or abs(1.0 + s) > KINK_GAP:
            return fu, fv, positive


def check_concept_loss(rng):
    fu, fv, positive = concept_loss_case(rng)
    _, dfu, dfv = concept_loss(fu, fv, positive)
    nu = numeric_grad(lambda x: concept_loss(x, fv, positive)[0], fu)
    nv = numeric_grad(lambda x: concept_loss(fu, x, positive)[0], fv)
    return max(rel_error(dfu, nu), rel_error(dfv, nv))


def _image_case(rng, n=5, k=3):
    pixel = rng.uniform(0.0, 3.0, n)
    true = pixel + _away_from_zero(rng, n)
    negs = pixel + _away_from_zero(rng, (k, n))
    return pixel, true, negs


def check_image_softmax(rng, kind=HYPER):
    pixel, true, negs = _image_case(rng)
    _, g = image_loss_softmax(pixel, true, negs, kind)
    f = lambda p, t, ns: image_loss_softmax(p, t, ns, kind)[0]  # noqa: E731
    return max(
        rel_error(g["pixel"], numeric_grad(lambda x: f(x, true, negs), pixel)),
        rel_error(g["true"], numeric_grad(lambda x: f(pixel, x, negs), true)),
        rel_error(g["negatives"], numeric_grad(lambda x: f(pixel, true, x), negs)),
    )


def check_image_margin(rng, kind=HYPER, beta=1.0):
    from ovparse.embedding import score_matrix

    while True:
        pixel, true, negs = _image_case(rng)
        s = score_matrix(np.vstack([true, negs]), pixel[None], kind)[0]
        if np.all(np.abs(beta - s[0] + s[1:]) > KINK_GAP):
            break
    _, g = image_loss_margin(pixel, true, negs, beta, kind)
    f = lambda p, t, ns: image_loss_margin(p, t, ns, beta, kind)[0]  # noqa: E731
    return max(
        rel_error(g["pixel"], numeric_grad(lambda x: f(x, true, negs), pixel)),
        rel_error(g["true"], numeric_grad(lambda x: f(pixel, x, negs), true)),
        rel_error(g["negatives"], numeric_grad(lambda x: f(pixel, true, x), negs)),
    )


def check_embedder(rng, d=6, n=5):
    """Gradient of a random linear readout of the embedding, wrt W and the feature."""
    while True:
        w = rng.normal(size=(d, n))
        x = rng.normal(size=d)
        z = x @ w
        # a single active unit gives a constant output, so ask for two
        if np.all(np.abs(z) > KINK_GAP) and (z > 0).sum() >= 2:
            break
    c = rng.normal(size=n)
    emb = PixelEmbedder(w)
    out, cache = emb.forward(x[None])
    dw, dx = emb.backward(cache, c[None])
    f_w = lambda m: float(c @ PixelEmbedder(m).forward(x[None])[0][0])  # noqa: E731
    f_x = lambda v: float(c @ emb.forward(v[None])[0][0])  # noqa: E731
    return max(rel_error(dw, numeric_grad(f_w, w)), rel_error(dx[0], numeric_grad(f_x, x)))
