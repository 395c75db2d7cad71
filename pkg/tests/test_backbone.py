import numpy as np
import pytest

from egoflow import tensor as T
from egoflow.backbone import (build_pyramid, encode, extract, hybrid_features, level_sizes, lfa_unit,
                              masks_from_logits, relative_encoding)
from egoflow.config import profile
from egoflow.layers import ParamStore


def cloud(n, seed=0):
    return np.random.default_rng(seed).uniform(-5, 5, size=(n, 3))


def test_level_sizes():
    assert level_sizes(8192) == [8192, 2048, 512, 128]
    assert level_sizes(1024) == [1024, 256, 64, 16]
    assert level_sizes(64) == [64, 16, 8, 8]


def test_pyramid_structure():
    pts = cloud(256)
    pyr = build_pyramid(pts)
    assert pyr.sizes == [256, 64, 16, 8]
    for k in range(4):
        np.testing.assert_array_equal(pyr.points[k], pts[pyr.index[k]])
        nbr = pyr.knn[k]
        assert nbr.min() >= 0 and nbr.max() < pyr.sizes[k]
        d = np.linalg.norm(pyr.points[k][nbr] - pyr.points[k][:, None], axis=-1)
        assert np.all(np.diff(d, axis=1) >= 0)
    for k in range(3):
        # each coarser level is a subset of the finer one
        assert set(pyr.index[k + 1]) <= set(pyr.index[k])
        np.testing.assert_array_equal(pyr.index[k + 1], pyr.index[k][pyr.sub[k]])
        assert pyr.down[k].shape == (pyr.sizes[k + 1], 16)
        assert pyr.up[k].shape == (pyr.sizes[k],)


def test_pyramid_deterministic():
    a, b = build_pyramid(cloud(128, 3)), build_pyramid(cloud(128, 3))
    for k in range(4):
        np.testing.assert_array_equal(a.index[k], b.index[k])
        np.testing.assert_array_equal(a.knn[k], b.knn[k])


def test_pyramid_too_small():
    with pytest.raises(ValueError):
        build_pyramid(cloud(63))


def test_lfa_permutation_equivariance(float64):
    pts = cloud(12, 1)
    feats = np.random.default_rng(2).normal(size=(12, 4))
    from egoflow.geometry import knn
    nbr = knn(pts, pts, 5)
    store = ParamStore(3)
    out = lfa_unit(store, "u", pts, T.as_value(feats), nbr, 6).data
    perm = np.random.default_rng(4).permutation(12)
    inv = np.argsort(perm)
    out_p = lfa_unit(store, "u", pts[perm], T.as_value(feats[perm]), inv[nbr[perm]], 6).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_lfa_self_neighbor_reduces_to_mlp(float64):
    from egoflow.layers import dense
    pts = cloud(8, 5)
    feats = T.as_value(np.random.default_rng(6).normal(size=(8, 4)))
    nbr = np.arange(8)[:, None]
    store = ParamStore(1)
    out = lfa_unit(store, "u", pts, feats, nbr, 5).data
    rel = relative_encoding(pts, nbr)
    np.testing.assert_array_equal(rel[:, 0, :4], 0.0)  # zero offset and distance
    pos = dense(store, "u.pos", T.as_value(rel), 4)
    x = T.concat([pos, T.reshape(feats, (8, 1, 4))], axis=-1)
    want = dense(store, "u.out", T.reshape(x, (8, 8)), 5).data
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_encoder_channel_plan():
    cfg = profile("desk")
    pyr = build_pyramid(cloud(128))
    store = ParamStore(0)
    feats = encode(store, "enc", pyr, cfg.model.channels)
    assert [f.shape for f in feats] == [(n, c) for n, c in zip(pyr.sizes, cfg.model.channels)]


def test_encoder_permutation_equivariance(float64):
    pts = cloud(96, 9)
    pyr = build_pyramid(pts)
    store = ParamStore(0)
    a = encode(store, "enc", pyr, (4, 6, 8, 8))
    perm = np.random.default_rng(1).permutation(96)
    pyr2 = build_pyramid(pts[perm])
    b = encode(store, "enc", pyr2, (4, 6, 8, 8))
    # coarser levels depend on the FPS start point; level 0 does not
    np.testing.assert_allclose(b[0].data, a[0].data[perm], atol=1e-9)


def test_masks_from_logits():
    pyr = build_pyramid(cloud(128))
    m = masks_from_logits(T.as_value(np.zeros(128)), pyr)
    np.testing.assert_array_equal(m.probs, 0.5)
    np.testing.assert_array_equal(m.fg, 1.0)
    m = masks_from_logits(T.as_value(np.full(128, 10.0)), pyr)
    assert all(not b.any() for b in m.bg_levels)
    z = np.random.default_rng(0).normal(size=128)
    m = masks_from_logits(T.as_value(z), pyr)
    for k in range(4):
        np.testing.assert_array_equal(m.fg_levels[k], m.fg[pyr.index[k]])
        np.testing.assert_array_equal(m.fg_levels[k] + m.bg_levels[k], 1.0)
    assert np.all((m.probs > 0) & (m.probs < 1))


def test_hybrid_features_selection(float64):
    rng = np.random.default_rng(0)
    enc = [T.as_value(rng.normal(size=(6, 3)))]
    ctx = [T.as_value(rng.normal(size=(6, 3)))]
    np.testing.assert_array_equal(hybrid_features(enc, ctx, [np.ones(6)])[0].data, ctx[0].data)
    np.testing.assert_array_equal(hybrid_features(enc, ctx, [np.zeros(6)])[0].data, enc[0].data)
    m = np.array([1, 0, 0, 1, 1, 0], dtype=float)
    out = hybrid_features(enc, ctx, [m])[0].data
    for i in range(6):
        np.testing.assert_array_equal(out[i], ctx[0].data[i] if m[i] else enc[0].data[i])


def test_hybrid_features_zero_mask_blocks_encoder_gradient(float64):
    e = T.Value(np.ones((4, 2)), requires_grad=True)
    c = T.Value(np.ones((4, 2)), requires_grad=True)
    T.backward(T.sum_(hybrid_features([e], [c], [np.zeros(4)], True)[0]))
    assert e.grad is None or not np.any(e.grad)


def _hf_encoder_grad(use_stop_grad):
    prev = T.default_dtype()
    T.set_default_dtype(np.float64)
    try:
        cfg = profile("desk").model
        cfg.stop_gradient = use_stop_grad
        pyr = build_pyramid(cloud(128, 11))
        store = ParamStore(42)
        fg = (pyr.points[0][:, 0] > 1.0).astype(float)
        ff = extract(store, pyr, cfg, fg_override=fg)
        rng = np.random.default_rng(0)
        loss = None
        for h in ff.hybrid:
            term = T.sum_(T.mul(h, rng.normal(size=h.shape)))
            loss = term if loss is None else T.add(loss, term)
        T.backward(loss)
        enc = [p for n, p in store.params.items() if n.startswith("backbone.encoder")]
        assert enc
        return sum(float(np.abs(p.grad).sum()) for p in enc if p.grad is not None)
    finally:
        T.set_default_dtype(prev)


def test_stop_gradient_through_hybrid_features():
    assert _hf_encoder_grad(True) == 0.0
    assert _hf_encoder_grad(False) > 0.0
