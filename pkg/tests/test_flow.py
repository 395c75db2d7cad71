import numpy as np
import pytest

from egoflow import tensor as T
from egoflow.config import TABLE3_TOGGLES, profile
from egoflow.flow import (CostVolumeOut, cost_volume, dual_attention_refine, ego_branch, flow_feature_update,
                          flow_predictor, forward, hybrid_warp, kabsch_value, merge_final_flow)
from egoflow.geometry import RigidTransform, apply_transform, rot_z
from egoflow.layers import ParamStore
from egoflow.metrics import ego_metrics


def cloud(n, seed=0, scale=5.0):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, 3))


# -- cost volume -------------------------------------------------------------

def test_cost_volume_weights_and_convex_hull(float64):
    rng = np.random.default_rng(0)
    p, q = cloud(40, 1), cloud(50, 2)
    hp, hq = T.as_value(rng.normal(size=(40, 6))), T.as_value(rng.normal(size=(50, 6)))
    cv = cost_volume(ParamStore(0), "cv", p, q, hp, hq, "euclidean", 1, 16, 8)
    w = cv.weights.data
    assert w.shape == (40, 16)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)
    assert np.all(w > 0)
    # convex combination of exactly the neighbor positions
    np.testing.assert_allclose(cv.matched.data, np.einsum("nk,nkd->nd", w, q[cv.neighbors]), atol=1e-12)
    lo, hi = q[cv.neighbors].min(1), q[cv.neighbors].max(1)
    assert np.all(cv.matched.data >= lo - 1e-12) and np.all(cv.matched.data <= hi + 1e-12)
    assert cv.features.shape == (40, 9)


def test_cost_volume_self_match(float64):
    p = cloud(30, 3)
    h = T.as_value(np.random.default_rng(1).normal(size=(30, 4)))
    cv = cost_volume(ParamStore(0), "cv", p, p, h, h, "euclidean", 0, 16, 8)
    np.testing.assert_array_equal(cv.neighbors[:, 0], np.arange(30))
    one = cost_volume(ParamStore(0), "cv", p, p, h, h, "euclidean", 0, 1, 8)
    np.testing.assert_array_equal(one.matched.data, p)


def test_cost_volume_feature_space_clusters(float64):
    rng = np.random.default_rng(5)
    # P: cluster A near the origin, cluster B at x=10; Q swaps their places
    pa, pb = rng.normal(scale=0.3, size=(20, 3)), rng.normal(scale=0.3, size=(20, 3)) + [10, 0, 0]
    qa, qb = pa + [10, 0, 0], pb - [10, 0, 0]
    fa, fb = np.zeros(8), np.zeros(8)
    fa[0], fb[1] = 5.0, 5.0
    feat = lambda base, n: base + 0.01 * rng.normal(size=(n, 8))  # noqa: E731
    hp = T.as_value(np.vstack([feat(fa, 20), feat(fb, 20)]))
    hq = T.as_value(np.vstack([feat(fa, 20), feat(fb, 20)]))
    cv = cost_volume(ParamStore(0), "cv", np.vstack([pa, pb]), np.vstack([qa, qb]), hp, hq,
                     "feature_space", 3, 16, 8)
    assert np.all(cv.neighbors[:20] < 20)
    assert np.all(cv.neighbors[20:] >= 20)


def test_cost_volume_mode_level_mismatch(float64):
    p = cloud(20)
    h = T.as_value(np.zeros((20, 4)))
    with pytest.raises(ValueError):
        cost_volume(ParamStore(0), "cv", p, p, h, h, "feature_space", 1)
    with pytest.raises(ValueError):
        cost_volume(ParamStore(0), "cv", p, p, h, h, "euclidean", 3)


# -- hybrid warp / merge -----------------------------------------------------

def test_hybrid_warp_examples(float64):
    p = cloud(6)
    zero = np.zeros((6, 3))
    np.testing.assert_array_equal(hybrid_warp(p, zero, np.eye(3), np.zeros(3), np.zeros(6)).data, p)
    np.testing.assert_array_equal(hybrid_warp(p, zero, rot_z(30), np.ones(3), np.ones(6)).data, p)
    fg = np.array([1, 0, 1, 0, 0, 1], dtype=float)
    out = hybrid_warp(p, np.tile([1.0, 0, 0], (6, 1)), np.eye(3), np.array([0, 1.0, 0]), fg).data
    for i in range(6):
        np.testing.assert_array_equal(out[i], p[i] + ([1, 0, 0] if fg[i] else [0, 1, 0]))


def test_hybrid_warp_is_selection(float64):
    rng = np.random.default_rng(2)
    p, s = cloud(20, 4), rng.normal(size=(20, 3))
    R, t = rot_z(17.0), rng.normal(size=3)
    fg = rng.integers(0, 2, 20).astype(float)
    out = hybrid_warp(p, s, R, t, fg).data
    rigid = apply_transform(RigidTransform(R, t), p)
    for i in range(20):
        np.testing.assert_allclose(out[i], p[i] + s[i] if fg[i] else rigid[i], atol=1e-12)


def test_hybrid_warp_disabled_uses_flow(float64):
    p, s = cloud(5), np.ones((5, 3))
    np.testing.assert_array_equal(hybrid_warp(p, s, rot_z(40), np.ones(3), np.zeros(5), False).data, p + s)


def test_merge_final_flow(float64):
    rng = np.random.default_rng(3)
    p, s0 = cloud(10, 6), rng.normal(size=(10, 3))
    np.testing.assert_array_equal(merge_final_flow(s0, rot_z(9), np.ones(3), p, np.ones(10)).data, s0)
    t = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(merge_final_flow(s0, np.eye(3), t, p, np.zeros(10)).data, np.tile(t, (10, 1)),
                               atol=1e-12)
    fg = rng.integers(0, 2, 10).astype(float)
    R = rot_z(-12.0)
    out = merge_final_flow(s0, R, t, p, fg).data
    rigid = p @ R.T + t - p
    for i in range(10):
        np.testing.assert_allclose(out[i], s0[i] if fg[i] else rigid[i], atol=1e-12)


# -- ego branch --------------------------------------------------------------

def _cv(points, matched, feats):
    n = len(points)
    return CostVolumeOut(T.as_value(feats), T.as_value(np.ones((n, 1))), np.zeros((n, 1), dtype=int),
                         T.as_value(matched))


def test_ego_branch_recovers_rigid_motion(float64):
    p = cloud(64, 8)
    gt = RigidTransform(rot_z(4.0), np.array([0.8, -0.2, 0.05]))
    cfg = profile("desk").model
    feats = np.random.default_rng(0).normal(size=(64, 10))
    e = ego_branch(ParamStore(0), "ego", _cv(p, apply_transform(gt, p), feats), p, np.ones(64), cfg)
    m = ego_metrics(e.R.data, e.t.data, gt.R, gt.t)
    assert m["RAE"] < 1e-5 and m["RTE"] < 1e-5
    assert np.all((e.confidence.data > 0) & (e.confidence.data < 1))


def test_kabsch_value_weight_scale_invariance(float64):
    rng = np.random.default_rng(1)
    p = cloud(30, 9)
    q = p @ rot_z(10).T + rng.normal(scale=0.05, size=(30, 3))
    w = rng.uniform(0.1, 1, 30)
    R1, t1, _ = kabsch_value(p, q, w)
    R2, t2, _ = kabsch_value(p, q, 2 * w)
    np.testing.assert_allclose(R1.data, R2.data, atol=1e-12)
    np.testing.assert_allclose(t1.data, t2.data, atol=1e-12)


def test_ego_branch_mask_reduces_error_with_mover(float64):
    p = cloud(80, 10)
    gt = RigidTransform(rot_z(3.0), np.array([1.0, 0.0, 0.0]))
    matched = apply_transform(gt, p)
    fg = np.zeros(80)
    fg[:20] = 1
    matched[:20] += [2.0, 1.5, 0.0]  # an independently moving object
    feats = np.random.default_rng(4).normal(size=(80, 10))
    cfg = profile("desk").model
    store = ParamStore(0)
    masked = ego_branch(store, "ego", _cv(p, matched, feats), p, 1 - fg, cfg)
    cfg.mask_in_ego = False
    plain = ego_branch(store, "ego", _cv(p, matched, feats), p, 1 - fg, cfg)
    a = ego_metrics(masked.R.data, masked.t.data, gt.R, gt.t)
    b = ego_metrics(plain.R.data, plain.t.data, gt.R, gt.t)
    assert a["RAE"] < b["RAE"]
    assert a["RTE"] < b["RTE"]


def test_ego_branch_all_fg_falls_back(float64):
    p = cloud(20, 11)
    e = ego_branch(ParamStore(0), "ego", _cv(p, p + 1.0, np.ones((20, 4))), p, np.zeros(20), profile("desk").model)
    assert e.degenerate
    np.testing.assert_allclose(e.t.data, [1.0, 1.0, 1.0], atol=1e-9)


# -- flow branch -------------------------------------------------------------

def test_feature_update_identical_rows(float64):
    out = flow_feature_update(ParamStore(0), "u", T.as_value(np.tile([1.0, -2.0, 0.5], (10, 1))), 16, 8).data
    np.testing.assert_allclose(out, np.tile(out[0], (10, 1)), atol=1e-12)


def test_feature_update_single_point(float64):
    out = flow_feature_update(ParamStore(0), "u", T.as_value(np.array([[1.0, 2.0]])), 16, 4)
    assert out.shape == (1, 4)


def test_dual_attention_neighbor_order_invariance(float64):
    from egoflow.geometry import knn
    p = cloud(24, 12)
    x = T.as_value(np.random.default_rng(2).normal(size=(24, 10)))
    nbr = knn(p, p, 6)
    store = ParamStore(0)
    a = dual_attention_refine(store, "r", x, nbr, 8).data
    shuffled = np.random.default_rng(3).permuted(nbr, axis=1)
    b = dual_attention_refine(store, "r", x, shuffled, 8).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_flow_predictor_zero_weights(float64):
    store = ParamStore(0)
    x = T.as_value(np.random.default_rng(0).normal(size=(12, 8)))
    flow_predictor(store, "f", x, (8, 4, 3))
    for prm in store.params.values():
        if prm.name.endswith((".w", ".b")):
            prm.value.data[...] = 0
    np.testing.assert_array_equal(flow_predictor(store, "f", x, (8, 4, 3)).data, 0.0)


def test_flow_predictor_pointwise(float64):
    store = ParamStore(0)
    x = np.random.default_rng(0).normal(size=(12, 8))
    perm = np.random.default_rng(1).permutation(12)
    a = flow_predictor(store, "f", T.as_value(x), (8, 4, 3)).data
    b = flow_predictor(store, "f", T.as_value(x[perm]), (8, 4, 3)).data
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


# -- full forward ------------------------------------------------------------

def _forward(cfg, seed=0):
    p = cloud(128, 20)
    q = p @ rot_z(2.0).T + [0.3, 0, 0]
    store = ParamStore(seed)
    fg = (p[:, 0] > 3.0).astype(float)
    out = forward(store, p, q, cfg, fg_override=(fg, fg))
    return store, out


def test_forward_shapes_and_weights(float64):
    cfg = profile("desk").model
    _, out = _forward(cfg)
    sizes = out.p_feats.pyramid.sizes
    assert out.final_flow.shape == (128, 3)
    for k in range(4):
        assert out.flows[k].shape == (sizes[k], 3)
        assert out.flow_feats[k].shape == (sizes[k], cfg.flow_channels)
        np.testing.assert_allclose(out.cost[k].weights.data.sum(1), 1.0, atol=1e-6)
        assert out.transforms[k].is_valid()


@pytest.mark.parametrize("toggle", TABLE3_TOGGLES)
def test_graph_diff_per_toggle(float64, toggle):
    full = profile("desk").model
    store_a, _ = _forward(full)
    off = profile("desk").model
    setattr(off, toggle, False)
    store_b, _ = _forward(off)
    a, b = set(store_a.params), set(store_b.params)
    assert b <= a
    removed = a - b
    expected_prefix = {
        "feature_update": ("update",),
        "attention_refine": tuple(f"refine{k}.att" for k in range(4)) + tuple(f"refine{k}.out" for k in range(4)),
        "hybrid_features": ("backbone.context",),
    }.get(toggle)
    if expected_prefix is None:
        assert not removed
    else:
        assert removed and all(n.startswith(expected_prefix) for n in removed)
    # the layer consuming the correlation features sees a narrower input
    # when the feature update is off; every other shared parameter is equal
    reshaped = {f"refine{k}.in.w" for k in range(4)} if toggle == "feature_update" else set()
    for n in b:
        if n in reshaped:
            assert store_a.params[n].data.shape != store_b.params[n].data.shape
            continue
        np.testing.assert_array_equal(store_a.params[n].data, store_b.params[n].data)
