"""Shared cost volume, hybrid warping, ego-motion and scene-flow branches,
and the coarse-to-fine forward pass."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import LEVELS, FrameFeatures, Pyramid, _self_index, build_pyramid, extract
from .config import ModelConfig
from .geometry import DegenerateError, RigidTransform, knn
from .layers import ParamStore, dense, mlp
from .tensor import Value

log = logging.getLogger(__name__)

COARSEST = LEVELS - 1


@dataclass
class CostVolumeOut:
    features: Value         # F^_k, [l_k, 3 + C]
    weights: Value          # attentive weights, [l_k, K], rows sum to 1
    neighbors: np.ndarray   # indices into Q_k
    matched: Value          # soft corresponding points P^_k, [l_k, 3]


@dataclass
class EgoOut:
    R: Value
    t: Value
    confidence: Value
    weights: np.ndarray
    degenerate: bool = False

    def transform(self) -> RigidTransform:
        return RigidTransform(self.R.data.astype(np.float64), self.t.data.astype(np.float64))


@dataclass
class ForwardOut:
    p_feats: FrameFeatures
    q_feats: FrameFeatures
    ego: list = field(default_factory=lambda: [None] * LEVELS)
    flows: list = field(default_factory=lambda: [None] * LEVELS)
    flow_feats: list = field(default_factory=lambda: [None] * LEVELS)
    warped: list = field(default_factory=lambda: [None] * LEVELS)
    cost: list = field(default_factory=lambda: [None] * LEVELS)
    final_flow: Value | None = None

    @property
    def transforms(self) -> list[RigidTransform]:
        return [e.transform() for e in self.ego]


def cost_volume(store: ParamStore, name: str, source, q_points: np.ndarray,
                hf_p: Value, hf_q: Value, mode: str, level: int, k: int = 16,
                att_channels: int = 64) -> CostVolumeOut:
    """Correlate each source point with k cross-frame neighbors.

    ``feature_space`` searches neighbors by hybrid-feature distance (coarsest
    level only); ``euclidean`` by position of the (warped) source points.
    """
    if (mode == "feature_space") != (level == COARSEST):
        raise ValueError(f"cost volume mode {mode!r} invalid at level {level}")
    source = T.as_value(source)
    n, m = source.shape[0], len(q_points)
    k = min(k, m)
    if mode == "feature_space":
        nbr = knn(hf_p.data, hf_q.data, k)
    elif mode == "euclidean":
        nbr = knn(source.data, q_points, k)
    else:
        raise ValueError(f"unknown cost volume mode {mode!r}")
    qn = T.as_value(q_points[nbr])
    geo = T.sub(qn, T.reshape(source, (n, 1, 3)))
    c = hf_p.shape[-1]
    feat = T.sub(T.gather_neighbors(hf_q, nbr), T.reshape(hf_p, (n, 1, c)))
    x = T.concat([geo, feat], axis=-1)
    h = dense(store, f"{name}.att", x, att_channels)
    # negated so the pooled score is concave in the differences: an untrained
    # layer then prefers close matches instead of the most distant ones
    w = T.softmax(T.mul(T.max_(h, axis=-1), -1.0), axis=-1)
    return CostVolumeOut(T.weighted_sum(x, w), w, nbr, T.weighted_sum(qn, w))


def transform_points(points, R: Value, t: Value) -> Value:
    """Rows p -> R p + t, differentiable in R and t."""
    return T.add(T.matmul(T.as_value(points), T.transpose(R)), t)


def hybrid_warp(points: np.ndarray, flow_up, R, t, fg: np.ndarray, enabled: bool = True) -> Value:
    """FG rows follow the flow, BG rows the rigid transform."""
    fg_part = T.add(T.as_value(points), flow_up)
    if not enabled:
        return fg_part
    m = np.asarray(fg, dtype=fg_part.data.dtype)[:, None]
    bg_part = transform_points(points, T.as_value(R), T.as_value(t))
    return T.add(T.mul(fg_part, m), T.mul(bg_part, 1.0 - m))


def kabsch_value(src: np.ndarray, dst, w) -> tuple[Value, Value, bool]:
    """Differentiable weighted Kabsch. Falls back to a pure translation
    (identity rotation) when the cross-covariance is degenerate."""
    dst, w = T.as_value(dst), T.as_value(w)
    n = len(src)
    wn = T.div(w, T.sum_(w))
    row = T.reshape(wn, (1, n))
    src_v = T.as_value(src)
    cs = T.matmul(row, src_v)
    cd = T.matmul(row, dst)
    a = T.sub(src_v, cs)
    b = T.sub(dst, cd)
    H = T.matmul(T.transpose(T.mul(a, T.reshape(wn, (n, 1)))), b)
    s = np.linalg.svd(H.data.astype(np.float64), compute_uv=False)
    degenerate = not (s[0] > 0 and s[1] >= 1e-9 * s[0])
    if degenerate:
        R = T.as_value(np.eye(3))
    else:
        R = T.polar_rotation(T.transpose(H))
    t = T.reshape(T.sub(cd, T.matmul(cs, T.transpose(R))), (3,))
    return R, t, degenerate


def ego_branch(store: ParamStore, name: str, cv: CostVolumeOut, points: np.ndarray,
               bg: np.ndarray, cfg: ModelConfig) -> EgoOut:
    h = mlp(store, name, cv.features, list(cfg.conf_widths), last_plain=True)
    conf = T.sigmoid(T.reshape(h, (h.shape[0],)))
    w = conf
    if cfg.mask_in_ego:
        w = T.mul(conf, np.asarray(bg, dtype=conf.data.dtype))
    flagged = False
    if not float(w.data.sum()) > 1e-6:
        log.warning("%s: no background weight, using uniform weights", name)
        w = T.as_value(np.ones(len(points)))
        flagged = True
    R, t, degenerate = kabsch_value(points, cv.matched, w)
    return EgoOut(R, t, conf, w.data.copy(), degenerate or flagged)


def flow_feature_update(store: ParamStore, name: str, feats: Value, k: int = 16,
                        channels: int = 64) -> Value:
    """Graph update in feature space: K-NN by feature distance, edge MLP, max."""
    n, c = feats.shape
    k = min(k, n)
    nbr = knn(feats.data, feats.data, k)
    fj = T.gather_neighbors(feats, nbr)
    fi = T.gather_neighbors(feats, _self_index(n, k))
    edge = T.concat([T.sub(fj, fi), fi], axis=-1)
    h = mlp(store, name, edge, [channels, channels])
    return T.reduce_neighbors(h, "max")


def _attention_pass(store, name, center: Value, nbr_feats: Value, hidden: int) -> Value:
    diff = T.sub(nbr_feats, T.reshape(center, (center.shape[0], 1, center.shape[1])))
    s = dense(store, f"{name}.0", diff, hidden)
    s = dense(store, f"{name}.1", s, 1, norm=False, act=None)
    w = T.softmax(T.reshape(s, nbr_feats.shape[:2]), axis=-1)
    return T.weighted_sum(nbr_feats, w)


def dual_attention_refine(store: ParamStore, name: str, x: Value, nbr: np.ndarray,
                          channels: int = 64, enabled: bool = True) -> Value:
    """Two attention passes over the Euclidean neighborhood -> flow features.

    Pass one weights neighbors by their feature difference to the center;
    pass two re-scores the pass-one aggregates of the neighbors against the
    center feature.
    """
    h = dense(store, f"{name}.in", x, channels)
    if not enabled:
        return h
    if nbr.shape[0] != h.shape[0]:
        raise T.DimensionError(f"dual attention: {h.shape[0]} rows, neighbor table {nbr.shape}")
    hidden = max(channels // 2, 1)
    a1 = _attention_pass(store, f"{name}.att1", h, T.gather_neighbors(h, nbr), hidden)
    a2 = _attention_pass(store, f"{name}.att2", h, T.gather_neighbors(a1, nbr), hidden)
    return dense(store, f"{name}.out", T.concat([a2, h], axis=-1), channels)


def flow_predictor(store: ParamStore, name: str, sf: Value, widths=(64, 32, 3)) -> Value:
    return mlp(store, name, sf, list(widths), last_plain=True)


def upsample_flow(flow: Value, flow_feats: Value, up: np.ndarray) -> tuple[Value, Value]:
    """1-NN copy from level k+1 to level k (``up`` from the pyramid)."""
    return T.take_rows(flow, up), T.take_rows(flow_feats, up)


def merge_final_flow(flow0, R, t, points: np.ndarray, fg: np.ndarray) -> Value:
    """FG rows keep the scene-flow branch output, BG rows get the rigid flow."""
    flow0 = T.as_value(flow0)
    m = np.asarray(fg, dtype=flow0.data.dtype)[:, None]
    rigid = T.sub(transform_points(points, T.as_value(R), T.as_value(t)), T.as_value(points))
    return T.add(T.mul(flow0, m), T.mul(rigid, 1.0 - m))


def forward(store: ParamStore, p_points: np.ndarray, q_points: np.ndarray, cfg: ModelConfig,
            p_pyr: Pyramid | None = None, q_pyr: Pyramid | None = None,
            fg_override: tuple | None = None) -> ForwardOut:
    """Full pipeline for one frame pair."""
    k = cfg.neighbors
    p_pyr = p_pyr or build_pyramid(p_points, k)
    q_pyr = q_pyr or build_pyramid(q_points, k)
    ov_p, ov_q = fg_override or (None, None)
    pf = extract(store, p_pyr, cfg, ov_p)
    qf = extract(store, q_pyr, cfg, ov_q)
    out = ForwardOut(pf, qf)
    fc = cfg.flow_channels
    dtype = pf.hybrid[0].data.dtype

    flow_up = sf_up = None
    for lvl in range(COARSEST, -1, -1):
        pts = p_pyr.points[lvl]
        fg = pf.seg.fg_levels[lvl]
        bg = 1.0 - fg
        n = len(pts)
        if lvl == COARSEST:
            source = T.as_value(pts)
            mode = "feature_space"
            flow_up = T.as_value(np.zeros((n, 3), dtype=dtype))
            sf_up = T.as_value(np.zeros((n, fc), dtype=dtype))
        else:
            flow_up, sf_up = upsample_flow(out.flows[lvl + 1], out.flow_feats[lvl + 1], p_pyr.up[lvl])
            prev = out.ego[lvl + 1]
            source = hybrid_warp(pts, flow_up, prev.R, prev.t, fg, cfg.hybrid_warp)
            mode = "euclidean"
        out.warped[lvl] = source
        cv = cost_volume(store, f"cost{lvl}", source, q_pyr.points[lvl], pf.hybrid[lvl],
                         qf.hybrid[lvl], mode, lvl, k, fc)
        out.cost[lvl] = cv
        out.ego[lvl] = ego_branch(store, f"ego{lvl}", cv, pts, bg, cfg)

        corr = cv.features
        if cfg.feature_update:
            corr = flow_feature_update(store, f"update{lvl}", corr, k, fc)
        x = T.concat([corr, pf.hybrid[lvl], sf_up, flow_up], axis=-1)
        sf = dual_attention_refine(store, f"refine{lvl}", x, p_pyr.knn[lvl], fc, cfg.attention_refine)
        delta = flow_predictor(store, f"predict{lvl}", sf, cfg.flow_widths)
        out.flow_feats[lvl] = sf
        out.flows[lvl] = delta if lvl == COARSEST else T.add(flow_up, delta)

    e0 = out.ego[0]
    out.final_flow = merge_final_flow(out.flows[0], e0.R, e0.t, p_pyr.points[0], pf.seg.fg_levels[0])
    return out
