"""Four-scale pyramid, encoder/decoder, context encoder, segmentation head
and hybrid features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .geometry import fps, knn
from .layers import ParamStore, dense, mlp
from .tensor import Value

LEVELS = 4


@dataclass
class Pyramid:
    """Sampled levels of one cloud.

    ``index[k]`` maps level-k rows to input rows; ``sub[k]`` maps level k+1
    rows to level-k rows; ``down[k]`` holds, for each level k+1 point, its
    neighbors among level-k points; ``up[k]`` the nearest level k+1 point
    of every level-k point.
    """
    points: list = field(default_factory=list)
    index: list = field(default_factory=list)
    knn: list = field(default_factory=list)
    sub: list = field(default_factory=list)
    down: list = field(default_factory=list)
    up: list = field(default_factory=list)
    cache: dict = field(default_factory=dict, repr=False)

    def relative(self, level: int) -> np.ndarray:
        key = ("rel", level)
        if key not in self.cache:
            self.cache[key] = relative_encoding(self.points[level], self.knn[level])
        return self.cache[key]

    @property
    def sizes(self) -> list[int]:
        return [len(p) for p in self.points]


def level_sizes(n: int) -> list[int]:
    return [n] + [max(8, n // d) for d in (4, 16, 64)]


def build_pyramid(points: np.ndarray, k: int = 16) -> Pyramid:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n < 64:
        raise ValueError(f"build_pyramid needs at least 64 points, got {n}")
    pyr = Pyramid()
    sizes = level_sizes(n)
    idx = np.arange(n)
    for lvl, m in enumerate(sizes):
        if lvl > 0:
            prev = pyr.points[-1]
            sub = fps(prev, m, 0)
            pyr.sub.append(sub)
            idx = idx[sub]
        pts = points[idx]
        pyr.index.append(idx)
        pyr.points.append(pts)
        pyr.knn.append(knn(pts, pts, min(k, m)))
    for lvl in range(LEVELS - 1):
        fine, coarse = pyr.points[lvl], pyr.points[lvl + 1]
        pyr.down.append(knn(coarse, fine, min(k, len(fine))))
        pyr.up.append(knn(fine, coarse, 1)[:, 0])
    return pyr


def relative_encoding(points: np.ndarray, nbr: np.ndarray) -> np.ndarray:
    """Neighbor offset (3), distance (1) and neighbor position (3) per neighbor."""
    pj = points[nbr]
    off = pj - points[:, None, :]
    dist = np.sqrt((off ** 2).sum(-1, keepdims=True))
    return np.concatenate([off, dist, pj], axis=-1)


def _self_index(n: int, k: int) -> np.ndarray:
    return np.repeat(np.arange(n)[:, None], k, axis=1)


def lfa_unit(store: ParamStore, name: str, points: np.ndarray, feats: Value,
             nbr: np.ndarray, cout: int, rel: np.ndarray | None = None) -> Value:
    """Local feature aggregation with attentive pooling over the neighbor axis."""
    if feats.shape[0] != len(points) or nbr.shape[0] != len(points):
        raise T.DimensionError(f"lfa: {len(points)} points, features {feats.shape}, neighbors {nbr.shape}")
    cin = feats.shape[-1]
    if rel is None:
        rel = relative_encoding(points, nbr)
    pos = dense(store, f"{name}.pos", T.as_value(rel), cin)
    x = T.concat([pos, T.gather_neighbors(feats, nbr)], axis=-1)
    score = dense(store, f"{name}.score", x, 1, norm=False, act=None)
    w = T.softmax(T.reshape(score, nbr.shape), axis=-1)
    agg = T.weighted_sum(x, w)
    return dense(store, f"{name}.out", agg, cout)


def lfa_block(store: ParamStore, name: str, points, feats, nbr, cout, rel=None) -> Value:
    """Two stacked LFA units at one level."""
    feats = lfa_unit(store, f"{name}.lfa0", points, feats, nbr, cout, rel)
    return lfa_unit(store, f"{name}.lfa1", points, feats, nbr, cout, rel)


def downsample(feats: Value, down: np.ndarray) -> Value:
    return T.reduce_neighbors(T.gather_neighbors(feats, down), "max")


def encode(store: ParamStore, name: str, pyr: Pyramid, channels) -> list[Value]:
    f = dense(store, f"{name}.stem", T.as_value(pyr.points[0]), channels[0])
    feats = []
    for k in range(LEVELS):
        if k > 0:
            f = downsample(f, pyr.down[k - 1])
        f = lfa_block(store, f"{name}.enc{k}", pyr.points[k], f, pyr.knn[k], channels[k],
                      pyr.relative(k))
        feats.append(f)
    return feats


def decode(store: ParamStore, name: str, enc: list[Value], pyr: Pyramid, channels) -> Value:
    d = enc[-1]
    for k in range(LEVELS - 2, -1, -1):
        up = T.take_rows(d, pyr.up[k])
        d = dense(store, f"{name}.dec{k}", T.concat([up, enc[k]], axis=-1), channels[k])
    return d


def context_encode(store: ParamStore, name: str, pyr: Pyramid, channels) -> list[Value]:
    return encode(store, name, pyr, channels)


@dataclass
class SegMask:
    logits: Value
    probs: np.ndarray
    fg: np.ndarray              # binary mask at l0, float 0/1
    fg_levels: list              # per-level binary masks

    @property
    def bg_levels(self) -> list:
        return [1.0 - m for m in self.fg_levels]


def masks_from_logits(logits: Value, pyr: Pyramid, threshold: float = 0.5) -> SegMask:
    z = logits.data.astype(np.float64)
    probs = 1.0 / (1.0 + np.exp(-z))
    fg = (probs >= threshold).astype(np.float64)
    return SegMask(logits, probs, fg, [fg[i] for i in pyr.index])


def segmentation_head(store: ParamStore, name: str, feats: Value, pyr: Pyramid,
                      cfg: ModelConfig) -> SegMask:
    h = mlp(store, name, feats, list(cfg.seg_widths), last_plain=True)
    logits = T.reshape(h, (h.shape[0],))
    return masks_from_logits(logits, pyr, cfg.mask_threshold)


def hybrid_features(enc: list[Value], ctx: list[Value], fg_levels: list,
                    use_stop_grad: bool = True) -> list[Value]:
    out = []
    for fe, fc, m in zip(enc, ctx, fg_levels):
        m = np.asarray(m, dtype=fe.data.dtype)[:, None]
        base = T.stop_gradient(fe) if use_stop_grad else fe
        out.append(T.add(T.mul(fc, m), T.mul(base, 1.0 - m)))
    return out


@dataclass
class FrameFeatures:
    pyramid: Pyramid
    encoder: list
    context: list | None
    decoded: Value
    seg: SegMask
    hybrid: list


def extract(store: ParamStore, pyr: Pyramid, cfg: ModelConfig, fg_override=None) -> FrameFeatures:
    """Backbone pass for one frame: features, segmentation and HF_k.

    ``fg_override`` replaces the predicted binary mask (oracle/test use).
    """
    ch = cfg.channels
    enc = encode(store, "backbone.encoder", pyr, ch)
    dec = decode(store, "backbone.decoder", enc, pyr, ch)
    seg = segmentation_head(store, "seg", dec, pyr, cfg)
    if fg_override is not None:
        fg = np.asarray(fg_override, dtype=np.float64)
        seg = SegMask(seg.logits, seg.probs, fg, [fg[i] for i in pyr.index])
    if cfg.hybrid_features:
        ctx = context_encode(store, "backbone.context", pyr, ch)
        hf = hybrid_features(enc, ctx, seg.fg_levels, cfg.stop_gradient)
    else:
        ctx = None
        hf = enc
    return FrameFeatures(pyr, enc, ctx, dec, seg, hf)
