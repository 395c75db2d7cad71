"""Weakly-supervised objective: segmentation + ego-motion + masked scene-flow terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import LEVELS
from .config import LossConfig
from .flow import ForwardOut, hybrid_warp
from .geometry import knn
from .tensor import Value


def seg_loss(logits, labels: np.ndarray, gamma: float = 20.0) -> Value:
    """Class-weighted binary cross-entropy evaluated from logits."""
    z = T.as_value(logits)
    y = np.asarray(labels, dtype=z.data.dtype)
    pos = T.mul(T.log_sigmoid(z), gamma * y)
    neg = T.mul(T.log_sigmoid(T.mul(z, -1.0)), 1.0 - y)
    return T.mul(T.mean(T.add(pos, neg)), -1.0)


def ego_loss(rotations, translations, R: np.ndarray, t: np.ndarray, beta: float = 1.8) -> Value:
    """Mean over scales of beta * |R_k^T R - I|_F + |t_k - t|_2."""
    R = np.asarray(R)
    t = np.asarray(t)
    terms = []
    for Rk, tk in zip(rotations, translations):
        Rk, tk = T.as_value(Rk), T.as_value(tk)
        diff = T.sub(T.matmul(T.transpose(Rk), R), np.eye(3))
        rot = T.sqrt(T.sum_(T.mul(diff, diff)))
        dt = T.sub(tk, t)
        trans = T.sqrt(T.sum_(T.mul(dt, dt)))
        terms.append(T.add(T.mul(rot, beta), trans))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    return T.mul(total, 1.0 / len(terms))


def _row_norm(x: Value) -> Value:
    return T.sqrt(T.sum_(T.mul(x, x), axis=1))


def chamfer_masked(warped, q_points: np.ndarray, fg_p: np.ndarray, fg_q: np.ndarray) -> Value:
    """Bidirectional Chamfer distance; masks weight the outer sums, the inner
    minimum runs over every point of the other cloud."""
    warped = T.as_value(warped)
    q = np.asarray(q_points, dtype=warped.data.dtype)
    nn_pq = knn(warped.data, q, 1)[:, 0]
    nn_qp = knn(q, warped.data, 1)[:, 0]
    d_pq = _row_norm(T.sub(warped, q[nn_pq]))
    d_qp = _row_norm(T.sub(T.take_rows(warped, nn_qp), q))
    a = T.sum_(T.mul(d_pq, np.asarray(fg_p, dtype=q.dtype)))
    b = T.sum_(T.mul(d_qp, np.asarray(fg_q, dtype=q.dtype)))
    return T.add(a, b)


def neighbors_excluding_self(points: np.ndarray, k: int) -> np.ndarray:
    """k nearest other points of every point (self removed even among duplicates)."""
    n = len(points)
    k = min(k, n - 1)
    if k < 1:
        return np.zeros((n, 0), dtype=np.int64)
    nbr = knn(points, points, k + 1)
    is_self = nbr == np.arange(n)[:, None]
    # drop the self entry if present, otherwise the farthest one
    drop = np.where(is_self.any(axis=1), is_self.argmax(axis=1), k)
    keep = np.ones_like(nbr, dtype=bool)
    keep[np.arange(n), drop] = False
    return nbr[keep].reshape(n, k)


def smoothness_masked(flow, points: np.ndarray, fg: np.ndarray, k: int,
                      nbr: np.ndarray | None = None) -> Value:
    """Sum over FG points of the mean L1 flow difference to their k neighbors."""
    flow = T.as_value(flow)
    if nbr is None:
        nbr = neighbors_excluding_self(np.asarray(points), k)
    if nbr.shape[1] == 0:
        return T.as_value(0.0)
    fj = T.gather_neighbors(flow, nbr)
    fi = T.reshape(flow, (flow.shape[0], 1, 3))
    l1 = T.sum_(T.abs_(T.sub(fj, fi)), axis=(1, 2))
    w = np.asarray(fg, dtype=flow.data.dtype) / nbr.shape[1]
    return T.sum_(T.mul(l1, w))


@dataclass
class LossTerms:
    total: Value
    seg_p: float = 0.0
    seg_q: float = 0.0
    ego: float = 0.0
    chamfer: tuple = ()
    smooth: tuple = ()

    def as_row(self) -> dict:
        row = {"total": float(self.total.data), "seg": self.seg_p + self.seg_q, "ego": self.ego}
        for k, (c, s) in enumerate(zip(self.chamfer, self.smooth)):
            row[f"chamfer{k}"] = c
            row[f"smooth{k}"] = s
        return row


def total_loss(out: ForwardOut, q_points: np.ndarray, labels_p: np.ndarray, labels_q: np.ndarray,
               R: np.ndarray, t: np.ndarray, cfg: LossConfig, hybrid_warp_on: bool = True) -> LossTerms:
    """L_seg(P) + L_seg(Q) + L_ego + sum_k alpha_k (L_cd,k + L_sm,k).

    The Chamfer term at level k uses the cloud warped by that level's own
    outputs (flow on FG rows, rigid transform on BG rows).
    """
    pf, qf = out.p_feats, out.q_feats
    terms: list[Value] = []
    lt = LossTerms(T.as_value(0.0))
    if cfg.use_seg:
        sp = seg_loss(pf.seg.logits, labels_p, cfg.gamma)
        sq = seg_loss(qf.seg.logits, labels_q, cfg.gamma)
        terms += [sp, sq]
        lt.seg_p, lt.seg_q = float(sp.data), float(sq.data)
    if cfg.use_ego:
        el = ego_loss([e.R for e in out.ego], [e.t for e in out.ego], R, t, cfg.beta)
        terms.append(el)
        lt.ego = float(el.data)
    cds, sms = [], []
    if cfg.use_flow:
        for k in range(LEVELS):
            pts = pf.pyramid.points[k]
            if cfg.masked_flow_loss:
                fg_p = pf.seg.fg_levels[k]
                fg_q = qf.seg.fg_levels[k]
            else:
                fg_p = np.ones(len(pts))
                fg_q = np.ones(len(qf.pyramid.points[k]))
            e = out.ego[k]
            warped = hybrid_warp(pts, out.flows[k], e.R, e.t, fg_p,
                                 hybrid_warp_on and cfg.masked_flow_loss)
            cd = chamfer_masked(warped, qf.pyramid.points[k], fg_p, fg_q)
            key = ("smooth", k, cfg.smooth_neighbors[k])
            cache = pf.pyramid.cache
            if key not in cache:
                cache[key] = neighbors_excluding_self(pts, cfg.smooth_neighbors[k])
            sm = smoothness_masked(out.flows[k], pts, fg_p, cfg.smooth_neighbors[k], cache[key])
            terms.append(T.mul(T.add(cd, sm), cfg.alphas[k]))
            cds.append(float(cd.data))
            sms.append(float(sm.data))
    total = terms[0] if terms else T.as_value(0.0)
    for term in terms[1:]:
        total = T.add(total, term)
    lt.total = total
    lt.chamfer, lt.smooth = tuple(cds), tuple(sms)
    return lt
