"""Finite-difference verification of every differentiable op, layer and loss.

Each case builds a small random instance in float64, back-propagates a
random projection of the output and compares the analytic gradient of
every leaf with central differences. The error of one leaf is
``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`` in the
2-norm over the checked coordinates. Some gradients vanish identically
(a bias followed by normalization or by a softmax); there the analytic
side is round-off and the numeric side must be below ``ZERO`` in absolute
terms instead. Large tensors are checked on a random subset of
coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Value

STEP = 1e-5
REL_TOL = 1e-4
ZERO = 1e-6
INSTANCES = 20


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL


def leaf(x) -> Value:
    return Value(np.array(x, dtype=np.float64), requires_grad=True)


def relative_error(build: Callable[[], Value], leaves: list[Value], rng,
                   h: float = STEP, max_coords: int = 24) -> float:
    """Largest per-leaf relative gradient error of ``sum(build() * r)``."""
    out = build()
    r = rng.normal(size=out.shape)
    for v in leaves:
        v.grad = None
    T.backward(T.sum_(T.mul(out, r)))

    def f() -> float:
        return float((build().data * r).sum())

    worst = 0.0
    for v in leaves:
        analytic = np.zeros_like(v.data) if v.grad is None else v.grad
        flat = v.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + h
            fp = f()
            flat[c] = orig - h
            fm = f()
            flat[c] = orig
            num[j] = (fp - fm) / (2 * h)
        ana = analytic.reshape(-1)[coords]
        na, nn = np.linalg.norm(ana), np.linalg.norm(num)
        if na < 1e-12:
            err = 0.0 if nn < ZERO else 1.0
        else:
            err = float(np.linalg.norm(ana - num) / max(na, nn))
        worst = max(worst, err)
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# -- cases: each takes an rng and returns (build, leaves) -----------------

def _binary(op, broadcast):
    def case(rng):
        a = leaf(rng.normal(size=(4, 3)))
        b = leaf(rng.normal(size=(3,)) if broadcast else rng.normal(size=(4, 3)))
        if op is T.div:
            b.data[:] = np.sign(b.data) * (np.abs(b.data) + 0.5)
        return (lambda: op(a, b)), [a, b]
    return case


def _unary(op, positive=False, kink=False):
    def case(rng):
        x = leaf(np.abs(rng.normal(size=(5, 3))) + 0.1 if positive
                 else _away_from_zero(rng, (5, 3)) if kink else rng.normal(size=(5, 3)) * 2)
        return (lambda: op(x)), [x]
    return case


def _case_sum(rng):
    x = leaf(rng.normal(size=(4, 3, 2)))
    return (lambda: T.sum_(x, axis=(0, 2))), [x]


def _case_mean(rng):
    x = leaf(rng.normal(size=(6, 3)))
    return (lambda: T.mean(x, axis=0)), [x]


def _case_reshape_transpose(rng):
    x = leaf(rng.normal(size=(2, 6)))
    return (lambda: T.transpose(T.reshape(x, (4, 3)))), [x]


def _case_concat(rng):
    a, b = leaf(rng.normal(size=(4, 2))), leaf(rng.normal(size=(4, 3)))
    return (lambda: T.concat([a, b], axis=-1)), [a, b]


def _case_max(rng):
    # distinct values so the argmax is stable under the finite-difference step
    x = leaf(rng.permutation(40).reshape(5, 8) * 0.1 + rng.normal(size=(5, 8)) * 1e-3)
    return (lambda: T.max_(x, axis=-1)), [x]


def _case_take_rows(rng):
    x = leaf(rng.normal(size=(6, 3)))
    idx = rng.integers(0, 6, size=9)
    return (lambda: T.take_rows(x, idx)), [x]


def _case_gather(rng):
    x = leaf(rng.normal(size=(7, 4)))
    idx = rng.integers(0, 7, size=(5, 3))
    return (lambda: T.gather_neighbors(x, idx)), [x]


def _case_weighted_sum(rng):
    x, w = leaf(rng.normal(size=(4, 3, 5))), leaf(rng.normal(size=(4, 3)))
    return (lambda: T.weighted_sum(x, w)), [x, w]


def _case_reduce_max(rng):
    x = leaf(rng.permutation(60).reshape(4, 3, 5) * 0.1)
    return (lambda: T.reduce_neighbors(x, "max")), [x]


def _case_matmul(rng):
    a, b = leaf(rng.normal(size=(2, 4, 3))), leaf(rng.normal(size=(3, 5)))
    return (lambda: T.matmul(a, b)), [a, b]


def _case_linear(rng):
    x, w, b = leaf(rng.normal(size=(6, 4))), leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=3))
    return (lambda: T.linear(x, w, b)), [x, w, b]


def _case_batch_norm(rng):
    x = leaf(rng.normal(size=(3, 5, 4)) * 2 + 1)
    s, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    return (lambda: T.batch_norm(x, s, b, None, training=True)), [x, s, b]


def _case_polar(rng):
    # either orientation; singular values kept apart, since with a reflection
    # the derivative scales with 1 / (s_2 - s_3)
    s = 0.3 + np.cumsum(rng.uniform(0.25, 0.6, 3))
    m = _rotation(rng) @ np.diag(s) @ _rotation(rng)
    if rng.random() < 0.5:
        m[:, 2] *= -1
    x = leaf(m)
    return (lambda: T.polar_rotation(x)), [x]


def _case_kabsch(rng):
    from .flow import kabsch_value
    n = int(rng.integers(6, 15))
    src = rng.normal(size=(n, 3)) * 3
    dst = leaf(src @ _rotation(rng).T + rng.normal(size=3) + rng.normal(size=(n, 3)) * 0.3)
    w = leaf(rng.uniform(0.2, 1.0, n))

    def build():
        R, t, _ = kabsch_value(src, dst, w)
        return T.concat([R, T.reshape(t, (1, 3))], axis=0)
    return build, [dst, w]


def _case_seg_loss(rng):
    from .losses import seg_loss
    z = leaf(rng.normal(size=12) * 2)
    y = rng.integers(0, 2, 12)
    return (lambda: seg_loss(z, y, 20.0)), [z]


def _case_ego_loss(rng):
    from .losses import ego_loss
    Rs = [leaf(_rotation(rng)) for _ in range(4)]
    ts = [leaf(rng.normal(size=3)) for _ in range(4)]
    R, t = _rotation(rng), rng.normal(size=3)
    return (lambda: ego_loss(Rs, ts, R, t, 1.8)), Rs + ts


def _case_chamfer(rng):
    from .losses import chamfer_masked
    p = leaf(rng.normal(size=(9, 3)))
    q = rng.normal(size=(11, 3))
    fp, fq = rng.integers(0, 2, 9), rng.integers(0, 2, 11)
    return (lambda: chamfer_masked(p, q, fp, fq)), [p]


def _case_smoothness(rng):
    from .losses import smoothness_masked
    pts = rng.normal(size=(10, 3))
    f = leaf(rng.normal(size=(10, 3)))
    fg = rng.integers(0, 2, 10)
    return (lambda: smoothness_masked(f, pts, fg, 4)), [f]


def _case_hybrid_warp(rng):
    from .flow import hybrid_warp
    pts = rng.normal(size=(8, 3))
    flow, R, t = leaf(rng.normal(size=(8, 3))), leaf(_rotation(rng)), leaf(rng.normal(size=3))
    fg = rng.integers(0, 2, 8)
    return (lambda: hybrid_warp(pts, flow, R, t, fg)), [flow, R, t]


def _case_merge(rng):
    from .flow import merge_final_flow
    pts = rng.normal(size=(8, 3))
    flow, R, t = leaf(rng.normal(size=(8, 3))), leaf(_rotation(rng)), leaf(rng.normal(size=3))
    fg = rng.integers(0, 2, 8)
    return (lambda: merge_final_flow(flow, R, t, pts, fg)), [flow, R, t]


def _with_params(store, leaves):
    return leaves + [p.value for p in store.parameters()]


def _case_lfa(rng):
    from .backbone import lfa_unit
    from .geometry import knn
    from .layers import ParamStore
    store = ParamStore(int(rng.integers(1 << 30)))
    pts = rng.normal(size=(10, 3))
    nbr = knn(pts, pts, 4)
    x = leaf(rng.normal(size=(10, 3)))
    build = lambda: lfa_unit(store, "lfa", pts, x, nbr, 4)
    build()
    return build, _with_params(store, [x])


def _case_cost_volume(rng):
    from .flow import cost_volume
    from .layers import ParamStore
    store = ParamStore(int(rng.integers(1 << 30)))
    src = leaf(rng.normal(size=(8, 3)))
    q = rng.normal(size=(9, 3))
    hp, hq = leaf(rng.normal(size=(8, 3))), leaf(rng.normal(size=(9, 3)))

    def build():
        cv = cost_volume(store, "cv", src, q, hp, hq, "euclidean", 0, 4, 5)
        return T.concat([cv.features, cv.matched], axis=-1)
    build()
    return build, _with_params(store, [src, hp, hq])


def _case_ego_branch(rng):
    from .config import ModelConfig
    from .flow import CostVolumeOut, ego_branch
    from .layers import ParamStore
    store = ParamStore(int(rng.integers(1 << 30)))
    n = 10
    pts = rng.normal(size=(n, 3)) * 2
    feats = leaf(rng.normal(size=(n, 5)))
    matched = leaf(pts @ _rotation(rng).T * 0.5 + rng.normal(size=(n, 3)) * 0.2)
    bg = np.ones(n)
    bg[rng.integers(n)] = 0
    cfg = ModelConfig(conf_widths=(6, 1))

    def build():
        cv = CostVolumeOut(feats, None, None, matched)
        e = ego_branch(store, "ego", cv, pts, bg, cfg)
        return T.concat([e.R, T.reshape(e.t, (1, 3))], axis=0)
    build()
    return build, _with_params(store, [feats, matched])


def _case_feature_update(rng):
    from .flow import flow_feature_update
    from .layers import ParamStore
    store = ParamStore(int(rng.integers(1 << 30)))
    x = leaf(rng.normal(size=(8, 4)))
    build = lambda: flow_feature_update(store, "upd", x, 3, 4)
    build()
    return build, _with_params(store, [x])


def _case_dual_attention(rng):
    from .flow import dual_attention_refine
    from .geometry import knn
    from .layers import ParamStore
    store = ParamStore(int(rng.integers(1 << 30)))
    pts = rng.normal(size=(8, 3))
    nbr = knn(pts, pts, 4)
    x = leaf(rng.normal(size=(8, 5)))
    build = lambda: dual_attention_refine(store, "att", x, nbr, 4)
    build()
    return build, _with_params(store, [x])


def _case_flow_predictor(rng):
    from .flow import flow_predictor
    from .layers import ParamStore
    store = ParamStore(int(rng.integers(1 << 30)))
    x = leaf(rng.normal(size=(7, 5)))
    build = lambda: flow_predictor(store, "pred", x, (6, 4, 3))
    build()
    return build, _with_params(store, [x])


CASES: dict[str, Callable] = {
    "add": _binary(T.add, True),
    "sub": _binary(T.sub, True),
    "mul": _binary(T.mul, True),
    "div": _binary(T.div, False),
    "leaky_relu": _unary(T.leaky_relu, kink=True),
    "sigmoid": _unary(T.sigmoid),
    "log_sigmoid": _unary(T.log_sigmoid),
    "softmax": _unary(lambda x: T.softmax(x, axis=-1)),
    "sqrt": _unary(T.sqrt, positive=True),
    "abs": _unary(T.abs_, kink=True),
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape_transpose": _case_reshape_transpose,
    "concat": _case_concat,
    "max": _case_max,
    "take_rows": _case_take_rows,
    "gather_neighbors": _case_gather,
    "weighted_sum": _case_weighted_sum,
    "reduce_neighbors_max": _case_reduce_max,
    "matmul": _case_matmul,
    "linear": _case_linear,
    "batch_norm": _case_batch_norm,
    "polar_rotation": _case_polar,
    "kabsch": _case_kabsch,
    "seg_loss": _case_seg_loss,
    "ego_loss": _case_ego_loss,
    "chamfer": _case_chamfer,
    "smoothness": _case_smoothness,
    "hybrid_warp": _case_hybrid_warp,
    "merge_final_flow": _case_merge,
    "lfa_unit": _case_lfa,
    "cost_volume": _case_cost_volume,
    "ego_branch": _case_ego_branch,
    "flow_feature_update": _case_feature_update,
    "dual_attention_refine": _case_dual_attention,
    "flow_predictor": _case_flow_predictor,
}


def run_case(name: str, instances: int = INSTANCES, seed: int = 0) -> CaseResult:
    previous = T.default_dtype()
    T.set_default_dtype(np.float64)
    try:
        t0 = time.time()
        worst = 0.0
        for i in range(instances):
            rng = np.random.default_rng([seed, i, len(name)])
            build, leaves = CASES[name](rng)
            worst = max(worst, relative_error(build, leaves, rng))
        return CaseResult(name, instances, worst, time.time() - t0)
    finally:
        T.set_default_dtype(previous)


def run_all(instances: int = INSTANCES, seed: int = 0, names=None) -> list[CaseResult]:
    return [run_case(n, instances, seed) for n in (names or CASES)]
