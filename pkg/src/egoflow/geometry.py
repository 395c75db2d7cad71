"""Point-cloud kernels: farthest-point sampling, exact KNN, rigid transforms
and weighted Kabsch alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateError(ValueError):
    """Raised when a weighted point set cannot determine a rotation."""


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: p -> self(other(p))."""
        return RigidTransform(self.R @ other.R, self.R @ other.t + self.t)

    def is_valid(self, tol: float = 1e-6) -> bool:
        R = np.asarray(self.R, dtype=np.float64)
        return (np.allclose(R.T @ R, np.eye(3), atol=tol)
                and abs(np.linalg.det(R) - 1.0) < tol)


def rotation_about_axis(axis: int | np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix by ``angle`` radians about a coordinate axis index or a unit vector."""
    if np.ndim(axis) == 0:
        a = np.zeros(3)
        a[int(axis)] = 1.0
    else:
        a = np.asarray(axis, dtype=np.float64)
        a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def rot_z(deg: float) -> np.ndarray:
    return rotation_about_axis(2, np.deg2rad(deg))


def apply_transform(T: RigidTransform, points: np.ndarray) -> np.ndarray:
    """p -> R p + t for every row."""
    return points @ np.asarray(T.R).T + np.asarray(T.t)


def fps(points: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= m <= n:
        raise ValueError(f"fps: cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise ValueError(f"fps: start {start} outside [0, {n})")
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    dmin = ((points - points[start]) ** 2).sum(axis=1)
    dmin[start] = -1.0
    for i in range(1, m):
        nxt = int(np.argmax(dmin))  # argmax returns the first maximal index
        sel[i] = nxt
        dmin = np.minimum(dmin, ((points - points[nxt]) ** 2).sum(axis=1))
        dmin[sel[:i + 1]] = -1.0
    return sel


def _sq_dists(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - ref[None, :, :]
    return np.einsum("mnd,mnd->mn", diff, diff)


def knn(query: np.ndarray, reference: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """Exact k nearest reference rows for every query row.

    Candidates come from the expanded form |q|^2 + |r|^2 - 2 q.r; they are
    re-ranked on exact squared differences, so ordering matches a brute-force
    search. Rows are distance-sorted with ties broken by lower index.
    """
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if query.ndim == 1:
        query = query[None]
    m, n = len(query), len(reference)
    if k > n:
        raise ValueError(f"knn: k={k} exceeds reference size {n}")
    if k < 1:
        raise ValueError("knn: k must be positive")
    out = np.empty((m, k), dtype=np.int64)
    if n <= 64:
        for lo in range(0, m, chunk):
            d = _sq_dists(query[lo:lo + chunk], reference)
            out[lo:lo + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
        return out
    rn = (reference ** 2).sum(axis=1)
    c = min(n, k + 8)
    for lo in range(0, m, chunk):
        q = query[lo:lo + chunk]
        approx = (q ** 2).sum(axis=1)[:, None] + rn[None, :] - 2.0 * (q @ reference.T)
        cand = np.argpartition(approx, c - 1, axis=1)[:, :c] if c < n else np.tile(np.arange(n), (len(q), 1))
        diff = reference[cand] - q[:, None, :]
        exact = np.einsum("mcd,mcd->mc", diff, diff)
        order = np.lexsort((cand, exact), axis=1)
        cand = np.take_along_axis(cand, order, 1)
        exact = np.take_along_axis(exact, order, 1)
        res = cand[:, :k]
        if c < n:
            # the margin must separate the k-th neighbor from the non-candidates
            scale = np.maximum(exact[:, -1], 1e-300)
            unsure = np.flatnonzero(exact[:, -1] - exact[:, k - 1] <= 1e-9 * scale)
            if len(unsure):
                d = _sq_dists(q[unsure], reference)
                res[unsure] = np.argsort(d, axis=1, kind="stable")[:, :k]
        out[lo:lo + chunk] = res
    return out


def upsample_assign(fine: np.ndarray, coarse: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Copy to each fine point the value of its nearest coarse point."""
    nn = knn(fine, coarse, 1)[:, 0]
    return np.asarray(values)[nn]


def kabsch_weighted(src: np.ndarray, dst: np.ndarray, w: np.ndarray,
                    rel_tol: float = 1e-9) -> RigidTransform:
    """argmin over (R, t) of sum_i w_i |R src_i + t - dst_i|^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if src.shape != dst.shape or len(w) != len(src):
        raise ValueError(f"kabsch: shapes {src.shape}, {dst.shape}, {w.shape} disagree")
    if np.any(w < 0):
        raise ValueError("kabsch: weights must be non-negative")
    # zero-weight rows contribute nothing; dropping them makes the result
    # bit-identical to a solve on the weighted subset
    keep = w > 0
    if not keep.all():
        src, dst, w = src[keep], dst[keep], w[keep]
    total = w.sum()
    if not total > 0:
        raise DegenerateError("kabsch: weights sum to zero")
    cs = w @ src / total
    cd = w @ dst / total
    H = (src - cs).T @ (w[:, None] * (dst - cd))
    u, s, vt = np.linalg.svd(H)
    if s[0] <= 0 or s[1] < rel_tol * s[0]:
        raise DegenerateError(f"kabsch: cross-covariance singular values {s}")
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    R = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(R, cd - R @ cs)
