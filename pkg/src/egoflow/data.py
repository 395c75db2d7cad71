"""Synthetic LiDAR-like scene pairs with exact ground truth, plus
sub-sampling, augmentation and file I/O."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import RigidTransform, apply_transform, rotation_about_axis

PAIR_MAGIC = b"EGPR"
PAIR_VERSION = 1
SENSOR_HEIGHT = 1.73


class PairCheckError(ValueError):
    """Ground-truth flow does not follow the recorded rigid motions."""


@dataclass
class ScenePair:
    P: np.ndarray           # [N, 3] float32
    Q: np.ndarray           # [M, 3] float32
    S: np.ndarray           # [N, 3] float32, ground-truth flow of P
    R: np.ndarray           # [3, 3] ego rotation (static points: p -> R p + t)
    t: np.ndarray           # [3]
    y_P: np.ndarray         # [N] uint8, 1 = FG
    y_Q: np.ndarray         # [M] uint8
    obj_P: np.ndarray       # [N] uint16, 0 = BG
    obj_Q: np.ndarray       # [M] uint16

    @property
    def T_gt(self) -> RigidTransform:
        return RigidTransform(self.R.astype(np.float64), self.t.astype(np.float64))


@dataclass
class SceneConfig:
    n_points: int = 8192
    extent: float = 20.0                 # half-width of the square scene (m)
    ground_density: float = 0.4          # relative sampling weight of the ground
    n_static: int = 6
    n_movers: int = 2
    mover_length: tuple = (3.5, 4.8)
    mover_speed: tuple = (0.5, 1.5)      # m / frame
    mover_range: tuple = (4.0, 12.0)     # distance of movers from the sensor
    ego_rotation_deg: float = 2.0        # max yaw; roll/pitch get a quarter
    ego_translation: tuple = (0.3, 1.2)  # forward motion (m / frame)
    ego_z_noise: float = 0.02            # std of the vertical sensor motion (m)
    occlusion: float = 0.1
    noise: float = 0.01
    shared_sampling: bool = False
    min_range: float = 2.0
    seed: int = 0


def scene_config(overrides: dict | None = None, **kw) -> SceneConfig:
    """SceneConfig from string or typed overrides (config-file section)."""
    cfg = SceneConfig()
    for key, raw in {**(overrides or {}), **kw}.items():
        if not hasattr(cfg, key):
            raise KeyError(f"unknown scene key {key!r}")
        cur = getattr(cfg, key)
        if isinstance(raw, str):
            if isinstance(cur, bool):
                raw = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(cur, tuple):
                raw = tuple(float(x) for x in raw.replace(",", " ").split())
            else:
                raw = type(cur)(raw)
        setattr(cfg, key, raw)
    return cfg


# -- world geometry ---------------------------------------------------------

@dataclass
class Box:
    center: np.ndarray      # ground-contact center (x, y, z of bottom face)
    size: np.ndarray        # length, width, height
    yaw: float

    def faces(self):
        """(origin, u, v) of the five visible faces (no bottom)."""
        L, W, H = self.size
        Rz = rotation_about_axis(2, self.yaw)
        c = self.center
        ex, ey, ez = Rz[:, 0], Rz[:, 1], Rz[:, 2]
        corner = c - ex * L / 2 - ey * W / 2
        top = corner + ez * H
        return [
            (top, ex * L, ey * W),
            (corner, ex * L, ez * H),
            (corner + ey * W, ex * L, ez * H),
            (corner, ey * W, ez * H),
            (corner + ex * L, ey * W, ez * H),
        ]

    def contains_xy(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        Rz = rotation_about_axis(2, self.yaw)
        local = (pts[:, :2] - self.center[:2]) @ Rz[:2, :2]
        return ((np.abs(local[:, 0]) <= self.size[0] / 2 + margin)
                & (np.abs(local[:, 1]) <= self.size[1] / 2 + margin))


def _sample_faces(rng, faces, n):
    areas = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    a, b = rng.random(n), rng.random(n)
    o = np.array([f[0] for f in faces])[which]
    u = np.array([f[1] for f in faces])[which]
    v = np.array([f[2] for f in faces])[which]
    return o + a[:, None] * u + b[:, None] * v


def _layout(cfg: SceneConfig, rng) -> tuple[list[Box], list[Box]]:
    E = cfg.extent
    ground_z = -SENSOR_HEIGHT
    statics: list[Box] = []
    for i in range(cfg.n_static):
        if i % 3 == 2:  # pole
            size = np.array([0.4, 0.4, rng.uniform(3.0, 5.0)])
        else:           # building / wall
            size = np.array([rng.uniform(5.0, 12.0), rng.uniform(2.0, 5.0), rng.uniform(3.0, 6.0)])
        for _ in range(50):
            r = rng.uniform(cfg.mover_range[1] * 0.6, E * 0.95)
            ang = rng.uniform(-np.pi, np.pi)
            c = np.array([r * np.cos(ang), r * np.sin(ang), ground_z])
            box = Box(c, size, rng.uniform(-np.pi, np.pi))
            if not _overlaps(box, statics):
                break
        statics.append(box)
    movers: list[Box] = []
    for _ in range(cfg.n_movers):
        L = rng.uniform(*cfg.mover_length)
        size = np.array([L, L * rng.uniform(0.38, 0.45), rng.uniform(1.4, 1.8)])
        for _ in range(50):
            r = rng.uniform(*cfg.mover_range)
            ang = rng.uniform(-np.pi, np.pi)
            c = np.array([r * np.cos(ang), r * np.sin(ang), ground_z])
            box = Box(c, size, rng.uniform(-np.pi, np.pi))
            if not _overlaps(box, statics + movers, margin=2.0):
                break
        movers.append(box)
    return statics, movers


def _overlaps(box: Box, others: list[Box], margin: float = 0.5) -> bool:
    for o in others:
        if np.linalg.norm(box.center[:2] - o.center[:2]) < (
                np.linalg.norm(box.size[:2]) + np.linalg.norm(o.size[:2])) / 2 + margin:
            return True
    return False


def _candidates(cfg: SceneConfig, rng, statics, movers, count: int):
    """Uniform-by-area candidate points on every surface with object ids."""
    E = cfg.extent
    ground_area = (2 * E) ** 2 * cfg.ground_density
    areas = [ground_area]
    boxes = statics + movers
    for b in boxes:
        L, W, H = b.size
        areas.append(L * W + 2 * (L + W) * H)
    areas = np.array(areas)
    counts = np.maximum(1, np.round(count * areas / areas.sum()).astype(int))
    pts, ids = [], []
    g = np.column_stack([rng.uniform(-E, E, counts[0]), rng.uniform(-E, E, counts[0]),
                         np.full(counts[0], -SENSOR_HEIGHT)])
    inside = np.zeros(len(g), dtype=bool)
    for b in boxes:
        inside |= b.contains_xy(g)
    g = g[~inside]
    pts.append(g)
    ids.append(np.zeros(len(g), dtype=np.int64))
    for j, b in enumerate(boxes):
        p = _sample_faces(rng, b.faces(), counts[j + 1])
        pts.append(p)
        oid = j - len(statics) + 1 if j >= len(statics) else 0
        ids.append(np.full(len(p), oid, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(ids)


def _lidar_select(rng, pts, n, min_range, extent):
    r = np.linalg.norm(pts[:, :2], axis=1)
    ok = (r >= min_range) & (np.abs(pts[:, 0]) <= extent) & (np.abs(pts[:, 1]) <= extent)
    cand = np.flatnonzero(ok)
    if len(cand) < n:
        raise ValueError(f"scene too sparse: {len(cand)} candidates for {n} points")
    # density decays with range
    w = 1.0 / r[cand]
    return rng.choice(cand, size=n, replace=False, p=w / w.sum())


def _ego_transform(cfg: SceneConfig, rng) -> RigidTransform:
    yaw = np.deg2rad(rng.uniform(-cfg.ego_rotation_deg, cfg.ego_rotation_deg))
    small = np.deg2rad(cfg.ego_rotation_deg / 4)
    roll, pitch = rng.uniform(-small, small, 2)
    R_ego = rotation_about_axis(2, yaw) @ rotation_about_axis(1, pitch) @ rotation_about_axis(0, roll)
    fwd = rng.uniform(*cfg.ego_translation)
    t_ego = np.array([fwd * np.cos(yaw / 2), fwd * np.sin(yaw / 2), rng.normal(0, cfg.ego_z_noise)])
    # static points move by the inverse of the sensor motion
    return RigidTransform(R_ego, t_ego).inverse()


def _mover_motion(box: Box, cfg: SceneConfig, rng) -> RigidTransform:
    speed = rng.uniform(*cfg.mover_speed) * rng.choice([-1.0, 1.0])
    dyaw = np.deg2rad(rng.uniform(-5.0, 5.0))
    Rz = rotation_about_axis(2, dyaw)
    heading = rotation_about_axis(2, box.yaw)[:, 0]
    c = box.center
    # rotate about the box center, then drive along the heading
    return RigidTransform(Rz, c - Rz @ c + speed * heading)


def _f32(a):
    return np.asarray(a, dtype=np.float32)


def generate(cfg: SceneConfig) -> ScenePair:
    """Deterministic function of ``cfg``: builds a scene, samples both frames
    independently and records exact flow, labels and ego-motion."""
    rng = np.random.default_rng(cfg.seed)
    statics, movers = _layout(cfg, rng)
    ego = _ego_transform(cfg, rng)
    ego = RigidTransform(_f32(ego.R).astype(np.float64), _f32(ego.t).astype(np.float64))
    motions = [ego] + [ego.compose(_mover_motion(b, cfg, rng)) for b in movers]

    pool = 6 * cfg.n_points
    cand, ids = _candidates(cfg, rng, statics, movers, pool)
    if len(cand) == 0:
        raise ValueError("empty scene")
    sel = _lidar_select(rng, cand, cfg.n_points, cfg.min_range, cfg.extent)
    P, obj_P = cand[sel], ids[sel]
    P = P + rng.normal(0.0, cfg.noise, P.shape) if cfg.noise > 0 else P
    P = _f32(P).astype(np.float64)

    def move(pts, oid):
        out = np.empty_like(pts)
        for o, T in enumerate(motions):
            m = oid == o
            out[m] = apply_transform(T, pts[m])
        return out

    if cfg.shared_sampling:
        Q, obj_Q = move(P, obj_P), obj_P.copy()
    else:
        cand_q, ids_q = _candidates(cfg, rng, statics, movers, pool)
        moved = move(cand_q, ids_q)
        sel_q = _lidar_select(rng, moved, cfg.n_points, cfg.min_range, cfg.extent)
        Q, obj_Q = moved[sel_q], ids_q[sel_q]
    keep = rng.random(len(Q)) >= cfg.occlusion
    Q, obj_Q = Q[keep], obj_Q[keep]
    if cfg.noise > 0:
        Q = Q + rng.normal(0.0, cfg.noise, Q.shape)
    S = move(P, obj_P) - P
    return ScenePair(
        P=_f32(P), Q=_f32(Q), S=_f32(S), R=_f32(ego.R), t=_f32(ego.t),
        y_P=(obj_P > 0).astype(np.uint8), y_Q=(obj_Q > 0).astype(np.uint8),
        obj_P=obj_P.astype(np.uint16), obj_Q=obj_Q.astype(np.uint16),
    )


def check_pair(pair: ScenePair, tol: float = 1e-4) -> float:
    """Max deviation of BG rows from the rigid ego flow (and FG rows from
    one rigid motion per object). Raises if above ``tol``."""
    P = pair.P.astype(np.float64)
    S = pair.S.astype(np.float64)
    if len(P) != len(S):
        raise PairCheckError("P and S lengths differ")
    worst = 0.0
    bg = pair.obj_P == 0
    if bg.any():
        dev = np.abs(apply_transform(pair.T_gt, P[bg]) - P[bg] - S[bg]).max()
        worst = max(worst, float(dev))
    for o in np.unique(pair.obj_P[~bg]):
        m = pair.obj_P == o
        if m.sum() >= 3:
            from .geometry import kabsch_weighted
            T = kabsch_weighted(P[m], P[m] + S[m], np.ones(m.sum()))
            dev = np.abs(apply_transform(T, P[m]) - P[m] - S[m]).max()
            worst = max(worst, float(dev))
    if worst > tol:
        raise PairCheckError(f"ground-truth flow inconsistent by {worst:.3g} m")
    return worst


def _take(pair: ScenePair, ip: np.ndarray, iq: np.ndarray) -> ScenePair:
    return ScenePair(pair.P[ip], pair.Q[iq], pair.S[ip], pair.R.copy(), pair.t.copy(),
                     pair.y_P[ip], pair.y_Q[iq], pair.obj_P[ip], pair.obj_Q[iq])


def subsample_shuffle(pair: ScenePair, n: int, seed: int) -> ScenePair:
    """Uniform sampling of ``n`` rows per cloud in random order; clouds with
    fewer than ``n`` rows are padded by re-drawing rows."""
    rng = np.random.default_rng(seed)

    def pick(m):
        if m >= n:
            return rng.permutation(m)[:n]
        return np.concatenate([rng.permutation(m), rng.choice(m, n - m)])

    return _take(pair, pick(len(pair.P)), pick(len(pair.Q)))


def rotate_pair(pair: ScenePair, A: np.ndarray) -> ScenePair:
    A = np.asarray(A, dtype=np.float64)
    R = A @ pair.R.astype(np.float64) @ A.T
    t = A @ pair.t.astype(np.float64)
    return dataclasses.replace(
        pair, P=_f32(pair.P @ A.T), Q=_f32(pair.Q @ A.T), S=_f32(pair.S @ A.T), R=_f32(R), t=_f32(t))


def augment_rotation(pair: ScenePair, seed: int, max_deg: float = 10.0) -> ScenePair:
    """Rotate both frames (and flow, ego-motion) about one random axis."""
    rng = np.random.default_rng(seed)
    axis = int(rng.integers(3))
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    return rotate_pair(pair, rotation_about_axis(axis, angle))


# -- files ----------------------------------------------------------------

def save_pair(pair: ScenePair, path) -> None:
    n, m = len(pair.P), len(pair.Q)
    with open(path, "wb") as f:
        f.write(PAIR_MAGIC)
        f.write(struct.pack("<III", PAIR_VERSION, n, m))
        for arr in (pair.P, pair.Q, pair.S):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(pair.y_P, dtype="u1").tobytes())
        f.write(np.ascontiguousarray(pair.y_Q, dtype="u1").tobytes())
        f.write(np.ascontiguousarray(pair.obj_P, dtype="<u2").tobytes())
        f.write(np.ascontiguousarray(pair.obj_Q, dtype="<u2").tobytes())
        f.write(np.concatenate([pair.R.reshape(-1), pair.t]).astype("<f4").tobytes())


def load_pair(path) -> ScenePair:
    raw = Path(path).read_bytes()
    if raw[:4] != PAIR_MAGIC:
        raise ValueError(f"{path}: not an EGPR pair file")
    version, n, m = struct.unpack_from("<III", raw, 4)
    if version != PAIR_VERSION:
        raise ValueError(f"{path}: unsupported pair version {version}")
    off = 16

    def read(dtype, count, shape=None):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return (arr.reshape(shape) if shape else arr).copy()

    P = read("<f4", 3 * n, (n, 3))
    Q = read("<f4", 3 * m, (m, 3))
    S = read("<f4", 3 * n, (n, 3))
    y_P, y_Q = read("u1", n), read("u1", m)
    obj_P, obj_Q = read("<u2", n), read("<u2", m)
    rt = read("<f4", 12)
    return ScenePair(P.astype(np.float32), Q.astype(np.float32), S.astype(np.float32),
                     rt[:9].reshape(3, 3).astype(np.float32), rt[9:].astype(np.float32),
                     y_P, y_Q, obj_P.astype(np.uint16), obj_Q.astype(np.uint16))


def write_manifest(root, names: list[str]) -> Path:
    path = Path(root) / "manifest.txt"
    path.write_text("".join(f"{n}\n" for n in names))
    return path


def read_manifest(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return [path.parent / line.strip() for line in path.read_text().splitlines() if line.strip()]


def export_error_map(P: np.ndarray, pred: np.ndarray, gt: np.ndarray, path) -> tuple[Path, Path]:
    """ASCII PLY with a per-vertex ``epe`` scalar and a CSV twin."""
    path = Path(path)
    epe = np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(gt, np.float64), axis=1)
    P = np.asarray(P, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(P)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nproperty float epe\n")
        f.write("end_header\n")
        for (x, y, z), e in zip(P, epe):
            f.write(f"{x:.6f} {y:.6f} {z:.6f} {e:.6f}\n")
    csv_path = path.with_suffix(".csv")
    with open(csv_path, "w") as f:
        f.write("x,y,z,epe\n")
        for (x, y, z), e in zip(P, epe):
            f.write(f"{x:.6f},{y:.6f},{z:.6f},{e:.6f}\n")
    return path, csv_path
