"""Procedural voxelized clouds: surfaces, solids and scatter."""

from __future__ import annotations

import numpy as np

from .pc_io import PointCloud

STRUCTURED = ("sphere", "box", "plane", "cylinder", "torus", "blob")
ALL_KINDS = STRUCTURED + ("solid", "scatter")


def _unit_vectors(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _surface(kind: str, rng, size: float, n: int) -> np.ndarray:
    """Points on a unit-ish surface scaled by ``size``, centred at the origin."""
    if kind == "sphere":
        return _unit_vectors(rng, n) * size
    if kind == "blob":
        u = _unit_vectors(rng, n)
        freq = rng.normal(size=(4, 3)) * 2.0
        phase = rng.uniform(0, 2 * np.pi, size=4)
        bump = sum(0.08 * np.sin(u @ freq[k] + phase[k]) for k in range(4))
        return u * size * (1.0 + bump)[:, None]
    if kind == "box":
        face = rng.integers(0, 6, size=n)
        p = rng.uniform(-1, 1, size=(n, 3))
        p[np.arange(n), face % 3] = np.where(face < 3, -1.0, 1.0)
        return p * size * np.array([1.0, 0.8, 0.6])
    if kind == "plane":
        p = rng.uniform(-1, 1, size=(n, 3))
        p[:, 2] = 0.1 * np.sin(2 * p[:, 0]) * np.cos(3 * p[:, 1])
        return p * size
    if kind == "cylinder":
        t = rng.uniform(0, 2 * np.pi, size=n)
        h = rng.uniform(-1, 1, size=n)
        return np.stack([0.6 * np.cos(t), 0.6 * np.sin(t), h], axis=1) * size
    if kind == "torus":
        t, s = rng.uniform(0, 2 * np.pi, size=(2, n))
        R, r = 0.7, 0.25
        return np.stack([(R + r * np.cos(s)) * np.cos(t), (R + r * np.cos(s)) * np.sin(t), r * np.sin(s)], axis=1) * size
    raise ValueError(f"unknown surface kind {kind!r}")


_AREA = {"sphere": 4 * np.pi, "blob": 4.5 * np.pi, "box": 2 * (3.2 + 2.4 + 1.92), "plane": 4.0,
         "cylinder": 2 * np.pi * 0.6 * 2, "torus": 4 * np.pi ** 2 * 0.7 * 0.25}


def make_cloud(kind: str, bit_depth: int, n_points: int, seed: int = 0) -> PointCloud:
    """A voxelized shape with roughly ``n_points`` occupied voxels (never more)."""
    if kind not in ALL_KINDS:
        raise ValueError(f"unknown shape {kind!r}; choose from {', '.join(ALL_KINDS)}")
    rng = np.random.default_rng(seed)
    side = 1 << bit_depth
    n_points = max(1, int(n_points))
    if kind == "scatter":
        extent = int(min(side, max(4, round(n_points ** (1 / 3) * 4))))
        lo = rng.integers(0, side - extent + 1, size=3)
        pts = lo + rng.integers(0, extent, size=(n_points, 3))
        return PointCloud.from_points(pts, bit_depth)
    if kind == "solid":
        radius = min((side - 2) / 2, max(1.0, (3 * n_points / (4 * np.pi)) ** (1 / 3) * 1.05))
        r = int(np.ceil(radius))
        ax = np.arange(-r, r + 1)
        g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        axes = rng.uniform(0.8, 1.0, size=3)
        pts = g[((g / (radius * axes)) ** 2).sum(axis=1) <= 1.0]
        centre = rng.integers(r, side - r, size=3) if side - r > r else np.full(3, side // 2)
        pts = np.clip(pts + centre, 0, side - 1)
    else:
        size = np.sqrt(n_points / _AREA[kind]) * 1.1
        size = float(min(size, side * 0.45))
        samples = int(min(4_000_000, max(64, 6 * _AREA[kind] * size * size)))
        p = _surface(kind, rng, size, samples) @ _random_rotation(rng).T
        half = np.abs(p).max(axis=0) + 1
        lo = np.maximum(half, 0)
        hi = np.maximum(side - 1 - half, lo)
        centre = rng.uniform(lo, hi)
        pts = np.clip(np.floor(p + centre + 0.5), 0, side - 1).astype(np.int64)
    pts = np.unique(pts, axis=0)
    if len(pts) > n_points:
        pts = pts[np.sort(rng.choice(len(pts), n_points, replace=False))]
    return PointCloud.from_points(pts, bit_depth)


def random_cloud(seed: int, bit_depths=(8, 10), points=(100, 100_000), kinds=STRUCTURED) -> PointCloud:
    """Random kind, bit depth and (log-uniform) point count."""
    rng = np.random.default_rng(seed)
    kind = kinds[int(rng.integers(len(kinds)))]
    depth = int(rng.integers(bit_depths[0], bit_depths[1] + 1))
    n = int(np.exp(rng.uniform(np.log(points[0]), np.log(points[1]))))
    return make_cloud(kind, depth, n, seed=int(rng.integers(1 << 31)))


def corpus(n: int, seed: int = 0, bit_depth: int = 8, points=(2_000, 20_000), kinds=STRUCTURED) -> list[PointCloud]:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        kind = kinds[k % len(kinds)]
        npts = int(np.exp(rng.uniform(np.log(points[0]), np.log(points[1]))))
        out.append(make_cloud(kind, bit_depth, npts, seed=int(rng.integers(1 << 31))))
    return out


def dense_cloud(bit_depth: int, n_blocks: int, block_size: int, density: float, seed: int = 0) -> PointCloud:
    """Clustered cubes of blocks each filled at ``density`` (random voxels)."""
    rng = np.random.default_rng(seed)
    per_side = (1 << bit_depth) // block_size
    cells = set()
    start = rng.integers(0, per_side, size=3)
    cells.add(tuple(start))
    while len(cells) < min(n_blocks, per_side ** 3):
        base = np.array(list(cells)[int(rng.integers(len(cells)))])
        step = np.zeros(3, dtype=np.int64)
        step[rng.integers(3)] = rng.choice([-1, 1])
        cells.add(tuple(np.clip(base + step, 0, per_side - 1)))
    pts = []
    for c in sorted(cells):
        occ = np.argwhere(rng.random((block_size,) * 3) < density)
        if len(occ) == 0:
            occ = np.zeros((1, 3), dtype=np.int64)
        pts.append(occ + np.asarray(c) * block_size)
    return PointCloud.from_points(np.concatenate(pts), bit_depth)
