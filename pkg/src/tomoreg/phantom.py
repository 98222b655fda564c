"""Synthetic phantoms, known deformations, landmark TRE and DIR-Lab loaders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .geometry import Grid3D, LandmarkSet, Volume3D
from .transforms import DeformationMap, kernel_smooth, MultiGaussianKernel


class PhantomError(ValueError):
    pass


@dataclass
class Primitive:
    """``kind`` is ``ellipsoid``, ``box`` or ``bead``; ``size`` holds radii / half-widths (mm)."""

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    intensity: float
    landmarks: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        kind = d["type"]
        if kind == "bead":
            r = float(d["radius"])
            size = (r, r, r)
        elif kind == "ellipsoid":
            size = tuple(d["radii"])
        elif kind == "box":
            size = tuple(d["half_size"])
        else:
            raise PhantomError(f"unknown primitive type {kind!r}")
        return cls(kind, tuple(float(c) for c in d["center"]), tuple(float(s) for s in size),
                   float(d["intensity"]), bool(d.get("landmarks", True)))

    def occupancy(self, pts: np.ndarray) -> np.ndarray:
        rel = (pts - np.asarray(self.center)) / np.asarray(self.size)
        if self.kind == "box":
            return np.all(np.abs(rel) <= 1.0, axis=-1)
        return (rel * rel).sum(-1) <= 1.0

    def landmark_points(self) -> list[tuple[float, float, float]]:
        c = np.asarray(self.center)
        pts = [tuple(c)]
        if self.kind != "bead":
            for a in range(3):
                for sgn in (-1, 1):
                    p = c.copy()
                    p[a] += sgn * self.size[a]
                    pts.append(tuple(p))
        return pts


@dataclass
class PhantomSpec:
    grid: Grid3D
    primitives: list[Primitive] = field(default_factory=list)
    texture_amplitude: float = 0.0
    texture_sigma: float = 4.0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        g = d["grid"]
        grid = Grid3D(tuple(g["dims"]), tuple(g.get("spacing", (1, 1, 1))), tuple(g.get("origin", (0, 0, 0))))
        tex = d.get("texture") or {}
        return cls(grid, [Primitive.from_dict(p) for p in d.get("primitives", [])],
                   float(tex.get("amplitude", 0.0)), float(tex.get("sigma_mm", 4.0)), int(d.get("seed", 0)))


def make_phantom(spec: PhantomSpec, dtype=torch.float64) -> tuple[Volume3D, LandmarkSet]:
    """Rasterise primitives in order (later ones paint over earlier ones).

    Each voxel's occupancy is the fraction of its 2x2x2 sub-samples inside the
    primitive, which antialiases boundaries. An optional smooth random texture
    (seeded) is added wherever the volume is non-zero.
    """
    grid = spec.grid
    lo = np.asarray(grid.origin) - 0.5 * np.asarray(grid.spacing)
    hi = lo + np.asarray(grid.extent)
    offsets = np.array([(a, b, c) for a in (-0.25, 0.25) for b in (-0.25, 0.25) for c in (-0.25, 0.25)])
    centers = grid.coordinates(torch.float64).numpy().reshape(3, -1).T
    vol = np.zeros(len(centers))
    labels, points = [], []
    for n, prim in enumerate(spec.primitives):
        c, s = np.asarray(prim.center), np.asarray(prim.size)
        if np.any(c - s < lo - 1e-9) or np.any(c + s > hi + 1e-9):
            raise PhantomError(f"primitive {n} ({prim.kind}) extends outside the grid")
        near = np.all(np.abs(centers - c) <= s + np.asarray(grid.spacing), axis=1)
        sub = centers[near][:, None, :] + offsets * np.asarray(grid.spacing)
        occ = prim.occupancy(sub).mean(axis=1)
        vol[near] = vol[near] * (1.0 - occ) + prim.intensity * occ
        if prim.landmarks:
            for k, p in enumerate(prim.landmark_points()):
                points.append(p)
                labels.append(f"{prim.kind}{n}_{k}")
    data = torch.from_numpy(vol.reshape(grid.dims)).to(dtype)
    if spec.texture_amplitude > 0 and spec.primitives:
        rng = np.random.default_rng(spec.seed)
        noise = torch.from_numpy(rng.standard_normal(grid.dims)).to(dtype)
        sigma = spec.texture_sigma
        smooth = kernel_smooth(noise, MultiGaussianKernel((sigma,), (1.0,)), grid.spacing)
        smooth = smooth / smooth.abs().max()
        data = data + spec.texture_amplitude * smooth * (data > 0)
    return Volume3D(data, grid.spacing, grid.origin), LandmarkSet(np.asarray(points).reshape(-1, 3), labels)


# ---------------------------------------------------------------------------
# synthetic deformations
# ---------------------------------------------------------------------------


@dataclass
class GaussianBump:
    center: tuple[float, float, float]
    sigma: float
    amplitude: tuple[float, float, float]


@dataclass
class SyntheticDeformation:
    """Forward point map ``x -> R (flow_v(x) - c) + c + t``.

    ``flow_v`` is the time-one flow of the stationary velocity field
    ``v(x) = sum_k a_k exp(-|x - c_k|^2 / (2 s_k^2))``; ``R`` rotates by
    ``rotation_deg`` (x, y, z Euler angles, applied z*y*x) about ``center``.
    The pull-back map used to warp images is the exact inverse, computed by
    integrating ``-v``.
    """

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation_deg: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    bumps: list[GaussianBump] = field(default_factory=list)
    flow_steps: int = 40

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDeformation":
        bumps = [GaussianBump(tuple(b["center"]), float(b["sigma"]), tuple(b["amplitude"]))
                 for b in d.get("bumps", [])]
        return cls(tuple(d.get("translation", (0, 0, 0))), tuple(d.get("rotation_deg", (0, 0, 0))),
                   tuple(d.get("center", (0, 0, 0))), bumps, int(d.get("flow_steps", 40)))

    @property
    def lipschitz_bound(self) -> float:
        """Upper bound on the Lipschitz constant of the bump velocity field."""
        return sum(np.linalg.norm(b.amplitude) / b.sigma for b in self.bumps) * math.exp(-0.5)

    def check(self) -> None:
        if self.lipschitz_bound >= 1.0:
            raise PhantomError(
                f"bump amplitudes too large (Lipschitz bound {self.lipschitz_bound:.3f} >= 1); "
                "the deformation may fold after discretisation")

    def rotation(self) -> np.ndarray:
        ax, ay, az = np.radians(self.rotation_deg)
        rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
        ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
        rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
        return rz @ ry @ rx

    def velocity(self, x: np.ndarray) -> np.ndarray:
        v = np.zeros_like(x)
        for b in self.bumps:
            r2 = ((x - np.asarray(b.center)) ** 2).sum(-1)
            v += np.exp(-0.5 * r2 / b.sigma ** 2)[..., None] * np.asarray(b.amplitude)
        return v

    def flow(self, x: np.ndarray, sign: float = 1.0) -> np.ndarray:
        """Time-one flow of ``sign * v`` by classical RK4."""
        if not self.bumps:
            return x.copy()
        h = 1.0 / self.flow_steps
        x = x.copy()
        for _ in range(self.flow_steps):
            k1 = sign * self.velocity(x)
            k2 = sign * self.velocity(x + 0.5 * h * k1)
            k3 = sign * self.velocity(x + 0.5 * h * k2)
            k4 = sign * self.velocity(x + h * k3)
            x += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        return (self.flow(x) - c) @ self.rotation().T + c + np.asarray(self.translation)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        return self.flow((y - c - np.asarray(self.translation)) @ self.rotation() + c, sign=-1.0)


def apply_synthetic_deformation(vol: Volume3D, landmarks: LandmarkSet, d: SyntheticDeformation):
    """Warp ``vol`` and move ``landmarks`` with the forward map.

    Returns ``(warped, moved_landmarks, truth)`` where ``truth`` is the pull-back
    map with ``warped = vol o truth`` and ``truth(moved) = landmarks``.
    """
    d.check()
    from .transforms import warp

    grid = vol.grid
    x = grid.coordinates(torch.float64).numpy().reshape(3, -1).T
    truth = torch.from_numpy(d.inverse(x).T.reshape(3, *grid.dims)).to(vol.data.dtype)
    phi = DeformationMap(truth, grid)
    moved = LandmarkSet(d.forward(landmarks.points) if len(landmarks) else landmarks.points, landmarks.labels)
    return warp(vol, phi), moved, phi


# ---------------------------------------------------------------------------
# landmark evaluation
# ---------------------------------------------------------------------------


@dataclass
class TREReport:
    distances: np.ndarray
    per_axis: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.distances.mean()) if len(self.distances) else 0.0

    def as_dict(self) -> dict:
        return {"tre_mean": self.mean, "tre_x": float(self.per_axis[0]), "tre_y": float(self.per_axis[1]),
                "tre_z": float(self.per_axis[2]), "count": int(len(self.distances))}


def landmark_tre(moving: LandmarkSet, fixed: LandmarkSet, phi: Optional[DeformationMap] = None) -> TREReport:
    """Distances ``|phi(fixed_i) - moving_i|``; ``phi=None`` means identity (initial misalignment)."""
    if len(moving) != len(fixed):
        raise ValueError(f"landmark sets differ in length ({len(moving)} vs {len(fixed)})")
    if len(fixed) == 0:
        return TREReport(np.zeros(0), np.zeros(3))
    mapped = fixed.points if phi is None else phi(fixed.points).detach().cpu().numpy()
    diff = mapped - moving.points
    return TREReport(np.linalg.norm(diff, axis=1), np.abs(diff).mean(axis=0))


# ---------------------------------------------------------------------------
# DIR-Lab formats
# ---------------------------------------------------------------------------


def load_dirlab_landmarks(path, reference) -> LandmarkSet:
    """Read whitespace-separated 1-based voxel index triples and convert to world mm.

    ``world = (index - 1) * spacing + origin`` using ``reference`` (a Volume3D or
    Grid3D). Landmarks stay valid under any resampling that keeps the physical
    frame, since they are returned in millimetres.
    """
    spacing = np.asarray(reference.spacing)
    origin = np.asarray(reference.origin)
    pts = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            idx = np.array([float(p) for p in parts])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: expected three numeric indices, got {line!r}") from None
        pts.append((idx - 1.0) * spacing + origin)
    return LandmarkSet(np.asarray(pts).reshape(-1, 3))


def load_dirlab_image(path, dims: Sequence[int], spacing: Sequence[float], origin=(0.0, 0.0, 0.0),
                      dtype="<i2") -> Volume3D:
    """Read a raw DIR-Lab ``.img`` (little-endian int16, x fastest)."""
    raw = np.fromfile(path, dtype=dtype)
    nx, ny, nz = dims
    if raw.size != nx * ny * nz:
        raise ValueError(f"{path}: expected {nx * ny * nz} voxels, found {raw.size}")
    data = raw.reshape(nz, ny, nx).transpose(2, 1, 0).astype(np.float64)
    return Volume3D(torch.from_numpy(np.ascontiguousarray(data)), tuple(spacing), tuple(origin))
