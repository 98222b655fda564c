"""Volume/image containers, coordinate conventions, trilinear sampling and scan geometry.

World coordinates are millimetres in the receiver-plane frame: the receiver
centre sits at the origin and its normal is +z. Volume arrays are indexed
``data[i, j, k]`` with ``i`` along x, ``j`` along y and ``k`` along z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

Vec3 = tuple[float, float, float]

DEFAULT_DTYPE = torch.float64


def _as_tensor(data, dtype=None) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        return data if dtype is None else data.to(dtype)
    return torch.as_tensor(np.asarray(data), dtype=dtype or DEFAULT_DTYPE)


@dataclass(frozen=True)
class Grid3D:
    """Sampling lattice of a volume: voxel counts, spacing (mm) and origin (mm)."""

    dims: tuple[int, int, int]
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"grid dims must be three positive ints, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> Vec3:
        """Physical size (mm) covered by voxel centres plus one voxel."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    @property
    def center(self) -> Vec3:
        return tuple(o + 0.5 * (n - 1) * s for o, n, s in zip(self.origin, self.dims, self.spacing))

    def coordinates(self, dtype=DEFAULT_DTYPE) -> torch.Tensor:
        """World coordinates of every voxel centre, shape ``(3, nx, ny, nz)``."""
        axes = [
            o + s * torch.arange(n, dtype=dtype)
            for n, s, o in zip(self.dims, self.spacing, self.origin)
        ]
        return torch.stack(torch.meshgrid(*axes, indexing="ij"))

    def downsample(self, factor: int) -> "Grid3D":
        """Coarser grid covering the same field of view (voxel blocks of ``factor``)."""
        if factor == 1:
            return self
        dims = tuple(max(1, math.ceil(n / factor)) for n in self.dims)
        spacing = tuple(s * factor for s in self.spacing)
        origin = tuple(o + 0.5 * (factor - 1) * s for o, s in zip(self.origin, self.spacing))
        return Grid3D(dims, spacing, origin)


@dataclass
class Volume3D:
    """Scalar voxel grid. ``data`` has shape ``(nx, ny, nz)``."""

    data: torch.Tensor
    spacing: Vec3 = (1.0, 1.0, 1.0)
    origin: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {tuple(self.data.shape)}")
        # Grid validates dims and spacing.
        self.spacing = self.grid.spacing
        self.origin = self.grid.origin

    @classmethod
    def zeros(cls, grid: Grid3D, dtype=DEFAULT_DTYPE) -> "Volume3D":
        return cls(torch.zeros(grid.dims, dtype=dtype), grid.spacing, grid.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def grid(self) -> Grid3D:
        return Grid3D(tuple(self.data.shape), self.spacing, self.origin)

    def with_data(self, data: torch.Tensor) -> "Volume3D":
        return Volume3D(data, self.spacing, self.origin)

    def world_to_voxel(self, p) -> torch.Tensor:
        return world_to_voxel(self, p)

    def voxel_to_world(self, q) -> torch.Tensor:
        return voxel_to_world(self, q)


@dataclass
class Image2D:
    """Scalar pixel image. ``data`` has shape ``(nw, nh)``."""

    data: torch.Tensor
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        self.data = _as_tensor(self.data)
        if self.data.ndim != 2:
            raise ValueError(f"image data must be 2D, got shape {tuple(self.data.shape)}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if min(self.data.shape) < 1 or min(self.spacing) <= 0:
            raise ValueError("image dims must be >= 1 and spacing > 0")

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.data.shape)


@dataclass
class LandmarkSet:
    """Points in world millimetres, shape ``(N, 3)``."""

    points: np.ndarray
    labels: Optional[list[str]] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        self.points = pts
        if self.labels is not None and len(self.labels) != len(pts):
            raise ValueError("labels and points differ in length")

    def __len__(self) -> int:
        return len(self.points)


def _spacing_origin(v):
    if isinstance(v, (Volume3D, Grid3D)):
        return v.spacing, v.origin
    raise TypeError(f"expected Volume3D or Grid3D, got {type(v).__name__}")


def world_to_voxel(v, p) -> torch.Tensor:
    """Continuous voxel coordinate ``(p - origin) / spacing``; ``p`` has a trailing axis of 3."""
    spacing, origin = _spacing_origin(v)
    p = _as_tensor(p)
    return (p - p.new_tensor(origin)) / p.new_tensor(spacing)


def voxel_to_world(v, q) -> torch.Tensor:
    spacing, origin = _spacing_origin(v)
    q = _as_tensor(q)
    return q * q.new_tensor(spacing) + q.new_tensor(origin)


# ---------------------------------------------------------------------------
# trilinear sampling
# ---------------------------------------------------------------------------

_CORNERS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def trilinear_weights(q: torch.Tensor, dims: Sequence[int], padding: str = "zeros"):
    """Flat corner indices and weights for trilinear interpolation.

    Parameters
    ----------
    q : Tensor
        Continuous voxel coordinates, shape ``(P, 3)``.
    dims : sequence of int
        Grid size ``(nx, ny, nz)``.
    padding : {"zeros", "border"}
        ``"zeros"`` gives out-of-grid corners weight zero; ``"border"`` clamps
        the query into the grid first.

    Returns
    -------
    index : LongTensor ``(8, P)``, weight : Tensor ``(8, P)``
        Weights are differentiable with respect to ``q``.
    """
    nx, ny, nz = dims
    if padding == "border":
        hi = q.new_tensor([nx - 1, ny - 1, nz - 1])
        q = torch.minimum(torch.clamp(q, min=0.0), hi)
    elif padding != "zeros":
        raise ValueError(f"unknown padding {padding!r}")
    base = torch.floor(q.detach())
    frac = q - base
    base = base.long()
    indices, weights = [], []
    for cx, cy, cz in _CORNERS:
        ix, iy, iz = base[:, 0] + cx, base[:, 1] + cy, base[:, 2] + cz
        wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
        wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
        wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
        w = wx * wy * wz
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
        w = torch.where(inside, w, torch.zeros_like(w))
        flat = (ix.clamp(0, nx - 1) * ny + iy.clamp(0, ny - 1)) * nz + iz.clamp(0, nz - 1)
        indices.append(flat)
        weights.append(w)
    return torch.stack(indices), torch.stack(weights)


def interpolate(data: torch.Tensor, q: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Trilinearly sample ``data`` (shape ``(*C, nx, ny, nz)``) at voxel coordinates ``q`` (``(..., 3)``).

    Returns shape ``(*C, ...)``. Differentiable in both ``data`` and ``q``.
    Uses ``grid_sample`` when every axis has at least two voxels, which
    implements the same zero/border conventions.
    """
    dims = data.shape[-3:]
    if min(dims) >= 2 and padding in ("zeros", "border"):
        return _interpolate_grid_sample(data, q, padding)
    return interpolate_reference(data, q, padding)


def _interpolate_grid_sample(data, q, padding):
    dims = data.shape[-3:]
    lead = data.shape[:-3]
    out_shape = q.shape[:-1]
    scale = q.new_tensor([2.0 / (dims[2] - 1), 2.0 / (dims[1] - 1), 2.0 / (dims[0] - 1)])
    g = q.reshape(1, -1, 1, 1, 3).flip(-1) * scale - 1.0
    src = data.reshape(1, -1, *dims)
    out = torch.nn.functional.grid_sample(src, g, mode="bilinear", padding_mode=padding, align_corners=True)
    return out.reshape(tuple(lead) + tuple(out_shape))


def interpolate_reference(data: torch.Tensor, q: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Gather-based trilinear sampling; same contract as :func:`interpolate`."""
    dims = data.shape[-3:]
    lead = data.shape[:-3]
    out_shape = q.shape[:-1]
    idx, w = trilinear_weights(q.reshape(-1, 3), dims, padding)
    flat = data.reshape(*lead, -1)
    vals = flat[..., idx]  # (*C, 8, P)
    out = (vals * w).sum(dim=-2)
    return out.reshape(tuple(lead) + tuple(out_shape))


def trilinear_sample(v: Volume3D, q) -> torch.Tensor:
    """Sample ``v`` at continuous voxel coordinate(s) ``q``; zero outside the grid."""
    q = _as_tensor(q, v.data.dtype)
    return interpolate(v.data, q)


def trilinear_sample_vjp(v: Volume3D, q, upstream):
    """Vector-Jacobian product of :func:`trilinear_sample` at a single point.

    Returns ``(corner_index, corner_grad, q_grad)`` where ``corner_index`` is
    the ``(8, 3)`` integer voxel index of each corner, ``corner_grad`` the
    ``(8,)`` gradient with respect to those voxel values (zero for corners
    outside the grid) and ``q_grad`` the 3-vector gradient with respect to ``q``.
    """
    q = _as_tensor(q, v.data.dtype).reshape(1, 3)
    up = float(upstream)
    base = torch.floor(q[0]).long()
    frac = q[0] - base.to(q.dtype)
    corner_index = torch.stack([base + base.new_tensor(c) for c in _CORNERS])
    corner_grad = torch.zeros(8, dtype=q.dtype)
    q_grad = torch.zeros(3, dtype=q.dtype)
    for n, c in enumerate(_CORNERS):
        idx = corner_index[n]
        if not all(0 <= int(idx[a]) < v.dims[a] for a in range(3)):
            continue
        f = [frac[a] if c[a] else 1.0 - frac[a] for a in range(3)]
        df = [1.0 if c[a] else -1.0 for a in range(3)]
        corner_grad[n] = up * f[0] * f[1] * f[2]
        value = v.data[tuple(int(i) for i in idx)]
        q_grad[0] += up * value * df[0] * f[1] * f[2]
        q_grad[1] += up * value * f[0] * df[1] * f[2]
        q_grad[2] += up * value * f[0] * f[1] * df[2]
    return corner_index, corner_grad, q_grad


# ---------------------------------------------------------------------------
# scan geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanGeometry:
    """Stationary emitter array above a planar receiver at ``z = 0``.

    ``emitters`` are world positions (mm) with ``e_z > 0``. Integration planes
    sit at ``z_k = plane_start + k * plane_spacing`` for ``k = 0 .. num_planes-1``.
    ``view_angles_deg`` optionally rotates the whole source/receiver assembly
    about an axis parallel to y through ``isocenter`` for each view; it is
    empty for the stationary design and only used to simulate wide arcs.
    """

    receiver_pixels: tuple[int, int]
    pixel_spacing: tuple[float, float]
    emitters: tuple[Vec3, ...]
    num_planes: int
    plane_spacing: float
    plane_start: float = 0.0
    view_angles_deg: tuple[float, ...] = ()
    isocenter: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "receiver_pixels", tuple(int(p) for p in self.receiver_pixels))
        object.__setattr__(self, "pixel_spacing", tuple(float(p) for p in self.pixel_spacing))
        object.__setattr__(self, "emitters", tuple(tuple(float(c) for c in e) for e in self.emitters))
        object.__setattr__(self, "view_angles_deg", tuple(float(a) for a in self.view_angles_deg))
        object.__setattr__(self, "isocenter", tuple(float(c) for c in self.isocenter))
        if not self.emitters:
            raise ValueError("geometry needs at least one emitter")
        for e in self.emitters:
            if len(e) != 3 or not all(math.isfinite(c) for c in e):
                raise ValueError(f"bad emitter position {e}")
            if e[2] <= 0:
                raise ValueError(f"emitter {e} is not above the receiver plane")
        if self.num_planes < 1:
            raise ValueError("num_planes must be >= 1")
        if self.plane_spacing <= 0:
            raise ValueError("plane_spacing must be positive")
        if min(self.receiver_pixels) < 1 or min(self.pixel_spacing) <= 0:
            raise ValueError("receiver needs positive pixel counts and spacing")
        if self.view_angles_deg and len(self.view_angles_deg) != len(self.emitters):
            raise ValueError("view_angles_deg must match the emitter count")

    @property
    def num_views(self) -> int:
        return len(self.emitters)

    @property
    def receiver_width(self) -> float:
        return self.receiver_pixels[0] * self.pixel_spacing[0]

    @property
    def receiver_height(self) -> float:
        return self.receiver_pixels[1] * self.pixel_spacing[1]

    @property
    def plane_positions(self) -> np.ndarray:
        return self.plane_start + self.plane_spacing * np.arange(self.num_planes)

    def pixel_centers(self) -> np.ndarray:
        """Receiver pixel centres ``(nw, nh, 3)`` on the plane ``z = 0``, centred on the origin."""
        nw, nh = self.receiver_pixels
        pw, ph = self.pixel_spacing
        w = (np.arange(nw) - 0.5 * (nw - 1)) * pw
        h = (np.arange(nh) - 0.5 * (nh - 1)) * ph
        ww, hh = np.meshgrid(w, h, indexing="ij")
        return np.stack([ww, hh, np.zeros_like(ww)], axis=-1)

    def view_rotation(self, index: int) -> np.ndarray:
        """Rotation taking receiver-frame points of view ``index`` into the volume frame."""
        if not self.view_angles_deg:
            return np.eye(3)
        a = math.radians(self.view_angles_deg[index])
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])

    def subset(self, indices: Sequence[int]) -> "ScanGeometry":
        """Geometry restricted to the given views, in the given order."""
        return ScanGeometry(
            self.receiver_pixels,
            self.pixel_spacing,
            tuple(self.emitters[i] for i in indices),
            self.num_planes,
            self.plane_spacing,
            self.plane_start,
            tuple(self.view_angles_deg[i] for i in indices) if self.view_angles_deg else (),
            self.isocenter,
        )


def arc_emitters(count: int, angle_range_deg: float, source_distance: float) -> list[Vec3]:
    """Emitters at ``(d tan a_i, 0, d)`` with ``a_i`` evenly spaced over ``[-A/2, A/2]``."""
    if count < 1:
        raise ValueError("emitter count must be >= 1")
    if not 0 <= angle_range_deg < 180:
        raise ValueError("arc angle range must lie in [0, 180)")
    half = 0.5 * angle_range_deg
    angles = [0.0] if count == 1 else np.linspace(-half, half, count)
    return [(source_distance * math.tan(math.radians(a)), 0.0, source_distance) for a in angles]
