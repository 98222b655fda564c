"""Ray-cast DRR generation for a stationary emitter array, with its exact adjoint.

For a receiver pixel ``p`` and emitter ``e`` the ray ``x = e + lam * r_hat``,
``r = p - e``, is intersected with the integration planes ``z = z_k`` that lie
between the receiver and the emitter. The volume is sampled trilinearly at
each intersection and the samples are summed with the weight
``dz * plane_spacing`` where ``dz = ||r / (r . n)||`` is the secant of the
incidence angle.

Because the sample points do not depend on the volume, each view is a fixed
sparse linear map. It is assembled once per (geometry, grid, view) and cached;
the adjoint is the transpose of the same matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import torch

from .geometry import Grid3D, Image2D, ScanGeometry, Volume3D, trilinear_weights

PLANE_NORMAL = np.array([0.0, 0.0, 1.0])


class GeometryError(ValueError):
    """Raised for rays that cannot be cast (e.g. parallel to the integration planes)."""


@dataclass
class RayBundle:
    """Per-pixel rays of one emitter.

    ``directions`` has shape ``(nw, nh, 3)`` (unit vectors), ``dz`` shape
    ``(nw, nh)`` (secant factor, >= 1).
    """

    emitter: np.ndarray
    pixels: np.ndarray
    directions: np.ndarray
    dz: np.ndarray
    planes: np.ndarray
    plane_spacing: float

    def intersections(self) -> np.ndarray:
        """Ray/plane intersection points, shape ``(nw, nh, Z, 3)``, for planes below the emitter."""
        e = self.emitter
        planes = self.planes[self.planes < e[2]]
        r_dot_n = self.directions @ PLANE_NORMAL  # (nw, nh)
        x_z = np.stack([np.zeros_like(planes), np.zeros_like(planes), planes], axis=-1)
        lam = ((x_z - e) @ PLANE_NORMAL)[None, None, :] / r_dot_n[..., None]
        return e + lam[..., None] * self.directions[:, :, None, :]


def build_rays(geom: ScanGeometry, emitter_index: int) -> RayBundle:
    if not 0 <= emitter_index < geom.num_views:
        raise IndexError(f"emitter index {emitter_index} out of range for {geom.num_views} emitters")
    e = np.asarray(geom.emitters[emitter_index], dtype=np.float64)
    pixels = geom.pixel_centers()
    r = pixels - e
    r_dot_n = r @ PLANE_NORMAL
    if np.any(r_dot_n == 0):
        raise GeometryError(f"emitter {tuple(e)} casts rays parallel to the integration planes")
    norm = np.linalg.norm(r, axis=-1)
    directions = r / norm[..., None]
    dz = np.linalg.norm(r / r_dot_n[..., None], axis=-1)
    return RayBundle(e, pixels, directions, dz, geom.plane_positions, geom.plane_spacing)


@lru_cache(maxsize=96)
def system_matrix(geom: ScanGeometry, grid: Grid3D, emitter_index: int) -> sp.csr_matrix:
    """Sparse ``(nw*nh, nx*ny*nz)`` matrix mapping a flattened volume to one DRR."""
    rays = build_rays(geom, emitter_index)
    pts = rays.intersections()  # (nw, nh, Z', 3)
    nw, nh = geom.receiver_pixels
    npix = nw * nh
    nvox = int(np.prod(grid.dims))
    if pts.shape[2] == 0:
        return sp.csr_matrix((npix, nvox))
    rot = geom.view_rotation(emitter_index)
    if not np.array_equal(rot, np.eye(3)):
        c = np.asarray(geom.isocenter)
        pts = (pts - c) @ rot.T + c
    q = (pts - np.asarray(grid.origin)) / np.asarray(grid.spacing)
    nplanes = pts.shape[2]
    with torch.no_grad():
        idx, w = trilinear_weights(torch.from_numpy(q.reshape(-1, 3)), grid.dims)
    idx, w = idx.numpy(), w.numpy()
    scale = np.repeat((rays.dz * rays.plane_spacing).reshape(-1), nplanes)
    rows = np.repeat(np.arange(npix), nplanes)
    keep = w > 0
    vals = (w * scale)[keep]
    rows = np.broadcast_to(rows, w.shape)[keep]
    cols = idx[keep]
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(npix, nvox)).tocsr()
    mat.sum_duplicates()
    return mat


def _transposed(geom: ScanGeometry, grid: Grid3D, emitter_index: int):
    return system_matrix(geom, grid, emitter_index).T  # CSC view, no copy


class _Project(torch.autograd.Function):
    @staticmethod
    def forward(ctx, data, geom, grid, index):
        ctx.geom, ctx.grid, ctx.index = geom, grid, index
        mat = system_matrix(geom, grid, index)
        flat = data.detach().reshape(-1).numpy()
        out = mat @ flat
        return torch.from_numpy(out.astype(flat.dtype, copy=False)).reshape(geom.receiver_pixels)

    @staticmethod
    def backward(ctx, grad):
        mat_t = _transposed(ctx.geom, ctx.grid, ctx.index)
        g = grad.detach().reshape(-1).numpy()
        out = mat_t @ g
        return torch.from_numpy(out.astype(g.dtype, copy=False)).reshape(ctx.grid.dims), None, None, None


def project_tensor(data: torch.Tensor, grid: Grid3D, geom: ScanGeometry, emitter_index: int) -> torch.Tensor:
    """Differentiable DRR of a raw ``(nx, ny, nz)`` tensor on ``grid``; returns ``(nw, nh)``."""
    if tuple(data.shape) != grid.dims:
        raise ValueError(f"data shape {tuple(data.shape)} does not match grid {grid.dims}")
    return _Project.apply(data.contiguous(), geom, grid, emitter_index)


def project_stack_tensor(data: torch.Tensor, grid: Grid3D, geom: ScanGeometry,
                         indices: Sequence[int] | None = None) -> torch.Tensor:
    indices = range(geom.num_views) if indices is None else indices
    return torch.stack([project_tensor(data, grid, geom, i) for i in indices])


def project(vol: Volume3D, geom: ScanGeometry, emitter_index: int) -> Image2D:
    """DRR of ``vol`` for one emitter."""
    with torch.no_grad():
        img = project_tensor(vol.data, vol.grid, geom, emitter_index)
    return Image2D(img, geom.pixel_spacing)


def project_vjp(vol: Volume3D, geom: ScanGeometry, emitter_index: int, upstream) -> torch.Tensor:
    """Adjoint of :func:`project` applied to ``upstream``; returns a volume-shaped tensor."""
    u = upstream.data if isinstance(upstream, Image2D) else torch.as_tensor(upstream)
    if tuple(u.shape) != geom.receiver_pixels:
        raise ValueError(f"upstream shape {tuple(u.shape)} does not match receiver {geom.receiver_pixels}")
    mat_t = _transposed(geom, vol.grid, emitter_index)
    g = u.detach().to(vol.data.dtype).reshape(-1).numpy()
    return torch.from_numpy(mat_t @ g).to(vol.data.dtype).reshape(vol.dims)


@dataclass
class ProjectionStack:
    """Ordered DRRs, one per emitter. ``images`` has shape ``(n, nw, nh)``."""

    images: torch.Tensor
    spacing: tuple[float, float]

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Image2D:
        return Image2D(self.images[i], self.spacing)


def project_stack(vol: Volume3D, geom: ScanGeometry) -> ProjectionStack:
    with torch.no_grad():
        imgs = project_stack_tensor(vol.data, vol.grid, geom)
    return ProjectionStack(imgs, geom.pixel_spacing)


def clear_cache() -> None:
    system_matrix.cache_clear()
