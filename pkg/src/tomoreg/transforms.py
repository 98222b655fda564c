"""Affine and LDDMM (geodesic shooting) transformation models.

Maps follow the pull-back convention: a :class:`DeformationMap` stores, for
every point ``x`` of the target grid, the source location ``phi_inv(x)`` in
world millimetres, and warping reads ``out(x) = vol(phi_inv(x))``.

All functions are written with differentiable torch operations; their VJPs
are obtained through :func:`tomoreg.autodiff.vjp` (see the ``*_vjp`` helpers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Union

import numpy as np
import torch

from .autodiff import vjp
from .geometry import DEFAULT_DTYPE, Grid3D, Volume3D, interpolate


class SingularTransformError(ValueError):
    pass


@dataclass
class AffineParams:
    """``phi_inv(x) = A x + b`` with ``A`` 3x3 and ``b`` in mm."""

    A: torch.Tensor = field(default_factory=lambda: torch.eye(3, dtype=DEFAULT_DTYPE))
    b: torch.Tensor = field(default_factory=lambda: torch.zeros(3, dtype=DEFAULT_DTYPE))

    def __post_init__(self):
        self.A = torch.as_tensor(self.A, dtype=DEFAULT_DTYPE) if not isinstance(self.A, torch.Tensor) else self.A
        self.b = torch.as_tensor(self.b, dtype=DEFAULT_DTYPE) if not isinstance(self.b, torch.Tensor) else self.b
        if self.A.shape != (3, 3) or self.b.shape != (3,):
            raise ValueError("affine needs A of shape (3, 3) and b of shape (3,)")

    @classmethod
    def identity(cls, dtype=DEFAULT_DTYPE) -> "AffineParams":
        return cls(torch.eye(3, dtype=dtype), torch.zeros(3, dtype=dtype))

    def check(self, tol: float = 1e-12) -> None:
        if abs(float(torch.linalg.det(self.A.detach()))) <= tol:
            raise SingularTransformError("affine matrix is singular")

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Apply to points with a trailing axis of 3."""
        return points @ self.A.T + self.b

    def to_dict(self) -> dict:
        return {"A": self.A.detach().tolist(), "b": self.b.detach().tolist()}


@dataclass
class DeformationMap:
    """Dense map, ``data`` shape ``(3, nx, ny, nz)`` holding world coordinates (mm)."""

    data: torch.Tensor
    grid: Grid3D

    def __post_init__(self):
        if tuple(self.data.shape) != (3, *self.grid.dims):
            raise ValueError(f"map shape {tuple(self.data.shape)} does not match grid {self.grid.dims}")

    @classmethod
    def identity(cls, grid: Grid3D, dtype=DEFAULT_DTYPE) -> "DeformationMap":
        return cls(grid.coordinates(dtype), grid)

    @property
    def displacement(self) -> torch.Tensor:
        return self.data - self.grid.coordinates(self.data.dtype)

    def __call__(self, points) -> torch.Tensor:
        """Evaluate at world points ``(N, 3)`` by trilinear interpolation of the displacement.

        Points outside the grid raise ``ValueError``.
        """
        pts = torch.as_tensor(np.asarray(points, dtype=np.float64), dtype=self.data.dtype).reshape(-1, 3)
        q = (pts - pts.new_tensor(self.grid.origin)) / pts.new_tensor(self.grid.spacing)
        hi = q.new_tensor(self.grid.dims) - 1
        tol = 1e-9
        if torch.any(q < -tol) or torch.any(q > hi + tol):
            raise ValueError("point lies outside the map domain")
        disp = interpolate(self.displacement, q, padding="border")  # (3, N)
        return pts + disp.T


@dataclass(frozen=True)
class MultiGaussianKernel:
    """Weighted sum of isotropic Gaussians, ``sigmas`` in mm (strictly increasing), weights summing to 1."""

    sigmas: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not self.sigmas or len(self.sigmas) != len(self.weights):
            raise ValueError("need matching, non-empty sigmas and weights")
        if any(s <= 0 for s in self.sigmas) or any(b <= a for a, b in zip(self.sigmas, self.sigmas[1:])):
            raise ValueError("sigmas must be positive and strictly increasing")
        if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")

    @classmethod
    def default_for(cls, grid: Grid3D) -> "MultiGaussianKernel":
        shortest = min(grid.extent)
        return cls(tuple(f * shortest for f in (0.05, 0.10, 0.20)), (0.2, 0.3, 0.5))


# ---------------------------------------------------------------------------
# affine maps and warping
# ---------------------------------------------------------------------------


def affine_to_map(p: AffineParams, grid: Grid3D) -> DeformationMap:
    p.check()
    x = grid.coordinates(p.A.dtype)
    return DeformationMap(affine_map_tensor(p.A, p.b, x), grid)


def affine_map_tensor(A: torch.Tensor, b: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """``A x + b`` over a coordinate tensor ``(3, ...)``; differentiable in ``A`` and ``b``."""
    shape = coords.shape
    out = A @ coords.reshape(3, -1) + b[:, None]
    return out.reshape(shape)


def warp_tensor(src: torch.Tensor, src_grid: Grid3D, map_data: torch.Tensor) -> torch.Tensor:
    """``src(map(x))`` for a raw source tensor; zero outside the source grid."""
    q = (map_data.movedim(0, -1) - map_data.new_tensor(src_grid.origin)) / map_data.new_tensor(src_grid.spacing)
    return interpolate(src, q)


def warp(vol: Volume3D, phi: DeformationMap) -> Volume3D:
    out = warp_tensor(vol.data, vol.grid, phi.data)
    return Volume3D(out, phi.grid.spacing, phi.grid.origin)


def warp_vjp(vol: Volume3D, phi: DeformationMap, upstream):
    """Gradients of ``<warp(vol, phi), upstream>`` w.r.t. the source data and the map."""
    return vjp(lambda d, m: warp_tensor(d, vol.grid, m), (vol.data, phi.data), upstream)


def compose_displacement(disp: torch.Tensor, grid: Grid3D, points: torch.Tensor) -> torch.Tensor:
    """Evaluate ``id + disp`` at world points ``(3, ...)``, clamping displacement lookups to the grid."""
    q = (points.movedim(0, -1) - points.new_tensor(grid.origin)) / points.new_tensor(grid.spacing)
    return points + interpolate(disp, q, padding="border")


def resample_map(phi: DeformationMap, grid: Grid3D) -> DeformationMap:
    """Interpolate a map onto another grid (displacements interpolated, clamped at the border)."""
    if phi.grid == grid:
        return phi
    x = grid.coordinates(phi.data.dtype)
    return DeformationMap(compose_displacement(phi.displacement, phi.grid, x), grid)


# ---------------------------------------------------------------------------
# multi-Gaussian smoothing
# ---------------------------------------------------------------------------


def gaussian_taps(sigma_vox: float) -> np.ndarray:
    """Sampled Gaussian truncated at radius ``ceil(4 sigma)``, normalised to unit sum."""
    radius = max(1, int(math.ceil(4.0 * sigma_vox)))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (k / sigma_vox) ** 2)
    return taps / taps.sum()


def _fast_len(n: int) -> int:
    while True:
        m = n
        for p in (2, 3, 5):
            while m % p == 0:
                m //= p
        if m == 1:
            return n
        n += 1


@lru_cache(maxsize=16)
def _kernel_spectrum(dims: tuple, spacing: tuple, kernel: MultiGaussianKernel, dtype: torch.dtype):
    per_sigma = [[gaussian_taps(s / h) for h in spacing] for s in kernel.sigmas]
    radius = [max(len(t[a]) // 2 for t in per_sigma) for a in range(3)]
    sizes = tuple(_fast_len(n + r) for n, r in zip(dims, radius))
    spec = None
    for w, taps in zip(kernel.weights, per_sigma):
        axes_spec = []
        for a in range(3):
            t = taps[a]
            r = len(t) // 2
            circ = np.zeros(sizes[a])
            for off, val in zip(range(-r, r + 1), t):
                circ[off % sizes[a]] += val
            axes_spec.append(np.fft.fft(circ).real)  # symmetric taps -> real spectrum
        s = w * np.einsum("i,j,k->ijk", axes_spec[0], axes_spec[1], axes_spec[2][: sizes[2] // 2 + 1])
        spec = s if spec is None else spec + s
    return torch.from_numpy(spec).to(dtype), sizes


def kernel_smooth(field: torch.Tensor, kernel: MultiGaussianKernel, spacing) -> torch.Tensor:
    """Channelwise multi-Gaussian convolution of ``field`` ``(*C, nx, ny, nz)`` with zero padding."""
    dims = tuple(field.shape[-3:])
    spec, sizes = _kernel_spectrum(dims, tuple(float(s) for s in spacing), kernel, field.dtype)
    f = torch.fft.rfftn(field, s=sizes, dim=(-3, -2, -1))
    out = torch.fft.irfftn(f * spec, s=sizes, dim=(-3, -2, -1))
    return out[..., : dims[0], : dims[1], : dims[2]]


def kernel_smooth_vjp(field: torch.Tensor, kernel: MultiGaussianKernel, spacing, upstream):
    return vjp(lambda f: kernel_smooth(f, kernel, spacing), (field,), upstream)[0]


def lddmm_regularizer(theta: torch.Tensor, kernel: MultiGaussianKernel, grid: Grid3D) -> torch.Tensor:
    """``<theta, K * theta>`` integrated over the grid (voxel volume included)."""
    return (theta * kernel_smooth(theta, kernel, grid.spacing)).sum() * grid.voxel_volume


# ---------------------------------------------------------------------------
# EPDiff shooting
# ---------------------------------------------------------------------------


def spatial_gradient(f: torch.Tensor, spacing) -> list[torch.Tensor]:
    """Derivatives of ``f`` (``(*C, nx, ny, nz)``) along x, y, z in mm.

    Central differences inside, one-sided at the boundary; zero along singleton axes.
    """
    out = []
    for a in range(3):
        dim = f.ndim - 3 + a
        if f.shape[dim] < 2:
            out.append(torch.zeros_like(f))
        else:
            out.append(torch.gradient(f, spacing=float(spacing[a]), dim=dim, edge_order=1)[0])
    return out


def epdiff_rhs(m: torch.Tensor, v: torch.Tensor, spacing) -> torch.Tensor:
    """Time derivative of momentum: ``-(div(v) m + Dv^T m + Dm v)``."""
    dv = spatial_gradient(v, spacing)  # dv[j][i] = d v_i / d x_j
    dm = spatial_gradient(m, spacing)
    div_v = dv[0][0] + dv[1][1] + dv[2][2]
    dvt_m = torch.stack([sum(dv[i][j] * m[j] for j in range(3)) for i in range(3)])
    dm_v = sum(dm[j] * v[j] for j in range(3))
    return -(div_v * m + dvt_m + dm_v)


def epdiff_step(m: torch.Tensor, v: torch.Tensor, dt: float, spacing) -> torch.Tensor:
    """One explicit Euler step of EPDiff."""
    return m + dt * epdiff_rhs(m, v, spacing)


def epdiff_step_vjp(m, v, dt, spacing, upstream):
    return vjp(lambda a, b: epdiff_step(a, b, dt, spacing), (m, v), upstream)


InitialMap = Union[AffineParams, DeformationMap, None]


def shoot(theta: torch.Tensor, kernel: MultiGaussianKernel, grid: Grid3D, num_steps: int = 10) -> torch.Tensor:
    """Integrate EPDiff and the map advection from the identity; returns ``psi(1)`` as ``(3, nx, ny, nz)``.

    Each step advects the map semi-Lagrangianly, ``psi <- psi o (x - dt v)``,
    then updates ``m`` with one Euler step and recomputes ``v = K * m``.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    dt = 1.0 / num_steps
    x = grid.coordinates(theta.dtype)
    disp = torch.zeros_like(x)
    m = theta
    v = kernel_smooth(m, kernel, grid.spacing)
    for step in range(num_steps):
        disp = compose_displacement(disp, grid, x - dt * v) - x
        if step + 1 < num_steps:
            m = epdiff_step(m, v, dt, grid.spacing)
            v = kernel_smooth(m, kernel, grid.spacing)
    return x + disp


def compose_initial(initial: InitialMap, psi: torch.Tensor) -> torch.Tensor:
    """``phi0 o psi`` for an affine, dense, or absent initial map."""
    if initial is None:
        return psi
    if isinstance(initial, AffineParams):
        return affine_map_tensor(initial.A.to(psi.dtype), initial.b.to(psi.dtype), psi)
    return compose_displacement(initial.displacement.to(psi.dtype), initial.grid, psi)


def integrate_shooting(theta: torch.Tensor, kernel: MultiGaussianKernel, grid: Grid3D,
                       initial: InitialMap = None, num_steps: int = 10,
                       output_grid: Optional[Grid3D] = None) -> DeformationMap:
    """``phi_inv(1) = phi_inv(0) o psi(1)`` where ``psi`` is shot from momentum ``theta``.

    ``theta`` lives on ``grid``; when ``output_grid`` is finer, ``psi`` is
    interpolated onto it before composing with the initial map.
    """
    out_grid = output_grid or grid
    psi = shoot(theta, kernel, grid, num_steps)
    if out_grid != grid:
        x = out_grid.coordinates(theta.dtype)
        psi = compose_displacement(psi - grid.coordinates(theta.dtype), grid, x)
    return DeformationMap(compose_initial(initial, psi), out_grid)


def integrate_shooting_vjp(theta, kernel, grid, upstream, initial: InitialMap = None, num_steps: int = 10):
    return vjp(lambda t: integrate_shooting(t, kernel, grid, initial, num_steps).data, (theta,), upstream)[0]


def jacobian_determinant(phi: DeformationMap) -> torch.Tensor:
    """Determinant of ``D phi`` at every voxel (central differences, one-sided at the border)."""
    d = spatial_gradient(phi.data, phi.grid.spacing)  # d[j][i] = d phi_i / d x_j
    a = [[d[j][i] for j in range(3)] for i in range(3)]
    return (a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]))
