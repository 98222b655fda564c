"""3D/2D registration in projection space (affine, then LDDMM shooting) and the 3D/3D baseline.

The energy is ``Reg(theta) + (lambda / n) * sum_i Sim(P_i[I0 o phi_inv], I1_i)``.
Both registration paths share the same machinery and differ only in the data
term: projected similarity for 3D/2D, volume similarity for 3D/3D.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .config import ConfigError, RegistrationConfig, StageConfig
from .geometry import Grid3D, ScanGeometry, Volume3D
from .optim import DivergenceError, gradient_descent, lbfgs
from .projector import ProjectionStack, project_stack_tensor
from .similarity import auto_ngf_epsilon, make_metric
from .transforms import (AffineParams, DeformationMap, InitialMap, MultiGaussianKernel, affine_map_tensor,
                         integrate_shooting, lddmm_regularizer, warp_tensor)

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class LossTerms:
    total: float
    sim: float
    reg: float

    def as_dict(self) -> dict:
        return {"total": self.total, "sim": self.sim, "reg": self.reg}


@dataclass
class RegistrationResult:
    """Outcome of one stage. ``params`` is :class:`AffineParams` or a momentum tensor ``(3, ...)``."""

    kind: str
    params: Union[AffineParams, torch.Tensor]
    phi: DeformationMap
    warped: Volume3D
    history: list[LossTerms] = field(default_factory=list)
    converged: bool = False
    message: str = ""
    kernel: Optional[MultiGaussianKernel] = None
    momentum_grid: Optional[Grid3D] = None
    initial: InitialMap = None
    num_timesteps: int = 10

    def recompute_map(self) -> DeformationMap:
        """Rebuild ``phi_inv(1)`` from the stored parameters."""
        if self.kind == "affine":
            return DeformationMap(affine_map_tensor(self.params.A, self.params.b,
                                                    self.phi.grid.coordinates(self.params.A.dtype)), self.phi.grid)
        with torch.no_grad():
            return integrate_shooting(self.params, self.kernel, self.momentum_grid, self.initial,
                                      self.num_timesteps, output_grid=self.phi.grid)


# ---------------------------------------------------------------------------
# data terms
# ---------------------------------------------------------------------------


class ProjectionDataTerm:
    """``(weight / n) * sum_i Sim(P_i[warped], target_i)`` over a chosen subset of emitters."""

    def __init__(self, targets: torch.Tensor, geom: ScanGeometry, grid: Grid3D, metric: Callable,
                 weight: float):
        if targets.shape[0] != geom.num_views:
            raise ValueError(f"stack has {targets.shape[0]} images but geometry has {geom.num_views} emitters")
        if tuple(targets.shape[1:]) != geom.receiver_pixels:
            raise ValueError("stack image size does not match the receiver")
        self.targets, self.geom, self.grid = targets, geom, grid
        self.metric, self.weight = metric, weight
        self.indices: Sequence[int] = range(geom.num_views)

    def __call__(self, warped: torch.Tensor) -> torch.Tensor:
        idx = list(self.indices)
        proj = project_stack_tensor(warped, self.grid, self.geom, idx)
        return self.weight * self.metric(proj, self.targets[idx]).mean()


class VolumeDataTerm:
    def __init__(self, target: torch.Tensor, metric: Callable, weight: float):
        self.target, self.metric, self.weight = target, metric, weight

    def __call__(self, warped: torch.Tensor) -> torch.Tensor:
        return self.weight * self.metric(warped, self.target)


def _stack_tensor(stack) -> torch.Tensor:
    return stack.images if isinstance(stack, ProjectionStack) else torch.as_tensor(stack)


def _resolve_epsilon(cfg: RegistrationConfig, reference: torch.Tensor, spacing) -> Optional[float]:
    if cfg.similarity != "ngf":
        return None
    if cfg.ngf_epsilon == "auto":
        return auto_ngf_epsilon(reference, spacing)
    return float(cfg.ngf_epsilon)


def projection_term(stack, geom: ScanGeometry, grid: Grid3D, cfg: RegistrationConfig, weight: float,
                    dtype=torch.float64) -> ProjectionDataTerm:
    targets = _stack_tensor(stack).to(dtype)
    eps = _resolve_epsilon(cfg, targets, geom.pixel_spacing)
    metric = make_metric(cfg.similarity, eps, geom.pixel_spacing, cfg.ngf_variant)
    return ProjectionDataTerm(targets, geom, grid, metric, weight)


def volume_term(target: Volume3D, cfg: RegistrationConfig, weight: float, dtype=torch.float64) -> VolumeDataTerm:
    t = target.data.to(dtype)
    eps = _resolve_epsilon(cfg, t, target.spacing)
    metric = make_metric(cfg.similarity, eps, target.spacing, cfg.ngf_variant)
    return VolumeDataTerm(t, metric, weight)


# ---------------------------------------------------------------------------
# affine model
# ---------------------------------------------------------------------------


class AffineObjective:
    """Affine energy in a centred, length-scaled parameterisation.

    Internally ``phi_inv(x) = A (x - c) + c + t`` with ``A = I + P / s``, so all
    twelve parameters are in millimetres; :meth:`to_params` converts to the
    canonical ``A x + b`` form.
    """

    def __init__(self, source: torch.Tensor, grid: Grid3D, data_term: Callable, reg_weight: float = 0.0):
        self.source, self.grid, self.data_term = source, grid, data_term
        self.reg_weight = reg_weight
        dtype = source.dtype
        self.coords = grid.coordinates(dtype)
        self.center = torch.tensor(grid.center, dtype=dtype)
        self.diag = math.sqrt(sum(e * e for e in grid.extent))
        self.scale = 0.5 * self.diag
        self.last = LossTerms(math.nan, math.nan, math.nan)

    def canonical(self, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        A = torch.eye(3, dtype=p.dtype) + p[:9].reshape(3, 3) / self.scale
        b = self.center + p[9:] - A @ self.center
        return A, b

    def from_params(self, params: AffineParams) -> torch.Tensor:
        A = params.A.to(self.source.dtype)
        t = params.b.to(self.source.dtype) + A @ self.center - self.center
        return torch.cat([((A - torch.eye(3, dtype=A.dtype)) * self.scale).reshape(-1), t])

    def to_params(self, p: torch.Tensor) -> AffineParams:
        A, b = self.canonical(p.detach())
        return AffineParams(A, b)

    def energy(self, A: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        phi = affine_map_tensor(A, b, self.coords)
        sim = self.data_term(warp_tensor(self.source, self.grid, phi))
        eye = torch.eye(3, dtype=A.dtype)
        reg = self.reg_weight * (((A - eye) ** 2).sum() + (b * b).sum() / self.diag ** 2)
        return reg + sim, sim, reg

    def __call__(self, p: torch.Tensor) -> tuple[float, torch.Tensor]:
        p = p.detach().requires_grad_(True)
        with torch.enable_grad():
            total, sim, reg = self.energy(*self.canonical(p))
            (grad,) = torch.autograd.grad(total, p)
        self.last = LossTerms(float(total.detach()), float(sim.detach()), float(reg.detach()))
        return self.last.total, grad


# ---------------------------------------------------------------------------
# LDDMM model
# ---------------------------------------------------------------------------


class LddmmObjective:
    """Shooting energy ``<theta, K theta> + data(I0 o phi0 o psi(theta))`` over flat momenta."""

    def __init__(self, source: torch.Tensor, grid: Grid3D, data_term: Callable, kernel: MultiGaussianKernel,
                 initial: InitialMap, num_timesteps: int = 10, grid_factor: int = 1):
        self.source, self.grid, self.data_term = source, grid, data_term
        self.kernel, self.initial, self.num_timesteps = kernel, initial, num_timesteps
        self.momentum_grid = grid.downsample(grid_factor)
        self.shape = (3, *self.momentum_grid.dims)
        self.last = LossTerms(math.nan, math.nan, math.nan)

    def energy(self, theta: torch.Tensor):
        phi = integrate_shooting(theta, self.kernel, self.momentum_grid, self.initial, self.num_timesteps,
                                 output_grid=self.grid)
        sim = self.data_term(warp_tensor(self.source, self.grid, phi.data))
        reg = lddmm_regularizer(theta, self.kernel, self.momentum_grid)
        return reg + sim, sim, reg

    def __call__(self, x: torch.Tensor) -> tuple[float, torch.Tensor]:
        theta = x.detach().reshape(self.shape).requires_grad_(True)
        with torch.enable_grad():
            total, sim, reg = self.energy(theta)
            (grad,) = torch.autograd.grad(total, theta)
        self.last = LossTerms(float(total.detach()), float(sim.detach()), float(reg.detach()))
        if not math.isfinite(self.last.total):
            raise DivergenceError("NaN loss in LDDMM objective")
        return self.last.total, grad.reshape(-1)


def _kernel_for(cfg: RegistrationConfig, grid: Grid3D) -> MultiGaussianKernel:
    if cfg.kernel.sigmas_mm is None:
        return MultiGaussianKernel.default_for(grid)
    return MultiGaussianKernel(cfg.kernel.sigmas_mm, cfg.kernel.weights)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def loss_3d2d(source: Volume3D, stack, geom: ScanGeometry, params: Union[AffineParams, torch.Tensor],
              cfg: Optional[RegistrationConfig] = None, *, stage: Optional[str] = None,
              kernel: Optional[MultiGaussianKernel] = None, initial: InitialMap = None):
    """Energy and parameter gradient of the projection-space registration problem.

    ``params`` is either :class:`AffineParams` (gradient returned as an
    ``AffineParams`` of ``(dA, db)``) or a momentum tensor on the LDDMM grid
    (gradient returned as a tensor of the same shape). Returns ``(LossTerms, grad)``.
    """
    cfg = cfg or RegistrationConfig()
    dtype = source.data.dtype
    grid = source.grid
    if isinstance(params, AffineParams):
        st = cfg.affine if stage is None else getattr(cfg, stage)
        term = projection_term(stack, geom, grid, cfg, st.sim_weight, dtype)
        obj = AffineObjective(source.data, grid, term, st.affine_reg_weight)
        A = params.A.detach().to(dtype).requires_grad_(True)
        b = params.b.detach().to(dtype).requires_grad_(True)
        with torch.enable_grad():
            total, sim, reg = obj.energy(A, b)
            gA, gb = torch.autograd.grad(total, (A, b))
        return LossTerms(float(total.detach()), float(sim.detach()), float(reg.detach())), AffineParams(gA, gb)
    st = cfg.lddmm if stage is None else getattr(cfg, stage)
    term = projection_term(stack, geom, grid, cfg, st.sim_weight, dtype)
    kernel = kernel or _kernel_for(cfg, grid)
    obj = LddmmObjective(source.data, grid, term, kernel, initial, cfg.kernel.num_timesteps, cfg.kernel.grid_factor)
    theta = torch.as_tensor(params).to(dtype)
    if tuple(theta.shape) != obj.shape:
        raise ValueError(f"momentum shape {tuple(theta.shape)} does not match LDDMM grid {obj.shape}")
    total, grad = obj(theta)
    return obj.last, grad.reshape(obj.shape)


def _masked(source: Volume3D, mask: Optional[Volume3D], dtype) -> torch.Tensor:
    data = source.data.to(dtype)
    if mask is not None:
        if mask.dims != source.dims:
            raise ValueError("mask and volume grids differ")
        data = data * (mask.data.to(dtype) > 0)
    return data


def _run_affine(source: torch.Tensor, grid: Grid3D, data_term, st: StageConfig, seed: int,
                initial: Optional[AffineParams] = None) -> RegistrationResult:
    obj = AffineObjective(source, grid, data_term, st.affine_reg_weight)
    x0 = obj.from_params(initial) if initial is not None else torch.zeros(12, dtype=source.dtype)
    obj(x0)
    history: list[LossTerms] = [obj.last]
    rng = np.random.default_rng(seed)
    n_views = getattr(data_term, "geom", None)
    n_views = n_views.num_views if n_views is not None else 0

    def f(x):
        if st.subsample and n_views and st.subsample < n_views:
            data_term.indices = sorted(rng.choice(n_views, st.subsample, replace=False).tolist())
        return obj(x)

    def record(it, loss, x):
        history.append(obj.last)

    if st.method == "sgd":
        res = gradient_descent(f, x0, learning_rate=st.learning_rate, max_iters=st.max_iters,
                               momentum=st.momentum, rel_tol=st.rel_tol, window=st.window, callback=record)
    else:
        if st.subsample:
            raise ConfigError("emitter subsampling requires method 'sgd'", "/optimizer/affine/subsample")
        res = lbfgs(f, x0, history_size=st.lbfgs_history, max_iters=st.max_iters, c1=st.c1, shrink=st.shrink,
                    max_trials=st.max_trials, initial_step=st.initial_step, rel_tol=st.rel_tol,
                    window=st.window, grad_tol=st.grad_tol, callback=record)
    if n_views:
        data_term.indices = range(n_views)
    params = obj.to_params(res.x)
    phi = DeformationMap(affine_map_tensor(params.A, params.b, grid.coordinates(source.dtype)), grid)
    warped = Volume3D(warp_tensor(source, grid, phi.data), grid.spacing, grid.origin)
    return RegistrationResult("affine", params, phi, warped, history, res.converged, res.message)


def _run_lddmm(source: torch.Tensor, grid: Grid3D, data_term, st: StageConfig, cfg: RegistrationConfig,
               initial: InitialMap) -> RegistrationResult:
    if st.method != "lbfgs":
        raise ConfigError("the LDDMM stage uses method 'lbfgs'", "/optimizer/lddmm/method")
    kernel = _kernel_for(cfg, grid)
    obj = LddmmObjective(source, grid, data_term, kernel, initial, cfg.kernel.num_timesteps, cfg.kernel.grid_factor)
    x0 = torch.zeros(int(np.prod(obj.shape)), dtype=source.dtype)
    history: list[LossTerms] = []

    def record(it, loss, x):
        history.append(obj.last)

    obj(x0)
    history.append(obj.last)
    res = lbfgs(obj, x0, history_size=st.lbfgs_history, max_iters=st.max_iters, c1=st.c1, shrink=st.shrink,
                max_trials=st.max_trials, initial_step=st.initial_step, rel_tol=st.rel_tol,
                window=st.window, grad_tol=st.grad_tol, callback=record)
    theta = res.x.reshape(obj.shape)
    with torch.no_grad():
        phi = integrate_shooting(theta, kernel, obj.momentum_grid, initial, cfg.kernel.num_timesteps,
                                 output_grid=grid)
        warped = Volume3D(warp_tensor(source, grid, phi.data), grid.spacing, grid.origin)
    return RegistrationResult("lddmm", theta, phi, warped, history, res.converged, res.message, kernel,
                              obj.momentum_grid, initial, cfg.kernel.num_timesteps)


def register_affine(source: Volume3D, stack, geom: ScanGeometry, cfg: Optional[RegistrationConfig] = None,
                    mask: Optional[Volume3D] = None) -> RegistrationResult:
    """Affine 3D/2D registration starting from the identity."""
    cfg = cfg or RegistrationConfig()
    dtype = DTYPES[cfg.dtype]
    src = _masked(source, mask, dtype)
    term = projection_term(stack, geom, source.grid, cfg, cfg.affine.sim_weight, dtype)
    return _run_affine(src, source.grid, term, cfg.affine, cfg.seed)


def register_lddmm(source: Volume3D, stack, geom: ScanGeometry, initial: InitialMap = None,
                   cfg: Optional[RegistrationConfig] = None, mask: Optional[Volume3D] = None) -> RegistrationResult:
    """LDDMM 3D/2D registration from zero momentum, composed after ``initial`` (identity if ``None``)."""
    cfg = cfg or RegistrationConfig()
    dtype = DTYPES[cfg.dtype]
    src = _masked(source, mask, dtype)
    term = projection_term(stack, geom, source.grid, cfg, cfg.lddmm.sim_weight, dtype)
    return _run_lddmm(src, source.grid, term, cfg.lddmm, cfg, _cast_initial(initial, dtype))


def register_3d3d(source: Volume3D, target: Volume3D, cfg: Optional[RegistrationConfig] = None,
                  stage: str = "lddmm", initial: InitialMap = None,
                  mask: Optional[Volume3D] = None) -> RegistrationResult:
    """Volume-to-volume registration with the same models and optimizers (no projector)."""
    cfg = cfg or RegistrationConfig()
    if source.dims != target.dims:
        raise ValueError("3D/3D registration needs volumes on the same grid")
    dtype = DTYPES[cfg.dtype]
    src = _masked(source, mask, dtype)
    st = getattr(cfg, stage)
    term = volume_term(target, cfg, st.sim_weight, dtype)
    if stage == "affine":
        return _run_affine(src, source.grid, term, st, cfg.seed,
                           initial if isinstance(initial, AffineParams) else None)
    return _run_lddmm(src, source.grid, term, st, cfg, _cast_initial(initial, dtype))


def register_3d2d(source: Volume3D, stack, geom: ScanGeometry, cfg: Optional[RegistrationConfig] = None,
                  stages: Sequence[str] = ("affine", "lddmm"),
                  mask: Optional[Volume3D] = None) -> dict[str, RegistrationResult]:
    """Affine pre-registration followed by LDDMM, as selected by ``stages``."""
    cfg = cfg or RegistrationConfig()
    out: dict[str, RegistrationResult] = {}
    initial = None
    if "affine" in stages:
        out["affine"] = register_affine(source, stack, geom, cfg, mask)
        initial = out["affine"].params
        log.info("affine stage: %s", out["affine"].message)
    if "lddmm" in stages:
        out["lddmm"] = register_lddmm(source, stack, geom, initial, cfg, mask)
        log.info("lddmm stage: %s", out["lddmm"].message)
    return out


def _cast_initial(initial: InitialMap, dtype) -> InitialMap:
    if isinstance(initial, AffineParams):
        return AffineParams(initial.A.to(dtype), initial.b.to(dtype))
    if isinstance(initial, DeformationMap):
        return DeformationMap(initial.data.to(dtype), initial.grid)
    return initial
