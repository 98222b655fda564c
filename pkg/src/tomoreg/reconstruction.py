"""Iterative limited-angle reconstruction from a projection stack.

Minimises ``(1/n) sum_i L1(P_i[I], I_i) + l1 * mean(relu(-I)) + l2 * TV(I)``
from ``I = 0`` with a monotone Adam variant, back-propagating through the
projector adjoint.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import torch

from .autodiff import vjp
from .config import ReconConfig
from .geometry import Grid3D, ScanGeometry, Volume3D
from .optim import adam
from .projector import ProjectionStack, project_stack_tensor
from .similarity import l1_tensor

log = logging.getLogger(__name__)


def tv_norm_tensor(data: torch.Tensor, spacing, eps: float) -> torch.Tensor:
    """Mean over voxels of ``sqrt(|grad I|^2 + eps^2)``; forward differences, zero flux at the far faces."""
    sq = torch.zeros_like(data)
    for a in range(3):
        if data.shape[a] < 2:
            continue
        d = torch.diff(data, dim=a) / float(spacing[a])
        pad = [0, 0] * 3
        pad[2 * (2 - a) + 1] = 1  # append a zero difference on the last slice
        sq = sq + torch.nn.functional.pad(d, pad) ** 2
    return torch.sqrt(sq + eps * eps).mean()


def tv_norm(vol: Volume3D, eps: float = 1e-6) -> torch.Tensor:
    return tv_norm_tensor(vol.data, vol.spacing, eps)


def tv_norm_vjp(vol: Volume3D, eps: float, upstream) -> torch.Tensor:
    return vjp(lambda d: tv_norm_tensor(d, vol.spacing, eps), (vol.data,), upstream)[0]


def positivity_penalty_tensor(data: torch.Tensor) -> torch.Tensor:
    # same value as relu(-I), but the subgradient at I = 0 is -1 rather than 0, so
    # voxels sitting at zero resist being pushed negative
    return torch.where(data <= 0, -data, torch.zeros_like(data)).mean()


def positivity_penalty(vol: Volume3D) -> torch.Tensor:
    """Mean of ``max(-I, 0)``."""
    return positivity_penalty_tensor(vol.data)


def positivity_penalty_vjp(vol: Volume3D, upstream) -> torch.Tensor:
    return vjp(positivity_penalty_tensor, (vol.data,), upstream)[0]


@dataclass
class ReconResult:
    volume: Volume3D
    history: list[float] = field(default_factory=list)
    message: str = ""


class ReconObjective:
    def __init__(self, targets: torch.Tensor, geom: ScanGeometry, grid: Grid3D, cfg: ReconConfig, tv_eps: float):
        if targets.shape[0] != geom.num_views or tuple(targets.shape[1:]) != geom.receiver_pixels:
            raise ValueError("projection stack does not match the geometry")
        self.targets, self.geom, self.grid, self.cfg, self.tv_eps = targets, geom, grid, cfg, tv_eps

    def energy(self, data: torch.Tensor) -> torch.Tensor:
        proj = project_stack_tensor(data, self.grid, self.geom)
        loss = l1_tensor(proj, self.targets, self.cfg.l1_smoothing).mean()
        if self.cfg.lambda_positivity:
            loss = loss + self.cfg.lambda_positivity * positivity_penalty_tensor(data)
        if self.cfg.lambda_tv:
            loss = loss + self.cfg.lambda_tv * tv_norm_tensor(data, self.grid.spacing, self.tv_eps)
        return loss

    def __call__(self, x: torch.Tensor) -> tuple[float, torch.Tensor]:
        data = x.detach().reshape(self.grid.dims).requires_grad_(True)
        with torch.enable_grad():
            loss = self.energy(data)
            (grad,) = torch.autograd.grad(loss, data)
        return float(loss.detach()), grad.reshape(-1)


def intensity_scale(targets: torch.Tensor, geom: ScanGeometry) -> float:
    """Typical volume intensity: peak line integral divided by the integration depth."""
    depth = geom.num_planes * geom.plane_spacing
    peak = float(targets.abs().max())
    return peak / depth if peak > 0 else 1.0


def reconstruct(stack, geom: ScanGeometry, grid: Grid3D, cfg: Optional[ReconConfig] = None,
                callback=None) -> ReconResult:
    """Reconstruct a volume on ``grid`` from ``stack`` (one image per emitter), starting from zero."""
    cfg = cfg or ReconConfig()
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    targets = (stack.images if isinstance(stack, ProjectionStack) else torch.as_tensor(stack)).to(dtype)
    scale = intensity_scale(targets, geom)
    tv_eps = 1e-6 * scale if cfg.tv_epsilon == "auto" else float(cfg.tv_epsilon)
    lr = 2e-2 * scale if cfg.learning_rate == "auto" else float(cfg.learning_rate)
    obj = ReconObjective(targets, geom, grid, cfg, tv_eps)
    x0 = torch.zeros(int(torch.Size(grid.dims).numel()), dtype=dtype)
    res = adam(obj, x0, learning_rate=lr, max_iters=cfg.max_iters, rel_tol=cfg.rel_tol,
               min_learning_rate=lr * 1e-6, callback=callback)
    if not math.isfinite(res.loss):
        raise FloatingPointError("reconstruction produced a non-finite loss")
    vol = Volume3D(res.x.reshape(grid.dims), grid.spacing, grid.origin)
    return ReconResult(vol, res.history, res.message)
