"""Image similarity terms used in projection space: NGF (primary), SSD and L1."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .autodiff import vjp
from .geometry import Image2D


@dataclass(frozen=True)
class NgfConfig:
    """``epsilon`` is the gradient-noise floor; ``variant`` is ``"squared"`` (1 - cos^2) or ``"linear"`` (1 - cos)."""

    epsilon: float
    variant: str = "squared"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("NGF epsilon must be positive")
        if self.variant not in ("squared", "linear"):
            raise ValueError(f"unknown NGF variant {self.variant!r}")


def _data(x):
    return x.data if isinstance(x, Image2D) else x


def _check(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def image_gradient(img: torch.Tensor, spacing=(1.0, 1.0)) -> tuple[torch.Tensor, ...]:
    """Central differences over the last ``len(spacing)`` axes (one-sided at edges; zero along singleton axes)."""
    k = len(spacing)
    out = []
    for a in range(k):
        dim = img.ndim - k + a
        if img.shape[dim] < 2:
            out.append(torch.zeros_like(img))
        else:
            out.append(torch.gradient(img, spacing=float(spacing[a]), dim=dim, edge_order=1)[0])
    return tuple(out)


def ngf_map(a: torch.Tensor, b: torch.Tensor, eps: float, spacing=(1.0, 1.0), variant: str = "squared") -> torch.Tensor:
    """Per-pixel NGF dissimilarity over the last ``len(spacing)`` axes (images or volumes, batched)."""
    ga = image_gradient(a, spacing)
    gb = image_gradient(b, spacing)
    e2 = eps * eps
    num = sum(x * y for x, y in zip(ga, gb)) + e2
    den = torch.sqrt((sum(x * x for x in ga) + e2) * (sum(y * y for y in gb) + e2))
    cos = num / den
    return 1.0 - cos * cos if variant == "squared" else 1.0 - cos


def _reduce_dims(spacing) -> tuple[int, ...]:
    return tuple(range(-len(spacing), 0))


def ngf_tensor(a, b, eps, spacing=(1.0, 1.0), variant="squared") -> torch.Tensor:
    return ngf_map(a, b, eps, spacing, variant).mean(dim=_reduce_dims(spacing))


def ngf(a, b, cfg: NgfConfig) -> torch.Tensor:
    """Mean NGF dissimilarity of two images, in ``[0, 1]`` for the squared variant."""
    spacing = a.spacing if isinstance(a, Image2D) else (1.0, 1.0)
    a, b = _data(a), _data(b)
    _check(a, b)
    return ngf_tensor(a, b, cfg.epsilon, spacing, cfg.variant)


def ngf_vjp(a, b, cfg: NgfConfig, upstream) -> torch.Tensor:
    spacing = a.spacing if isinstance(a, Image2D) else (1.0, 1.0)
    a, b = _data(a), _data(b)
    _check(a, b)
    return vjp(lambda x: ngf_tensor(x, b, cfg.epsilon, spacing, cfg.variant), (a,), upstream)[0]


def auto_ngf_epsilon(images: torch.Tensor, spacing=(1.0, 1.0), scale: float = 1e-2) -> float:
    """``scale`` times the 99th percentile of the gradient magnitude over a stack ``(n, nw, nh)`` or volume."""
    grads = image_gradient(images.detach(), spacing)
    mag = torch.sqrt(sum(g * g for g in grads)).reshape(-1)
    robust = float(torch.quantile(mag.float(), 0.99)) if mag.numel() <= 16_000_000 else float(mag.max())
    return scale * robust if robust > 0 else 1e-6


def ssd_tensor(a, b, ndim: int = 2) -> torch.Tensor:
    d = a - b
    return (d * d).mean(dim=tuple(range(-ndim, 0)))


def l1_tensor(a, b, smooth: float = 0.0, ndim: int = 2) -> torch.Tensor:
    """Mean absolute difference; the subgradient at zero residual is 0 unless ``smooth > 0``."""
    d = a - b
    if smooth > 0:
        return torch.sqrt(d * d + smooth * smooth).mean(dim=tuple(range(-ndim, 0)))
    return d.abs().mean(dim=tuple(range(-ndim, 0)))


def ssd(a, b) -> torch.Tensor:
    a, b = _data(a), _data(b)
    _check(a, b)
    return ssd_tensor(a, b)


def l1(a, b) -> torch.Tensor:
    a, b = _data(a), _data(b)
    _check(a, b)
    return l1_tensor(a, b)


def ssd_vjp(a, b, upstream) -> torch.Tensor:
    a, b = _data(a), _data(b)
    _check(a, b)
    return vjp(lambda x: ssd_tensor(x, b), (a,), upstream)[0]


def l1_vjp(a, b, upstream) -> torch.Tensor:
    a, b = _data(a), _data(b)
    _check(a, b)
    return vjp(lambda x: l1_tensor(x, b), (a,), upstream)[0]


def make_metric(name: str, epsilon: float | None = None, spacing=(1.0, 1.0), variant: str = "squared"):
    """Batched metric ``f(a, b) -> (...,)`` over the last ``len(spacing)`` axes."""
    ndim = len(spacing)
    if name == "ngf":
        if epsilon is None:
            raise ValueError("NGF needs an epsilon")
        return lambda a, b: ngf_tensor(a, b, epsilon, spacing, variant)
    if name == "ssd":
        return lambda a, b: ssd_tensor(a, b, ndim)
    if name == "l1":
        return lambda a, b: l1_tensor(a, b, ndim=ndim)
    raise ValueError(f"unknown similarity {name!r}")
