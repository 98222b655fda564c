"""Reverse-mode helpers: every differentiable operation exposes its VJP through :func:`vjp`."""

from __future__ import annotations

from typing import Callable, Sequence

import torch


def vjp(fn: Callable, inputs: Sequence[torch.Tensor], upstream) -> tuple[torch.Tensor, ...]:
    """Vector-Jacobian products of ``fn(*inputs)`` with ``upstream``.

    Inputs are detached copies, so callers' tensors are never modified. Inputs
    that do not influence the output get a zero gradient.
    """
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    with torch.enable_grad():
        out = fn(*xs)
        up = torch.as_tensor(upstream, dtype=out.dtype)
        grads = torch.autograd.grad(out, xs, grad_outputs=up.expand_as(out), allow_unused=True)
    return tuple(torch.zeros_like(x) if g is None else g for x, g in zip(xs, grads))


def central_difference_jacobian(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                                step: float = 1e-6) -> torch.Tensor:
    """Dense Jacobian ``(out.numel(), x.numel())`` by central differences; test oracle for small problems."""
    x = x.detach()
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.numel()):
        d = torch.zeros_like(flat)
        d[i] = step
        hi = fn((flat + d).reshape(x.shape)).reshape(-1)
        lo = fn((flat - d).reshape(x.shape)).reshape(-1)
        cols.append((hi - lo) / (2 * step))
    return torch.stack(cols, dim=1)
