"""First-order optimizers over flat parameter tensors.

Objectives are closures ``f(x) -> (loss, grad)`` returning a Python float and
a tensor shaped like ``x``.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch

log = logging.getLogger(__name__)

Objective = Callable[[torch.Tensor], tuple[float, torch.Tensor]]


class DivergenceError(RuntimeError):
    """Loss became non-finite or grew far beyond its initial value."""


@dataclass
class OptimResult:
    x: torch.Tensor
    loss: float
    history: list[float] = field(default_factory=list)
    evaluations: int = 0
    converged: bool = False
    message: str = ""


def _converged(history: list[float], tol: float, window: int) -> bool:
    if len(history) <= window:
        return False
    old, new = history[-1 - window], history[-1]
    return abs(old - new) <= tol * max(abs(old), 1e-300)


def _check_finite(loss: float, where: str) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss during {where}")


def lbfgs(f: Objective, x0: torch.Tensor, *, history_size: int = 10, max_iters: int = 100,
          c1: float = 1e-4, shrink: float = 0.5, max_trials: int = 20, initial_step: float = 1.0,
          rel_tol: float = 1e-6, window: int = 5, grad_tol: float = 1e-12,
          callback: Optional[Callable[[int, float, torch.Tensor], None]] = None) -> OptimResult:
    """Limited-memory BFGS with backtracking Armijo line search.

    The first iteration (and any restart) takes a steepest-descent trial step
    whose largest component has magnitude ``initial_step``. When backtracking fails along the quasi-Newton
    direction the history is dropped and a steepest-descent step is tried; if
    that fails as well the run stops.
    """
    x = x0.detach().clone()
    loss, g = f(x)
    _check_finite(loss, "initial evaluation")
    evals = 1
    history = [loss]
    s_hist: deque = deque(maxlen=history_size)
    y_hist: deque = deque(maxlen=history_size)
    message = "max_iters reached"
    converged = False
    for it in range(max_iters):
        gnorm = float(g.norm())
        gmax = float(g.abs().max())
        if gnorm <= grad_tol:
            converged, message = True, "gradient below tolerance"
            break
        steepest = not s_hist
        d = -g / gmax * initial_step if steepest else _two_loop(g, s_hist, y_hist)
        slope = float((g * d).sum())
        if slope >= 0:
            s_hist.clear(); y_hist.clear()
            d, steepest = -g / gmax * initial_step, True
            slope = float((g * d).sum())
        accepted = _armijo(f, x, loss, d, slope, c1, shrink, max_trials)
        evals += accepted[3]
        if accepted[0] is None and not steepest:
            log.warning("line search failed along quasi-Newton direction; trying steepest descent")
            s_hist.clear(); y_hist.clear()
            d = -g / gmax * initial_step
            accepted = _armijo(f, x, loss, d, float((g * d).sum()), c1, shrink, max_trials)
            evals += accepted[3]
        if accepted[0] is None:
            message = "line search failed"
            log.warning("line search failed; stopping at iteration %d", it)
            break
        x_new, loss_new, g_new, _ = accepted
        s, y = x_new - x, g_new - g
        sy = float((s * y).sum())
        if sy > 1e-12 * float(y.norm() * s.norm()):
            s_hist.append(s); y_hist.append(y)
        x, loss, g = x_new, loss_new, g_new
        history.append(loss)
        if callback is not None:
            callback(it, loss, x)
        if _converged(history, rel_tol, window):
            converged, message = True, "relative loss change below tolerance"
            break
    return OptimResult(x, loss, history, evals, converged, message)


def _two_loop(g, s_hist, y_hist) -> torch.Tensor:
    q = g.clone()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / float((y * s).sum())
        a = rho * float((s * q).sum())
        q -= a * y
        alphas.append((rho, a))
    s, y = s_hist[-1], y_hist[-1]
    q *= float((s * y).sum()) / float((y * y).sum())
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * float((y * q).sum())
        q += (a - b) * s
    return -q


def _armijo(f, x, loss, d, slope, c1, shrink, max_trials):
    t = 1.0
    for trial in range(1, max_trials + 1):
        x_new = x + t * d
        loss_new, g_new = f(x_new)
        if math.isfinite(loss_new) and loss_new <= loss + c1 * t * slope:
            return x_new, loss_new, g_new, trial
        t *= shrink
    return None, None, None, max_trials


def gradient_descent(f: Objective, x0: torch.Tensor, *, learning_rate: float, max_iters: int = 200,
                     momentum: float = 0.0, rel_tol: float = 1e-6, window: int = 5,
                     divergence_factor: float = 1e3,
                     callback: Optional[Callable[[int, float, torch.Tensor], None]] = None) -> OptimResult:
    """Fixed-step (optionally heavy-ball) gradient descent returning the best iterate seen.

    Stochasticity, if any, lives in the objective (e.g. emitter subsampling).
    """
    x = x0.detach().clone()
    loss, g = f(x)
    _check_finite(loss, "initial evaluation")
    initial = loss
    best_x, best_loss = x.clone(), loss
    history = [loss]
    velocity = torch.zeros_like(x)
    message, converged = "max_iters reached", False
    for it in range(max_iters):
        velocity = momentum * velocity - learning_rate * g
        x = x + velocity
        loss, g = f(x)
        _check_finite(loss, f"iteration {it}")
        if loss > divergence_factor * max(abs(initial), 1e-300):
            raise DivergenceError(
                f"loss {loss:.4g} exceeds {divergence_factor:g}x the initial {initial:.4g} at iteration {it}; "
                "reduce the learning rate")
        history.append(loss)
        if loss < best_loss:
            best_x, best_loss = x.clone(), loss
        if callback is not None:
            callback(it, loss, x)
        if _converged(history, rel_tol, window):
            converged, message = True, "relative loss change below tolerance"
            break
    return OptimResult(best_x, best_loss, history, it + 2 if max_iters else 1, converged, message)


def adam(f: Objective, x0: torch.Tensor, *, learning_rate: float, max_iters: int = 200,
         betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-12, rel_tol: float = 0.0,
         window: int = 5, shrink: float = 0.5, min_learning_rate: float = 0.0,
         callback=None) -> OptimResult:
    """Adam with monotone acceptance.

    A candidate step that raises the loss is rejected and the learning rate is
    multiplied by ``shrink``; moments are only updated on accepted steps, so
    the loss history is non-increasing.
    """
    x = x0.detach().clone()
    loss, g = f(x)
    _check_finite(loss, "initial evaluation")
    evals = 1
    history = [loss]
    m = torch.zeros_like(x)
    v = torch.zeros_like(x)
    b1, b2 = betas
    lr = learning_rate
    t = 0
    message, converged = "max_iters reached", False
    for it in range(max_iters):
        m_new = b1 * m + (1 - b1) * g
        v_new = b2 * v + (1 - b2) * g * g
        mhat = m_new / (1 - b1 ** (t + 1))
        vhat = v_new / (1 - b2 ** (t + 1))
        x_new = x - lr * mhat / (vhat.sqrt() + eps)
        loss_new, g_new = f(x_new)
        evals += 1
        if not math.isfinite(loss_new) or loss_new > loss:
            lr *= shrink
            if lr <= min_learning_rate:
                message = "learning rate exhausted"
                break
            continue
        x, loss, g, m, v, t = x_new, loss_new, g_new, m_new, v_new, t + 1
        history.append(loss)
        if callback is not None:
            callback(it, loss, x)
        if rel_tol > 0 and _converged(history, rel_tol, window):
            converged, message = True, "relative loss change below tolerance"
            break
    return OptimResult(x, loss, history, evals, converged, message)
