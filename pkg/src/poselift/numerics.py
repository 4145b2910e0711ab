"""Differentiable tensor primitives, Adam, and finite-difference gradient checks.

Tensors are plain ``torch.Tensor`` objects; torch's define-by-run autograd
tape is rebuilt on every forward pass. The helpers here pin down the few
places where the conventions used across the package differ from torch's
defaults (leaky-ReLU slope, clamp gradient at the boundary, shape errors),
and provide the optimizer and gradient-check harness.
"""

from __future__ import annotations

import contextlib
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch

LEAKY_SLOPE = 0.01

_PRECISION = {32: torch.float32, 64: torch.float64}


class ShapeError(ValueError):
    """Operands of a binary op cannot be broadcast together."""


class NonFiniteGradient(FloatingPointError):
    """A parameter gradient contained NaN or inf; the optimizer step was skipped."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter '{name}'")
        self.name = name


def dtype_for(bits: int) -> torch.dtype:
    try:
        return _PRECISION[bits]
    except KeyError:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}") from None


@contextlib.contextmanager
def precision(bits: int) -> Iterator[torch.dtype]:
    """Temporarily switch torch's default floating dtype."""
    old = torch.get_default_dtype()
    dt = dtype_for(bits)
    torch.set_default_dtype(dt)
    try:
        yield dt
    finally:
        torch.set_default_dtype(old)


def configure_threads() -> int:
    """Apply ``POSELIFT_THREADS`` (if set) and return the active thread count."""
    n = os.environ.get("POSELIFT_THREADS")
    if n:
        torch.set_num_threads(int(n))
    return torch.get_num_threads()


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)


# ---------------------------------------------------------------------------
# tape ops
# ---------------------------------------------------------------------------

def _check_broadcast(a: torch.Tensor, b: torch.Tensor, op: str) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise ShapeError(
            f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} are not compatible"
        ) from None


def add(a, b):
    _check_broadcast(a, b, "add")
    return a + b


def sub(a, b):
    _check_broadcast(a, b, "sub")
    return a - b


def mul(a, b):
    _check_broadcast(a, b, "mul")
    return a * b


def div(a, b):
    _check_broadcast(a, b, "div")
    return a / b


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(
            f"matmul: shapes {tuple(a.shape)} and {tuple(b.shape)} have mismatched inner dims"
        )
    return a @ b


exp = torch.exp
log = torch.log
sqrt = torch.sqrt
relu = torch.relu


def sum_(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim)


def mean(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    return x.mean() if dim is None else x.mean(dim=dim, keepdim=keepdim)


def l1_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return x.abs().sum(dim=dim)


def l2_norm(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.sqrt((x * x).sum(dim=dim))


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    return torch.nn.functional.leaky_relu(x, negative_slope=slope)


def clamp_min(x: torch.Tensor, lo: float) -> torch.Tensor:
    """``max(x, lo)`` whose gradient is zero wherever the clamp is active.

    torch's own clamp lets the gradient through at ``x == lo``; here the
    boundary belongs to the clamped region.
    """
    return torch.where(x > lo, x, torch.full_like(x, lo))


def concat(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat(list(parts), dim=-1)


def split(x: torch.Tensor, sizes: Sequence[int]) -> tuple[torch.Tensor, ...]:
    if sum(sizes) != x.shape[-1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to last dim of {tuple(x.shape)}")
    return torch.split(x, list(sizes), dim=-1)


def gather(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Select entries along the last dim."""
    return x.index_select(-1, index)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    # False: L2 term added to the gradient (classic Adam). True: AdamW-style.
    decoupled_weight_decay: bool = False


def make_adam(params: Iterable[torch.nn.Parameter], cfg: AdamConfig) -> torch.optim.Optimizer:
    cls = torch.optim.AdamW if cfg.decoupled_weight_decay else torch.optim.Adam
    return cls(
        list(params),
        lr=cfg.lr,
        betas=cfg.betas,
        eps=cfg.eps,
        weight_decay=cfg.weight_decay,
        foreach=False,
    )


def adam_step(optimizer: torch.optim.Optimizer, named_params: Iterable[tuple[str, torch.nn.Parameter]]) -> None:
    """Check every gradient for finiteness, then take one optimizer step.

    Raises NonFiniteGradient (and leaves parameters untouched) if any gradient
    holds NaN/inf.
    """
    for name, p in named_params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(name)
    optimizer.step()


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor | np.ndarray,
    eps: float | None = None,
) -> float:
    """Max relative error between the autograd gradient and central differences.

    The error for coordinate i is ``|g_fd - g_ad| / max(1, |g_fd|)``.
    """
    x0 = torch.as_tensor(point).detach().clone()
    if eps is None:
        eps = 1e-6 if x0.dtype == torch.float64 else 1e-2
    x = x0.clone().requires_grad_(True)
    out = f(x)
    if out.numel() != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {tuple(out.shape)}")
    (g_ad,) = torch.autograd.grad(out, x, allow_unused=True)
    if g_ad is None:
        g_ad = torch.zeros_like(x0)
    g_fd = _central_diff(lambda v: f(v), x0, eps)
    err = (g_fd - g_ad.detach()).abs() / torch.clamp(g_fd.abs(), min=1.0)
    return float(err.max()) if err.numel() else 0.0


def _central_diff(f, x0: torch.Tensor, eps: float) -> torch.Tensor:
    flat = x0.reshape(-1)
    g = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += eps
            xm[i] -= eps
            g[i] = (f(xp.view_as(x0)) - f(xm.view_as(x0))) / (2 * eps)
    return g.view_as(x0)


def grad_check_params(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[tuple[str, torch.nn.Parameter]],
    eps: float = 1e-6,
    coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Gradient check on a subset of coordinates of each named parameter.

    ``loss_fn`` recomputes the scalar loss from the current parameter values.
    Coordinates are drawn with a seeded RNG; the worst relative error is
    returned.
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for (name, p), g in zip(params, grads):
        flat = p.data.view(-1)
        n = flat.numel()
        picks = rng.choice(n, size=min(coords_per_param, n), replace=False)
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
            g_fd = (fp - fm) / (2 * eps)
            g_ad = 0.0 if g is None else g.reshape(-1)[i].item()
            worst = max(worst, abs(g_fd - g_ad) / max(1.0, abs(g_fd)))
            if math.isnan(g_fd) or math.isnan(g_ad):
                return math.inf
    return worst
