"""Directional finite-difference checks against the autodiff tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Backprop ``loss`` and return one gradient per parameter (zeros if unreachable)."""
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
               directions: Sequence[np.ndarray], h: float = 1e-3) -> tuple[float, float]:
    """Compare the analytic directional derivative with a central difference.

    ``loss_fn`` must rebuild the graph from the current parameter values each
    call. Returns ``(analytic, numeric)`` where numeric is
    ``(L(theta + h d) - L(theta - h d)) / 2h``.
    """
    if not (1e-4 <= h <= 1e-2):
        raise ContractError(f"step h={h} outside the supported range")
    loss = loss_fn()
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = gradients(loss, params)
    analytic = float(sum(np.sum(g.astype(np.float64) * d) for g, d in zip(grads, directions)))

    originals = [p.data for p in params]
    try:
        for p, d, o in zip(params, directions, originals):
            p.data = (o + h * d).astype(o.dtype)
        up = float(loss_fn().item())
        for p, d, o in zip(params, directions, originals):
            p.data = (o - h * d).astype(o.dtype)
        down = float(loss_fn().item())
    finally:
        for p, o in zip(params, originals):
            p.data = o
    return analytic, (up - down) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
