"""Router outputs, step distributions, mask scores and the hard-stop rule.

All functions work on the trailing axis of arbitrarily batched tensors, so the
same code serves a single decode step and a whole training batch.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ContractError

LOG_FLOOR = 1e-30


def step_bias(n_steps: int, alpha: float, like: Tensor) -> Tensor:
    """Linear-in-k logit tilt ``alpha * (0, 1, ..., K)``."""
    return alpha * torch.arange(n_steps, dtype=like.dtype, device=like.device)


def step_distribution(logits: Tensor, alpha: float = 0.0) -> Tensor:
    """Softmax over the K+1 step counts, optionally tilted by ``alpha``.

    Negative ``alpha`` moves mass toward fewer steps, positive toward more.
    ``alpha=-inf`` gives the one-hot at zero steps.
    """
    if alpha == 0.0:
        return F.softmax(logits, dim=-1)
    if alpha == float("-inf"):
        s = torch.zeros_like(logits)
        s[..., 0] = 1.0
        return s
    return F.softmax(logits + step_bias(logits.shape[-1], alpha, logits), dim=-1)


def fixed_step_distribution(like: Tensor) -> Tensor:
    s = torch.zeros_like(like)
    s[..., -1] = 1.0
    return s


def tail_cdf(s: Tensor) -> Tensor:
    """Mask scores ``w_k = sum_{j>=k} s_j`` (reverse cumulative sum)."""
    return s.flip(-1).cumsum(-1).flip(-1)


def weighted_integration(s: Tensor, states: Tensor, upto: int | None = None) -> Tensor:
    """Fuse per-step states with the step distribution.

    ``states`` has shape ``(..., n_states, d)`` and ``s`` shape ``(..., K+1)``.
    With ``upto=i`` only steps ``0..i`` contribute and ``s`` is *not*
    renormalised, so the result is the partial integrated state.
    """
    n = s.shape[-1] - 1 if upto is None else upto
    if n < 0 or n >= s.shape[-1]:
        raise ContractError(f"truncation index {n} outside 0..{s.shape[-1] - 1}")
    if states.shape[-2] < n + 1:
        raise ContractError(f"integration up to step {n} needs {n + 1} states, got {states.shape[-2]}")
    return torch.einsum("...k,...kd->...d", s[..., : n + 1], states[..., : n + 1, :])


def hard_stop_index(w: Tensor, tau: float) -> Tensor:
    """Largest k with ``w_k >= tau``; at least 0 because ``w_0 = 1``."""
    steps = torch.arange(w.shape[-1], device=w.device)
    keep = torch.where(w >= tau, steps, torch.zeros_like(steps))
    return keep.max(dim=-1).values


def log_mask(w: Tensor) -> Tensor:
    """Additive attention bias for mask scores, clamped away from log(0)."""
    return torch.log(w.clamp_min(LOG_FLOOR))
