"""Shared-weight decoder-only transformer with mask-score-biased attention.

Two attention implementations are provided and must agree:

* ``attention_soft_mask`` adds ``log w`` to the logits of a dense score matrix.
* ``attention_augmented`` folds the same bias into one extra head channel so a
  plain boolean-masked scaled-dot-product kernel computes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .config import ModelConfig, PonderSettings
from .errors import CapacityError, NumericError
from .ponder import fixed_step_distribution, log_mask, step_distribution


@dataclass
class AttentionMaskSpec:
    """Boolean visibility plus a per-key-column mask score.

    ``allowed`` broadcasts against ``(..., n_query, n_key)``; ``w`` against
    ``(..., n_key)``. Observed-token columns carry ``w = 1``.
    """

    allowed: Tensor
    w: Tensor

    def log_bias(self) -> Tensor:
        return log_mask(self.w)


def _check_finite(*tensors: Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite attention input")


def _soft_mask(q: Tensor, k: Tensor, v: Tensor, allowed: Tensor, log_bias: Tensor) -> Tensor:
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    scores = scores + log_bias.unsqueeze(-2)
    scores = scores.masked_fill(~allowed, float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def _augmented(q: Tensor, k: Tensor, v: Tensor, allowed: Tensor, log_bias: Tensor) -> Tensor:
    d = q.shape[-1]
    d_aug = d + 1
    # rescale so that Q'K'^T / sqrt(d+1) reproduces QK^T / sqrt(d) exactly
    q_aug = torch.cat(
        [q * math.sqrt(d_aug / d), q.new_full((*q.shape[:-1], 1), math.sqrt(d_aug))], dim=-1
    )
    k_extra = torch.broadcast_to(log_bias, k.shape[:-1]).unsqueeze(-1)
    k_aug = torch.cat([k, k_extra], dim=-1)
    v_aug = torch.cat([v, v.new_zeros((*v.shape[:-1], 1))], dim=-1)
    out = F.scaled_dot_product_attention(q_aug, k_aug, v_aug, attn_mask=allowed)
    return out[..., :d]


def attention_soft_mask(q: Tensor, k: Tensor, v: Tensor, spec: AttentionMaskSpec) -> Tensor:
    """``softmax(QK^T/sqrt(d) + M + log w) V`` with ``log w`` broadcast per key column."""
    _check_finite(q, k, v, spec.w)
    return _soft_mask(q, k, v, spec.allowed, spec.log_bias())


def attention_augmented(q: Tensor, k: Tensor, v: Tensor, spec: AttentionMaskSpec) -> Tensor:
    """Same result as :func:`attention_soft_mask` via a ``d+1`` channel construction."""
    _check_finite(q, k, v, spec.w)
    return _augmented(q, k, v, spec.allowed, spec.log_bias())


ATTENTION_IMPLS: dict[str, Callable[..., Tensor]] = {
    "soft": _soft_mask,
    "augmented": _augmented,
}


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x: Tensor) -> Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rotary_tables(positions: Tensor, d_head: int, base: float, dtype: torch.dtype) -> tuple[Tensor, Tensor]:
    inv_freq = 1.0 / (base ** (torch.arange(0, d_head, 2, dtype=torch.float64) / d_head))
    angles = positions.to(torch.float64)[..., None] * inv_freq
    return angles.cos().to(dtype), angles.sin().to(dtype)


def apply_rotary(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    x1, x2 = x[..., ::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_head
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.out = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def _project(self, x: Tensor, cos: Tensor, sin: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B, L, _ = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        return apply_rotary(q, cos, sin), apply_rotary(k, cos, sin), v

    def _merge(self, y: Tensor) -> Tensor:
        B, H, L, D = y.shape
        return self.out(y.transpose(1, 2).reshape(B, L, H * D))

    def forward(self, x, cos, sin, allowed, log_bias, impl):
        q, k, v = self._project(x, cos, sin)
        return self._merge(impl(q, k, v, allowed, log_bias))

    def forward_cached(self, x, cos, sin, log_bias, layer_cache, impl):
        q, k, v = self._project(x, cos, sin)
        k_all, v_all, bias_all = layer_cache.append(k, v, log_bias)
        n_new, n_all = x.shape[1], k_all.shape[2]
        rows = torch.arange(n_all - n_new, n_all)
        allowed = torch.arange(n_all)[None, :] <= rows[:, None]
        return self._merge(impl(q, k_all, v_all, allowed, bias_all[:, None, :]))


class FeedForward(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = cfg.ffn_hidden
        self.gate = nn.Linear(cfg.d_model, hidden, bias=False)
        self.up = nn.Linear(cfg.d_model, hidden, bias=False)
        self.down = nn.Linear(hidden, cfg.d_model, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ffn_norm = RMSNorm(cfg.d_model)
        self.ffn = FeedForward(cfg)

    def forward(self, x, cos, sin, allowed, log_bias, impl):
        x = x + self.attn(self.attn_norm(x), cos, sin, allowed, log_bias, impl)
        return x + self.ffn(self.ffn_norm(x))

    def forward_cached(self, x, cos, sin, log_bias, layer_cache, impl):
        x = x + self.attn.forward_cached(self.attn_norm(x), cos, sin, log_bias, layer_cache, impl)
        return x + self.ffn(self.ffn_norm(x))


class PonderTransformer(nn.Module):
    """Decoder-only LM whose weights are reused for every latent pondering step.

    ``backbone`` maps a batch of input vectors (token embeddings or fed-back
    latent states) to final normalised hidden states. ``router`` maps a step-0
    state to the K+1 step-count logits.
    """

    def __init__(self, cfg: ModelConfig, max_steps: int):
        super().__init__()
        self.cfg = cfg
        self.max_steps = max_steps
        self.attention = cfg.attention
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.router = nn.Linear(cfg.d_model, max_steps + 1)

    # -- construction -------------------------------------------------------
    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        std = 0.02
        out_std = std / math.sqrt(2 * max(1, self.cfg.n_layers))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("norm.weight"):
                    p.fill_(1.0)
                elif name.startswith("router"):
                    p.zero_()
                elif name == "embed.weight":
                    p.normal_(0.0, 1.0, generator=g)
                elif name.endswith(("attn.out.weight", "ffn.down.weight")):
                    p.normal_(0.0, out_std, generator=g)
                else:
                    p.normal_(0.0, std, generator=g)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- core maps ----------------------------------------------------------
    def lm_logits(self, h: Tensor) -> Tensor:
        return self.lm_head(h)

    def router_logits(self, h0: Tensor) -> Tensor:
        return self.router(h0)

    def route(self, h0: Tensor, settings: PonderSettings, alpha: float = 0.0) -> Tensor:
        """Step distribution for step-0 states; one-hot at K in fixed mode."""
        logits = self.router_logits(h0)
        if settings.fixed:
            return fixed_step_distribution(logits)
        return step_distribution(logits, alpha)

    def _rotary(self, positions: Tensor, dtype: torch.dtype) -> tuple[Tensor, Tensor]:
        if positions.numel() and int(positions.max()) >= self.cfg.max_position:
            raise CapacityError(
                f"position {int(positions.max())} exceeds max_position={self.cfg.max_position}"
            )
        return rotary_tables(positions, self.cfg.d_head, self.cfg.rope_base, dtype)

    def backbone(self, x: Tensor, positions: Tensor, spec: AttentionMaskSpec) -> Tensor:
        """One full pass over all positions of ``x`` (``(B, L, d)``) in parallel.

        ``spec.allowed`` broadcasts to ``(B, 1, L, L)`` and ``spec.w`` to ``(B, 1, L)``.
        Zero layers is the identity.
        """
        if not self.layers:
            return x
        cos, sin = self._rotary(positions, x.dtype)
        impl = ATTENTION_IMPLS[self.attention]
        log_bias = spec.log_bias()
        for layer in self.layers:
            x = layer(x, cos, sin, spec.allowed, log_bias, impl)
        return self.norm(x)

    def backbone_cached(self, x: Tensor, positions: Tensor, w: Tensor, cache) -> Tensor:
        """Process new positions ``x`` (``(1, n, d)``) against a decode cache.

        Each new position is appended to every layer's cache together with its
        persisted log mask score ``log w``.
        """
        log_bias = log_mask(w).reshape(1, -1)
        if not self.layers:
            return x
        cos, sin = self._rotary(positions, x.dtype)
        impl = ATTENTION_IMPLS[self.attention]
        for layer, layer_cache in zip(self.layers, cache.layers):
            x = layer.forward_cached(x, cos, sin, log_bias, layer_cache, impl)
        return self.norm(x)


def init_parameters(cfg: ModelConfig, ponder: PonderSettings) -> PonderTransformer:
    """Build a model with deterministic weights derived from ``cfg.seed``."""
    model = PonderTransformer(cfg, ponder.max_steps)
    model.reset_parameters(cfg.seed)
    return model


def causal_spec(w: Tensor, valid: Tensor | None = None) -> AttentionMaskSpec:
    """Mask spec for a batch of interleaved sequences.

    ``w`` is ``(B, L)`` column mask scores; ``valid`` optionally marks non-pad keys.
    """
    B, L = w.shape
    allowed = torch.ones(L, L, dtype=torch.bool, device=w.device).tril()
    if valid is None:
        allowed = allowed[None, None]
    else:
        allowed = allowed[None, None] & valid[:, None, None, :]
    return AttentionMaskSpec(allowed=allowed, w=w[:, None, :])


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor] | Iterable[Tensor],
    eps: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Max element-wise relative error between autograd and central differences.

    Intended for float64 models. The relative error of each element is
    ``|g_auto - g_fd| / max(|g_auto|, |g_fd|, floor)``. At this step size the
    central-difference round-off is about ``1e-11`` and the truncation error
    scales with ``eps**2``; ``floor`` marks the gradient magnitude below which an
    element is judged by its absolute error.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            g_flat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = loss_fn().item()
                flat[i] = orig - eps
                minus = loss_fn().item()
                flat[i] = orig
                fd = (plus - minus) / (2 * eps)
                a = g_flat[i].item()
                denom = max(abs(a), abs(fd), floor)
                worst = max(worst, abs(a - fd) / denom)
    return worst
