"""Interleaved-sequence training with Jacobi iterations and the minimum-ponder penalty."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .config import PonderSettings, TrainConfig
from .data import PAD, BatchSampler
from .errors import CapacityError, ContractError, NumericError
from .model import PonderTransformer, causal_spec
from .ponder import tail_cdf, weighted_integration

log = logging.getLogger(__name__)

OBSERVED = 0
LATENT = 1


@dataclass
class InterleavedSequence:
    """``[e(x_1), z_1,1 .. z_1,K, e(x_2), ...]`` plus per-position metadata.

    ``parent`` and ``slot`` are 0-based; ``slot == 0`` marks observed tokens.
    ``w`` holds the mask score carried by each key column (1 for observed).
    """

    tokens: Tensor  # (B, T)
    inputs: Tensor  # (B, T*(K+1), d)
    kind: Tensor  # (L,)
    parent: Tensor  # (L,)
    slot: Tensor  # (L,)
    positions: Tensor  # (L,)
    valid: Tensor  # (B, L) non-pad key columns
    w: Tensor  # (B, L)

    @property
    def n_slots(self) -> int:
        return int(self.slot.max()) if self.slot.numel() else 0

    def grid(self, x: Tensor) -> Tensor:
        """View a ``(B, L, ...)`` tensor as ``(B, T, K+1, ...)``."""
        B, T = self.tokens.shape
        return x.reshape(B, T, self.n_slots + 1, *x.shape[2:])


def interleaved_positions(n_tokens: int, n_slots: int, distinct: bool) -> Tensor:
    if distinct:
        return torch.arange(n_tokens * (n_slots + 1))
    return torch.arange(n_tokens).repeat_interleave(n_slots + 1)


def build_interleaved(
    tokens: Tensor, model: PonderTransformer, ponder: PonderSettings
) -> InterleavedSequence:
    """Lay out observed embeddings and K latent slots per token.

    Latent slots start as a copy of their parent's embedding (or zeros when
    ``ponder.latent_init == 'zeros'``), and every column starts fully visible.
    """
    B, T = tokens.shape
    K = ponder.max_steps
    S = K + 1
    positions = interleaved_positions(T, K, model.cfg.distinct_slot_positions)
    if T and int(positions.max()) >= model.cfg.max_position:
        raise CapacityError(f"{T} tokens with K={K} exceed max_position={model.cfg.max_position}")
    emb = model.embed(tokens)  # (B, T, d)
    if ponder.latent_init == "zeros":
        slots = emb.new_zeros(B, T, K, emb.shape[-1])
    else:
        slots = emb.unsqueeze(2).expand(B, T, K, emb.shape[-1])
    inputs = torch.cat([emb.unsqueeze(2), slots], dim=2).reshape(B, T * S, -1)
    slot = torch.arange(S).repeat(T)
    valid = (tokens != PAD).repeat_interleave(S, dim=1)
    return InterleavedSequence(
        tokens=tokens,
        inputs=inputs,
        kind=(slot > 0).long(),
        parent=torch.arange(T).repeat_interleave(S),
        slot=slot,
        positions=positions,
        valid=valid,
        w=inputs.new_ones(B, T * S),
    )


@dataclass
class JacobiResult:
    states: Tensor  # (B, T, K+1, d): h_0 at the observed position, h_k at slot k
    s: Tensor  # (B, T, K+1)
    w: Tensor  # (B, T, K+1)
    snapshots: list[Tensor] = field(default_factory=list)


def jacobi_iterate(
    model: PonderTransformer,
    tokens: Tensor,
    ponder: PonderSettings,
    n_iters: int | None = None,
    alpha: float = 0.0,
    snapshots: bool = False,
    grad_through_iters: bool = True,
) -> JacobiResult:
    """Parallel fixed-point refinement of all latent states.

    Each iteration runs the backbone once over the whole interleaved sequence,
    feeds slot ``k-1``'s output in as slot ``k``'s next input, and re-applies
    the router to the new step-0 states so the refreshed mask scores bias the
    next iteration's attention.
    """
    n_iters = ponder.jacobi_iters if n_iters is None else n_iters
    if n_iters < 1:
        raise ContractError("jacobi_iterate needs at least one iteration")
    seq = build_interleaved(tokens, model, ponder)
    B, T = tokens.shape
    K = ponder.max_steps
    x = seq.grid(seq.inputs)
    emb, slot_in = x[:, :, :1], x[:, :, 1:]
    col_w = seq.w
    kept: list[Tensor] = []
    h = s = w = None
    for n in range(n_iters):
        track = grad_through_iters or n == n_iters - 1
        with torch.set_grad_enabled(track and torch.is_grad_enabled()):
            x = torch.cat([emb, slot_in], dim=2).reshape(B, T * (K + 1), -1)
            h = seq.grid(model.backbone(x, seq.positions, causal_spec(col_w, seq.valid)))
            if not torch.isfinite(h).all():
                raise NumericError(f"non-finite latent states at Jacobi iteration {n + 1}")
            s = model.route(h[:, :, 0], ponder, alpha)
            w = tail_cdf(s)
            slot_in = h[:, :, :K]
            col_w = torch.cat([w.new_ones(B, T, 1), w[:, :, 1:]], dim=2).reshape(B, -1)
        if snapshots:
            kept.append(h.detach().clone())
    return JacobiResult(states=h, s=s, w=w, snapshots=kept)


# -- losses -----------------------------------------------------------------

def language_model_loss(model: PonderTransformer, h_hat: Tensor, targets: Tensor) -> Tensor:
    """Mean next-token cross-entropy of integrated states ``(N, d)`` against ``(N,)``."""
    if targets.numel() == 0:
        raise ContractError("no supervised positions")
    return F.cross_entropy(model.lm_logits(h_hat), targets)


def penalty_ratio(ce):
    """``1 - sigmoid(10 (ce - 0.5))``: small cross-entropy gives a large ratio.

    Evaluated as ``sigmoid(-10 (ce - 0.5))``, which is the same function without
    the cancellation that rounds large-``ce`` ratios to exactly zero.
    """
    if isinstance(ce, Tensor):
        return torch.sigmoid(-10.0 * (ce - 0.5))
    return float(torch.sigmoid(torch.tensor(-10.0 * (ce - 0.5), dtype=torch.float64)))


_COUNT_SLACK = 1e-9


@dataclass
class AuxLossReport:
    ce: list[float]
    rho: list[float]
    delta_rho: list[float]  # index k-1 holds delta rho_k
    selected: list[int]  # number of penalised entries per step k >= 1
    total: Tensor


def min_ponder_penalty(w: Tensor, rho: Sequence[float] | Tensor, lam: float,
                       ce: Sequence[float] | None = None) -> AuxLossReport:
    """Bottom-mass penalty on per-step mask scores.

    ``w`` is ``(n_tokens, K+1)``. For each ``k >= 1`` the smallest
    ``floor(delta_rho_k * n_tokens)`` entries of ``w[:, k]`` are averaged and
    added with weight ``lam``; gradients reach only those entries.
    """
    rho = [float(r) for r in rho]
    n = w.shape[0]
    total = w.new_zeros(())
    deltas, counts = [], []
    for k in range(1, w.shape[1]):
        d = max(rho[k] - rho[k - 1], 0.0)
        # the slack keeps e.g. (0.7 - 0.2) * 4 from flooring to 1
        m = int(math.floor(d * n + _COUNT_SLACK))
        deltas.append(d)
        counts.append(m)
        if m > 0 and lam > 0:
            smallest = torch.topk(w[:, k], m, largest=False, sorted=False).values
            total = total + lam * smallest.mean()
    return AuxLossReport(ce=list(ce or []), rho=rho, delta_rho=deltas, selected=counts, total=total)


@dataclass
class LossOutput:
    total: Tensor
    ce: Tensor
    aux: AuxLossReport
    avg_w: list[float]
    jacobi: JacobiResult


def partial_ce(logits_by_step: Tensor, s: Tensor, targets: Tensor) -> Tensor:
    """Per-token CE of the partial integrated states at every depth 0..K.

    ``logits_by_step`` is ``(N, K+1, V)``; the LM head is linear so the logits of
    ``sum_{j<=i} s_j h_j`` are the cumulative weighted sum of per-step logits.
    Returns ``(N, K+1)``.
    """
    partial = torch.cumsum(s.unsqueeze(-1) * logits_by_step, dim=1)
    logp = torch.log_softmax(partial, dim=-1)
    idx = targets[:, None, None].expand(-1, partial.shape[1], 1)
    return -logp.gather(-1, idx).squeeze(-1)


def ponder_losses(
    model: PonderTransformer,
    batch: Tensor,
    ponder: PonderSettings,
    rho: Sequence[float] | None = None,
    grad_through_iters: bool = True,
) -> LossOutput:
    """``L = L_CE + L_aux`` on a ``(B, T+1)`` token batch.

    ``rho`` may be supplied to freeze the penalty ratios (they are otherwise
    derived from the detached per-depth cross-entropies of this batch).
    """
    inputs, targets = batch[:, :-1], batch[:, 1:]
    res = jacobi_iterate(model, inputs, ponder, grad_through_iters=grad_through_iters)
    sup = targets != PAD
    if not sup.any():
        raise ContractError("no supervised positions")
    states, s, w, tgt = res.states[sup], res.s[sup], res.w[sup], targets[sup]
    h_hat = weighted_integration(s, states)
    ce = language_model_loss(model, h_hat, tgt)
    with torch.no_grad():
        ce_steps = partial_ce(model.lm_logits(states), s, tgt).mean(0)
    if rho is None:
        rho = penalty_ratio(ce_steps.double()).tolist()
    aux = min_ponder_penalty(w, rho, ponder.lam, ce=ce_steps.tolist())
    avg_w = w.detach().mean(0)[1:].tolist()
    return LossOutput(total=ce + aux.total, ce=ce, aux=aux, avg_w=avg_w, jacobi=res)


# -- optimisation -----------------------------------------------------------

def make_optimizer(model: PonderTransformer, cfg: TrainConfig):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.ndim >= 2 and not name.startswith(("router", "embed")):
            decay.append(p)
        else:
            no_decay.append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr, betas=cfg.betas, eps=1e-8,
    )

    def schedule(step: int) -> float:
        if step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        progress = (step - cfg.warmup_steps) / max(1, cfg.steps - cfg.warmup_steps)
        cosine = 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))
        return cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine

    return opt, torch.optim.lr_scheduler.LambdaLR(opt, schedule)


@dataclass
class StepMetrics:
    step: int
    loss_ce: float
    loss_aux: float
    ce_steps: list[float]
    avg_w: list[float]
    grad_norm: float

    def row(self) -> list:
        return [self.step, self.loss_ce, self.loss_aux, *self.ce_steps, *self.avg_w, self.grad_norm]


def metrics_header(max_steps: int) -> list[str]:
    return (["step", "loss_ce", "loss_aux"]
            + [f"ce_{i}" for i in range(max_steps + 1)]
            + [f"avg_w_{k}" for k in range(1, max_steps + 1)]
            + ["grad_norm"])


def train_step(model, optimizer, scheduler, batch: Tensor, ponder: PonderSettings,
               cfg: TrainConfig, step: int = 0) -> StepMetrics:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    out = ponder_losses(model, batch, ponder, grad_through_iters=cfg.grad_through_iters)
    if not torch.isfinite(out.total):
        raise NumericError(
            f"non-finite loss at step {step}: ce={out.ce.item()} aux={out.aux.total.item()} "
            f"ce_steps={out.aux.ce}"
        )
    out.total.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return StepMetrics(step=step, loss_ce=float(out.ce.detach()), loss_aux=float(out.aux.total.detach()),
                       ce_steps=out.aux.ce, avg_w=out.avg_w, grad_norm=float(grad_norm))


def train(
    model: PonderTransformer,
    train_data: Tensor,
    ponder: PonderSettings,
    cfg: TrainConfig,
    metrics_path: str | Path | None = None,
    on_eval: Callable[[int, PonderTransformer], None] | None = None,
    log_every: int = 50,
) -> list[StepMetrics]:
    """Run ``cfg.steps`` optimizer updates on random windows of ``train_data``."""
    torch.manual_seed(cfg.seed)
    sampler = BatchSampler(train_data, cfg.batch_size, cfg.seq_len, seed=cfg.seed)
    optimizer, scheduler = make_optimizer(model, cfg)
    history: list[StepMetrics] = []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(metrics_header(ponder.max_steps))
    try:
        for step in range(1, cfg.steps + 1):
            m = train_step(model, optimizer, scheduler, next(sampler), ponder, cfg, step)
            history.append(m)
            if writer is not None:
                writer.writerow(m.row())
            if log_every and step % log_every == 0:
                log.info("step %d ce %.4f aux %.5f avg_w %s", step, m.loss_ce, m.loss_aux,
                         " ".join(f"{x:.3f}" for x in m.avg_w))
            if on_eval is not None and cfg.eval_interval and step % cfg.eval_interval == 0:
                on_eval(step, model)
    finally:
        if fh is not None:
            fh.close()
    model.eval()
    return history
