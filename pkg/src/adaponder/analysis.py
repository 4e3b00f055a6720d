"""Diagnostics over a trained model: difficulty buckets, marginal utility,
counterfactual router tilts, Jacobi convergence and per-token step statistics."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .config import PonderSettings
from .data import token_label
from .errors import ContractError
from .inference import FULL_DEPTH, DecodeRecord, DecodeSession, evaluate_perplexity
from .model import PonderTransformer
from .training import jacobi_iterate

BUCKET_NAMES = ("easy", "medium", "hard")


@dataclass
class TokenDifficultyRecord:
    position: int
    token_id: int
    l_t: float  # step-0 NLL of the next token
    khat: int
    ce: list[float]  # NLL of the partial integration truncated at depth 0..K
    nll: float  # NLL actually incurred by adaptive inference


def intrinsic_difficulty(model: PonderTransformer, chunks: Sequence[Tensor],
                         settings: PonderSettings, alpha: float = 0.0) -> list[TokenDifficultyRecord]:
    """Adaptive teacher-forced pass that also probes every depth for each token."""
    if not chunks:
        raise ContractError("difficulty analysis needs a non-empty corpus")
    res = evaluate_perplexity(model, chunks, settings, alpha=alpha, probe=True)
    return [
        TokenDifficultyRecord(position=i, token_id=r.token_id, l_t=r.l0, khat=r.khat,
                              ce=list(r.ce_steps), nll=r.nll)
        for i, r in enumerate(res.records)
    ]


def difficulty_buckets(values: Sequence[float], n_buckets: int = 3) -> list[int]:
    """Rank-based quantile split; ties keep position order. Returns a bucket per item."""
    n = len(values)
    if n < n_buckets or n_buckets < 1:
        raise ContractError(f"cannot split {n} tokens into {n_buckets} buckets")
    order = sorted(range(n), key=lambda i: (values[i], i))
    base, extra = divmod(n, n_buckets)
    out = [0] * n
    start = 0
    for b in range(n_buckets):
        size = base + (1 if b < extra else 0)
        for i in order[start : start + size]:
            out[i] = b
        start += size
    return out


@dataclass
class MarginalUtilityReport:
    bucket: str
    delta_ce: list[float]  # index i-1 holds CE_{i-1} - CE_i
    count: int


def marginal_utility(records: Sequence[TokenDifficultyRecord],
                     buckets: Sequence[int]) -> list[MarginalUtilityReport]:
    """Bucket means of ``CE_{i-1} - CE_i`` for ``i = 1..K``, plus an ``all`` row."""
    groups: dict[int, list[TokenDifficultyRecord]] = defaultdict(list)
    for rec, b in zip(records, buckets):
        groups[b].append(rec)

    def summarise(name: str, recs: list[TokenDifficultyRecord]) -> MarginalUtilityReport:
        ce = np.array([r.ce for r in recs], dtype=np.float64)
        delta = (ce[:, :-1] - ce[:, 1:]).mean(axis=0) if len(recs) else np.zeros(0)
        return MarginalUtilityReport(name, delta.tolist(), len(recs))

    reports = [summarise(_bucket_name(b), groups[b]) for b in sorted(groups)]
    reports.append(summarise("all", list(records)))
    return reports


def _bucket_name(b: int) -> str:
    return BUCKET_NAMES[b] if b < len(BUCKET_NAMES) else f"bucket{b}"


@dataclass
class CounterfactualRow:
    alpha: float
    subset: str
    delta_loss: float
    avg_steps: float


def counterfactual_sweep(model: PonderTransformer, chunks: Sequence[Tensor],
                         settings: PonderSettings, alphas: Sequence[float],
                         baseline: Sequence[TokenDifficultyRecord] | None = None
                         ) -> list[CounterfactualRow]:
    """Re-run inference with the router tilted by each ``alpha``.

    Easy and hard subsets are the bottom and top tertiles of step-0 NLL under
    the untilted model; ``delta_loss`` is the change in mean NLL against
    ``alpha = 0``.
    """
    if not any(a == 0 for a in alphas):
        raise ContractError("the alpha grid must include 0")
    if baseline is None:
        baseline = intrinsic_difficulty(model, chunks, settings)
    buckets = np.array(difficulty_buckets([r.l_t for r in baseline]))
    subsets = {"easy": buckets == 0, "hard": buckets == len(BUCKET_NAMES) - 1,
               "all": np.ones(len(baseline), dtype=bool)}
    base_nll = np.array([r.nll for r in baseline])
    rows = []
    for alpha in alphas:
        if alpha == 0:
            nll, steps = base_nll, np.array([r.khat for r in baseline], dtype=float)
        else:
            res = evaluate_perplexity(model, chunks, settings, alpha=alpha)
            nll = np.array([r.nll for r in res.records])
            steps = np.array([r.khat for r in res.records], dtype=float)
        for name, sel in subsets.items():
            rows.append(CounterfactualRow(float(alpha), name,
                                          float(nll[sel].mean() - base_nll[sel].mean()),
                                          float(steps[sel].mean())))
    return rows


@dataclass
class ConvergenceFit:
    rmse: list[float]
    amplitude: float
    contraction: float
    r2: float
    reference: str = "sequential"

    def summary(self) -> str:
        return (f"# fit rmse_n = A * L^n: A={self.amplitude:.6g} L={self.contraction:.6g} "
                f"R2={self.r2:.6g} reference={self.reference}")


def fit_convergence(rmse: Sequence[float], reference: str = "sequential") -> ConvergenceFit:
    """Least-squares fit of ``log rmse_n = log A + n log L`` for ``n = 1..N``.

    Zero entries are excluded from the fit; an all-zero curve is reported as
    exact convergence with ``L = 0``.
    """
    r = np.asarray(rmse, dtype=np.float64)
    n = np.arange(1, len(r) + 1, dtype=np.float64)
    pos = r > 0
    if not pos.any():
        return ConvergenceFit(r.tolist(), 0.0, 0.0, 1.0, reference)
    if pos.sum() == 1:
        return ConvergenceFit(r.tolist(), float(r[pos][0]), 0.0, 1.0, reference)
    y = np.log(r[pos])
    x = n[pos]
    slope, intercept = np.polyfit(x, y, 1)
    pred = intercept + slope * x
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return ConvergenceFit(r.tolist(), math.exp(intercept), math.exp(slope), r2, reference)


@torch.no_grad()
def sequential_states(model: PonderTransformer, chunk: Tensor, settings: PonderSettings) -> Tensor:
    """Full-depth sequential inference states, ``(T, K+1, d)``: the Jacobi fixed point."""
    session = DecodeSession(model, settings, depth=FULL_DEPTH)
    return torch.stack([session.ponder(t).states for t in chunk[:-1].tolist()])


@torch.no_grad()
def jacobi_convergence(model: PonderTransformer, chunks: Sequence[Tensor],
                       settings: PonderSettings, n_max: int,
                       reference: str = "sequential") -> ConvergenceFit:
    """RMSE between Jacobi iterate ``n`` and the inference-time fixed point.

    ``reference='jacobi'`` substitutes a ``4 * n_max``-iteration Jacobi run for
    the sequential states (faster, and flagged in the fit).
    """
    if n_max < 1:
        raise ContractError("n_max must be positive")
    if reference not in ("sequential", "jacobi"):
        raise ContractError(f"unknown reference {reference!r}")
    model.eval()
    totals = np.zeros(n_max)
    count = 0
    for chunk in chunks:
        res = jacobi_iterate(model, chunk[None, :-1], settings, n_iters=n_max, snapshots=True)
        if reference == "sequential":
            target = sequential_states(model, chunk, settings)
        else:
            target = jacobi_iterate(model, chunk[None, :-1], settings, n_iters=4 * n_max).states[0]
        for i, snap in enumerate(res.snapshots):
            per_pos = (snap[0].double() - target.double()).pow(2).mean(-1).sqrt()
            totals[i] += float(per_pos.sum())
        count += target.shape[0] * target.shape[1]
    return fit_convergence((totals / count).tolist(), reference)


@dataclass
class TokenStepStats:
    token_id: int
    count: int
    avg_step: float
    pruned_pct: float
    hist: list[int]

    @property
    def label(self) -> str:
        return token_label(self.token_id)


def token_step_stats(records: Sequence[DecodeRecord], max_steps: int) -> list[TokenStepStats]:
    """Group decode records by consumed token; most frequent first."""
    hist: dict[int, list[int]] = defaultdict(lambda: [0] * (max_steps + 1))
    for r in records:
        hist[r.token_id][r.khat] += 1
    stats = []
    for tok, h in hist.items():
        count = sum(h)
        avg = sum(k * c for k, c in enumerate(h)) / count
        pruned = 100.0 * (1.0 - h[max_steps] / count)
        stats.append(TokenStepStats(tok, count, avg, pruned, list(h)))
    stats.sort(key=lambda s: (-s.count, s.token_id))
    return stats


def spearman_difficulty_steps(records: Sequence[TokenDifficultyRecord]) -> float:
    from scipy.stats import spearmanr

    l = [r.l_t for r in records]
    k = [r.khat for r in records]
    if len(set(k)) < 2 or len(set(l)) < 2:
        return float("nan")
    return float(spearmanr(l, k).statistic)


# -- CSV output -------------------------------------------------------------

def _write(path: str | Path, header: list[str], rows, trailer: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        out.writerows(rows)
        if trailer:
            fh.write(trailer + "\n")


def difficulty_header(max_steps: int) -> list[str]:
    return ["pos", "l_t", "khat"] + [f"ce_{i}" for i in range(max_steps + 1)]


def write_difficulty(path, records: Sequence[TokenDifficultyRecord], max_steps: int) -> None:
    rows = ([r.position, f"{r.l_t:.6g}", r.khat, *(f"{c:.6g}" for c in r.ce)] for r in records)
    _write(path, difficulty_header(max_steps), rows)


MARGINAL_HEADER = ["bucket", "step", "delta_ce", "count"]
COUNTERFACTUAL_HEADER = ["alpha", "subset", "delta_loss", "avg_steps"]
CONVERGENCE_HEADER = ["n", "rmse"]


def write_marginal(path, reports: Sequence[MarginalUtilityReport]) -> None:
    rows = ([rep.bucket, i + 1, f"{d:.6g}", rep.count]
            for rep in reports for i, d in enumerate(rep.delta_ce))
    _write(path, MARGINAL_HEADER, rows)


def write_counterfactual(path, rows: Sequence[CounterfactualRow]) -> None:
    _write(path, COUNTERFACTUAL_HEADER,
           ([f"{r.alpha:g}", r.subset, f"{r.delta_loss:.6g}", f"{r.avg_steps:.6g}"] for r in rows))


def write_convergence(path, fit: ConvergenceFit) -> None:
    _write(path, CONVERGENCE_HEADER,
           ([n, f"{r:.6g}"] for n, r in enumerate(fit.rmse, start=1)), trailer=fit.summary())


def token_stats_header(max_steps: int) -> list[str]:
    return ["token", "count", "avg_step", "pruned_pct"] + [f"hist_{k}" for k in range(max_steps + 1)]


def write_token_stats(path, stats: Sequence[TokenStepStats], max_steps: int) -> None:
    rows = ([s.label, s.count, f"{s.avg_step:.4f}", f"{s.pruned_pct:.2f}", *s.hist] for s in stats)
    _write(path, token_stats_header(max_steps), rows)
