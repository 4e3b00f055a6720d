"""Sequential decoding with token-wise hard stopping and compute accounting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import Tensor

from .config import PonderSettings
from .data import BOS, EOS, detokenize, tokenize
from .errors import ContractError
from .model import PonderTransformer
from .ponder import hard_stop_index, log_mask, tail_cdf, weighted_integration
from .training import jacobi_iterate

ADAPTIVE_DEPTH = "adaptive"
FULL_DEPTH = "full"


class LayerCache:
    """Keys/values of one layer for every retained interleaved position."""

    def __init__(self) -> None:
        self.k: Tensor | None = None
        self.v: Tensor | None = None
        self.bias: Tensor | None = None

    def append(self, k: Tensor, v: Tensor, log_bias: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        if self.k is None:
            self.k, self.v, self.bias = k, v, log_bias
        else:
            self.k = torch.cat([self.k, k], dim=2)
            self.v = torch.cat([self.v, v], dim=2)
            self.bias = torch.cat([self.bias, log_bias], dim=1)
        return self.k, self.v, self.bias

    def truncate(self, length: int) -> None:
        if self.k is not None:
            self.k = self.k[:, :, :length]
            self.v = self.v[:, :, :length]
            self.bias = self.bias[:, :length]


@dataclass
class CacheEntry:
    parent: int
    slot: int
    position: int
    w: float
    input: Tensor


class DecodeCache:
    """Per-layer K/V plus metadata for each retained position.

    Latent slots beyond a token's stopping index are never appended, and each
    entry keeps the mask score it was created with.
    """

    def __init__(self, n_layers: int) -> None:
        self.layers = [LayerCache() for _ in range(n_layers)]
        self.entries: list[CacheEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def truncate(self, length: int) -> None:
        for layer in self.layers:
            layer.truncate(length)
        del self.entries[length:]


@dataclass
class DecodeRecord:
    pos: int
    token_id: int  # token consumed at this position
    khat: int
    s: list[float]
    w: list[float]
    nll: float  # of the emitted / observed next token
    next_id: int
    l0: float | None = None  # NLL from the step-0 state alone
    ce_steps: list[float] | None = None  # NLL of partial integrations at depth 0..K


@dataclass
class StepTrace:
    token_id: int
    khat: int
    s: Tensor
    w: Tensor
    states: Tensor  # (khat+1, d)
    logits: Tensor
    probe_states: Tensor | None = None  # (K+1, d) when probing


class DecodeSession:
    """Owns the cache of one sequence and runs the pondering loop per token."""

    def __init__(self, model: PonderTransformer, settings: PonderSettings, alpha: float = 0.0,
                 depth: str = ADAPTIVE_DEPTH):
        if depth not in (ADAPTIVE_DEPTH, FULL_DEPTH):
            raise ContractError(f"unknown depth mode {depth!r}")
        if model.max_steps != settings.max_steps:
            raise ContractError(
                f"model routes over K={model.max_steps} but settings ask for K={settings.max_steps}"
            )
        self.model = model
        self.settings = settings
        self.alpha = alpha
        self.depth = depth
        self.cache = DecodeCache(len(model.layers))
        self.t = 0

    def _position(self, slot: int) -> int:
        if self.model.cfg.distinct_slot_positions:
            return self.t * (self.settings.max_steps + 1) + slot
        return self.t

    def _forward(self, x: Tensor, slot: int, w: float) -> Tensor:
        pos = self._position(slot)
        wt = x.new_tensor([w])
        out = self.model.backbone_cached(x.view(1, 1, -1), torch.tensor([pos]), wt, self.cache)
        self.cache.entries.append(CacheEntry(self.t, slot, pos, w, x.reshape(-1).clone()))
        return out.view(-1)

    @torch.no_grad()
    def ponder(self, token_id: int, probe: bool = False) -> StepTrace:
        """Consume one observed token: step-0 pass, routing, then latent steps up to K-hat.

        With ``probe`` the steps beyond K-hat are also evaluated for analysis and
        then rolled back out of the cache.
        """
        model, K = self.model, self.settings.max_steps
        x = model.embed(torch.tensor([token_id]))[0]
        h0 = self._forward(x, 0, 1.0)
        s = model.route(h0, self.settings, self.alpha)
        w = tail_cdf(s)
        khat = K if self.depth == FULL_DEPTH else int(hard_stop_index(w, self.settings.tau))
        states = [h0]
        for k in range(1, khat + 1):
            states.append(self._forward(states[-1], k, float(w[k])))
        probe_states = None
        if probe:
            kept = len(self.cache)
            extra = list(states)
            for k in range(khat + 1, K + 1):
                extra.append(self._forward(extra[-1], k, float(w[k])))
            self.cache.truncate(kept)
            probe_states = torch.stack(extra)
        stacked = torch.stack(states)
        h_hat = weighted_integration(s, stacked, upto=khat)
        trace = StepTrace(token_id, khat, s, w, stacked, model.lm_logits(h_hat), probe_states)
        self.t += 1
        return trace


@dataclass
class Sampling:
    temperature: float = 0.0  # 0 -> greedy
    seed: int = 0

    def __post_init__(self) -> None:
        self._gen = torch.Generator().manual_seed(self.seed)

    def pick(self, logits: Tensor) -> int:
        if self.temperature <= 0:
            return int(torch.argmax(logits))
        probs = torch.softmax(logits / self.temperature, dim=-1)
        return int(torch.multinomial(probs, 1, generator=self._gen))


def _nll(logits: Tensor, target: int) -> float:
    return float(-torch.log_softmax(logits, dim=-1)[target])


def _record(pos: int, trace: StepTrace, next_id: int, model: PonderTransformer,
            probe: bool) -> DecodeRecord:
    rec = DecodeRecord(pos=pos, token_id=trace.token_id, khat=trace.khat, s=trace.s.tolist(),
                       w=trace.w.tolist(), nll=_nll(trace.logits, next_id), next_id=next_id)
    if probe and trace.probe_states is not None:
        logits = model.lm_logits(trace.probe_states)  # (K+1, V)
        rec.l0 = _nll(logits[0], next_id)
        partial = torch.cumsum(trace.s[:, None] * logits, dim=0)
        rec.ce_steps = (-torch.log_softmax(partial, dim=-1)[:, next_id]).tolist()
    return rec


@torch.no_grad()
def decode_next_token(session: DecodeSession, token_id: int,
                      sampling: Sampling | None = None) -> tuple[int, DecodeRecord]:
    """Ponder on ``token_id`` and emit the next token under ``sampling``."""
    sampling = sampling or Sampling()
    pos = session.t
    trace = session.ponder(token_id)
    nxt = sampling.pick(trace.logits)
    return nxt, _record(pos, trace, nxt, session.model, probe=False)


def generate(model: PonderTransformer, prompt: bytes | str, max_new_tokens: int,
             settings: PonderSettings, sampling: Sampling | None = None,
             alpha: float = 0.0) -> tuple[bytes, list[DecodeRecord]]:
    """Autoregressive generation; stops at EOS or after ``max_new_tokens``."""
    if max_new_tokens <= 0:
        return b"", []
    sampling = sampling or Sampling()
    session = DecodeSession(model, settings, alpha=alpha)
    ids = [BOS] + tokenize(prompt)
    for tok in ids[:-1]:
        session.ponder(tok)
    cur = ids[-1]
    out: list[int] = []
    records: list[DecodeRecord] = []
    for _ in range(max_new_tokens):
        cur, rec = decode_next_token(session, cur, sampling)
        records.append(rec)
        if cur == EOS:
            break
        out.append(cur)
    return detokenize(out), records


@dataclass
class EvalResult:
    mean_nll: float
    avg_steps: float
    n_tokens: int
    records: list[DecodeRecord] = field(default_factory=list)

    @property
    def ppl(self) -> float:
        return math.exp(self.mean_nll)


@torch.no_grad()
def evaluate_perplexity(model: PonderTransformer, chunks: Sequence[Tensor],
                        settings: PonderSettings, depth: str = ADAPTIVE_DEPTH,
                        alpha: float = 0.0, probe: bool = False) -> EvalResult:
    """Teacher-forced sequential evaluation over ``[BOS, x_1 .. x_n]`` chunks.

    ``depth='full'`` runs all K steps with untruncated integration.
    """
    model.eval()
    records: list[DecodeRecord] = []
    for chunk in chunks:
        ids = chunk.tolist()
        session = DecodeSession(model, settings, alpha=alpha, depth=depth)
        for pos in range(len(ids) - 1):
            trace = session.ponder(ids[pos], probe=probe)
            records.append(_record(pos, trace, ids[pos + 1], model, probe))
    if not records:
        raise ContractError("evaluation corpus has no scored tokens")
    nll = sum(r.nll for r in records) / len(records)
    steps = sum(r.khat for r in records) / len(records)
    return EvalResult(mean_nll=nll, avg_steps=steps, n_tokens=len(records), records=records)


@torch.no_grad()
def jacobi_log_probs(model: PonderTransformer, chunk: Tensor, settings: PonderSettings,
                     n_iters: int) -> Tensor:
    """Next-token log-probabilities of every chunk position from parallel Jacobi evaluation."""
    model.eval()
    res = jacobi_iterate(model, chunk[None, :-1], settings, n_iters=n_iters)
    h_hat = weighted_integration(res.s, res.states)[0]
    return torch.log_softmax(model.lm_logits(h_hat), dim=-1)


@torch.no_grad()
def sequential_log_probs(model: PonderTransformer, chunk: Tensor, settings: PonderSettings,
                         depth: str = ADAPTIVE_DEPTH) -> Tensor:
    session = DecodeSession(model, settings, depth=depth)
    rows = [torch.log_softmax(session.ponder(t).logits, dim=-1) for t in chunk[:-1].tolist()]
    return torch.stack(rows)


# -- compute accounting -------------------------------------------------------

@dataclass
class FlopsQuery:
    n_params: float
    tokens: float
    avg_exec_steps: float

    def __post_init__(self) -> None:
        if min(self.n_params, self.tokens, self.avg_exec_steps) < 0:
            raise ContractError("FLOPs query fields must be nonnegative")


@dataclass
class FlopsReport:
    total: float
    per_token: float


def flops_estimate(q: FlopsQuery) -> FlopsReport:
    """``6 * N * tokens * (1 + avg executed steps)``."""
    per_token = 6.0 * q.n_params * (1.0 + q.avg_exec_steps)
    return FlopsReport(total=per_token * q.tokens, per_token=per_token)


def implied_steps(per_token_flops: float, n_params: float) -> float:
    """Average executed steps that reproduce a per-token FLOPs figure."""
    return per_token_flops / (6.0 * n_params) - 1.0


# -- record log ---------------------------------------------------------------

def record_header(max_steps: int) -> list[str]:
    return (["pos", "token_id", "khat", "nll"]
            + [f"s_{k}" for k in range(max_steps + 1)]
            + [f"w_{k}" for k in range(max_steps + 1)])


def write_records(path: str | Path, records: Iterable[DecodeRecord], max_steps: int) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(record_header(max_steps))
        for r in records:
            out.writerow([r.pos, r.token_id, r.khat, f"{r.nll:.6g}",
                          *(f"{x:.6g}" for x in r.s), *(f"{x:.6g}" for x in r.w)])
            n += 1
    return n
