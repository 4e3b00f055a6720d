"""Byte-level tokenizer, toy corpus generation and batch sampling."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .errors import ContractError, DataError

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259


def tokenize(data: bytes | str) -> list[int]:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return list(data)


def detokenize(ids) -> bytes:
    """Inverse of :func:`tokenize`; special ids are dropped."""
    return bytes(int(i) for i in ids if int(i) < 256)


def token_label(token_id: int) -> str:
    if token_id == BOS:
        return "<bos>"
    if token_id == EOS:
        return "<eos>"
    if token_id == PAD:
        return "<pad>"
    ch = bytes([token_id]).decode("latin-1")
    return ch if ch.isprintable() and not ch.isspace() else f"0x{token_id:02x}"


def corpus_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def load_corpus(path: str | Path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data.path: no such file {str(path)!r}")
    data = path.read_bytes()
    if not data:
        raise DataError(f"data.path: {str(path)!r} is empty")
    return data


def split_corpus(data: bytes, heldout_fraction: float) -> tuple[bytes, bytes]:
    """Deterministic head/tail split; the held-out part is the tail."""
    cut = int(len(data) * (1.0 - heldout_fraction))
    return data[:cut], data[cut:]


# -- toy corpus -------------------------------------------------------------

_SUBJECTS = ["the cat", "a dog", "the old man", "my sister", "the farmer", "a small bird",
             "the teacher", "our neighbour", "the captain", "a young girl"]
_VERBS = ["sees", "finds", "likes", "follows", "paints", "carries", "remembers", "watches"]
_OBJECTS = ["the red ball", "a green apple", "the long river", "an empty box", "the tall tree",
            "a wooden chair", "the quiet house", "a blue kite"]
_PLACES = ["in the garden", "near the market", "at the station", "by the sea", "under the bridge",
           "on the hill"]


def _sentence(rng: random.Random) -> str:
    s = f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)}"
    if rng.random() < 0.5:
        s += f" {rng.choice(_PLACES)}"
    return s + ". "


def _sum_fact(rng: random.Random) -> str:
    a, b = rng.randrange(10, 100), rng.randrange(10, 100)
    return f"{a}+{b}={a + b}. "


def _count_line(rng: random.Random) -> str:
    start = rng.randrange(0, 90)
    return "count " + " ".join(str(i) for i in range(start, start + 5)) + ". "


def _copy_line(rng: random.Random) -> str:
    word = "".join(rng.choice("abcdefghij") for _ in range(rng.randrange(3, 6)))
    return f"say {word} {word}. "


def toy_corpus(n_bytes: int = 1 << 20, seed: int = 0) -> bytes:
    """A deterministic byte corpus mixing predictable and computational text.

    Template sentences are mostly predictable; sums, counting and copying
    lines contain tokens whose prediction needs more processing.
    """
    rng = random.Random(seed)
    makers = [_sentence, _sentence, _sum_fact, _count_line, _copy_line]
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        line = rng.choice(makers)(rng)
        if rng.random() < 0.15:
            line += "\n"
        parts.append(line)
        size += len(line)
    return "".join(parts).encode("ascii")[:n_bytes]


# -- batching ---------------------------------------------------------------

@dataclass
class BatchSampler:
    """Random fixed-length windows, each prefixed with BOS.

    Returns ``(B, seq_len + 1)`` tensors; position ``i`` predicts ``i + 1``.
    """

    data: Tensor
    batch_size: int
    seq_len: int
    seed: int

    def __post_init__(self) -> None:
        if self.data.numel() < self.seq_len + 1:
            raise DataError("corpus shorter than one training window")
        self._gen = torch.Generator().manual_seed(self.seed)

    def __iter__(self):
        return self

    def __next__(self) -> Tensor:
        hi = self.data.numel() - self.seq_len + 1
        starts = torch.randint(0, hi, (self.batch_size,), generator=self._gen)
        rows = [self.data[s : s + self.seq_len] for s in starts.tolist()]
        body = torch.stack(rows)
        bos = torch.full((self.batch_size, 1), BOS, dtype=torch.long)
        return torch.cat([bos, body], dim=1)


def as_tensor(data: bytes) -> Tensor:
    return torch.tensor(tokenize(data), dtype=torch.long)


def eval_chunks(data: bytes, chunk_len: int, max_tokens: int | None = None) -> list[Tensor]:
    """Consecutive non-overlapping chunks for teacher-forced evaluation.

    Each chunk is ``[BOS, x_1 .. x_n]``; every chunk position predicts the next
    byte, so a chunk of ``n`` bytes supplies ``n`` scored targets.
    """
    if not data:
        raise ContractError("evaluation corpus is empty")
    ids = tokenize(data)
    if max_tokens is not None:
        ids = ids[:max_tokens]
    chunks = []
    for i in range(0, len(ids), chunk_len):
        piece = ids[i : i + chunk_len]
        chunks.append(torch.tensor([BOS] + piece, dtype=torch.long))
    return chunks
