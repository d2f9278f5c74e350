"""Next-token models: a pluggable interface, a uniform baseline, and an
interpolated absolute-discount n-gram model.

The n-gram model counts every context of length 0..n-1 within each
training sequence independently (no windows span sequence boundaries)
and smooths by absolute discounting with interpolation down to the
unigram level and finally a uniform floor, so every conditional
distribution sums to one and assigns positive mass everywhere.
"""

from __future__ import annotations

import struct
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ModelFormatError
from .vocab import VOCAB_SIZE

MODEL_MAGIC = b"SYMLM001"
DEFAULT_ORDER = 5
DEFAULT_DISCOUNT = 0.5
MAX_ORDER = 8

# Reference scale for a future neural backend behind NextTokenModel.
# Recorded here as configuration only; nothing in this package uses them.
NEURAL_BACKEND_DEFAULTS = {
    "context_window": 10_240,
    "layers": 12,
    "attention_heads": 12,
    "embedding_dim": 768,
}


class NextTokenModel(Protocol):
    """Anything that scores the next token given a context."""

    context_limit: int

    def score(self, context: Sequence[int]) -> np.ndarray:
        """336 finite log-scores; softmax gives the conditional distribution."""
        ...


class UniformModel:
    """Maximum-entropy baseline: every token equally likely."""

    context_limit = 0

    def __init__(self) -> None:
        self._scores = np.zeros(VOCAB_SIZE)

    def score(self, context: Sequence[int]) -> np.ndarray:
        return self._scores


class NgramModel:
    """Interpolated absolute-discount n-gram model over the 336-token vocabulary."""

    vocab_size = VOCAB_SIZE

    def __init__(self, order: int, discount: float = DEFAULT_DISCOUNT):
        if not 1 <= order <= MAX_ORDER:
            raise ValueError(f"order must be 1..{MAX_ORDER}, got {order}")
        if not 0.0 < discount < 1.0:
            raise ValueError(f"discount must be in (0, 1), got {discount}")
        self.order = order
        self.discount = discount
        self.context_limit = order - 1
        # counts[k]: contexts of length k -> {next id: count}
        self._counts: list[dict[tuple[int, ...], dict[int, int]]] = [
            {} for _ in range(order)
        ]
        self._tables: list[dict[tuple[int, ...], tuple]] | None = None

    def add_sequence(self, seq: Sequence[int]) -> None:
        self._tables = None
        seq = list(seq)
        for k in range(self.order):
            level = self._counts[k]
            for i in range(k, len(seq)):
                ctx = tuple(seq[i - k : i])
                nxt = seq[i]
                slot = level.setdefault(ctx, {})
                slot[nxt] = slot.get(nxt, 0) + 1

    def _freeze(self) -> list[dict[tuple[int, ...], tuple]]:
        if self._tables is None:
            tables = []
            for level in self._counts:
                frozen = {}
                for ctx, slot in level.items():
                    ids = np.fromiter(slot.keys(), dtype=np.int64, count=len(slot))
                    cnts = np.fromiter(slot.values(), dtype=np.float64, count=len(slot))
                    frozen[ctx] = (ids, cnts, float(cnts.sum()), len(slot))
                tables.append(frozen)
            self._tables = tables
        return self._tables

    def probabilities(self, context: Sequence[int]) -> np.ndarray:
        """Full conditional distribution over the vocabulary."""
        tables = self._freeze()
        ctx = tuple(context[-self.context_limit :]) if self.context_limit else ()
        p = np.full(VOCAB_SIZE, 1.0 / VOCAB_SIZE)
        for k in range(self.order):
            if k > len(ctx):
                break
            key = ctx[len(ctx) - k :]
            entry = tables[k].get(key)
            if entry is None:
                break
            ids, cnts, total, ntypes = entry
            p *= self.discount * ntypes / total
            p[ids] += (cnts - self.discount) / total
        return p

    def score(self, context: Sequence[int]) -> np.ndarray:
        return np.log(self.probabilities(context))

    def iter_counts(self) -> Iterable[tuple[tuple[int, ...], int, int]]:
        """All (context, id, count) triples in deterministic order."""
        for level in self._counts:
            for ctx in sorted(level):
                slot = level[ctx]
                for nxt in sorted(slot):
                    yield ctx, nxt, slot[nxt]


def train_ngram(
    corpus: Iterable[Sequence[int]],
    order: int = DEFAULT_ORDER,
    discount: float = DEFAULT_DISCOUNT,
) -> NgramModel:
    """Count all length-<=order windows of every sequence and smooth."""
    model = NgramModel(order, discount)
    n = 0
    for seq in corpus:
        model.add_sequence(seq)
        n += 1
    if n == 0:
        raise ValueError("training corpus is empty")
    model._freeze()
    return model


def save_model(model: NgramModel) -> bytes:
    triples = list(model.iter_counts())
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<Id", model.order, model.discount)
    out += struct.pack("<Q", len(triples))
    for ctx, nxt, count in triples:
        out += struct.pack("<B", len(ctx))
        out += struct.pack(f"<{len(ctx)}H", *ctx) if ctx else b""
        out += struct.pack("<HQ", nxt, count)
    return bytes(out)


def load_model(data: bytes) -> NgramModel:
    if data[:8] != MODEL_MAGIC:
        raise ModelFormatError("bad magic; not a model file")
    try:
        order, discount = struct.unpack_from("<Id", data, 8)
        (n_triples,) = struct.unpack_from("<Q", data, 20)
        offset = 28
        model = NgramModel(order, discount)
        for _ in range(n_triples):
            (ctx_len,) = struct.unpack_from("<B", data, offset)
            offset += 1
            ctx = struct.unpack_from(f"<{ctx_len}H", data, offset) if ctx_len else ()
            offset += 2 * ctx_len
            nxt, count = struct.unpack_from("<HQ", data, offset)
            offset += 10
            if ctx_len >= order or nxt >= VOCAB_SIZE or count < 1:
                raise ModelFormatError(f"corrupt count entry at byte {offset}")
            model._counts[ctx_len].setdefault(tuple(ctx), {})[nxt] = count
    except struct.error as exc:
        raise ModelFormatError(f"truncated model stream: {exc}") from None
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None
    if offset != len(data):
        raise ModelFormatError(f"trailing bytes after model data (byte {offset})")
    model._freeze()
    return model


def save_model_file(model: NgramModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(model))


def load_model_file(path) -> NgramModel:
    with open(path, "rb") as fh:
        return load_model(fh.read())


def perplexity(model: NextTokenModel, corpus: Iterable[Sequence[int]]) -> float:
    """exp of the mean negative log-likelihood over every token position."""
    total = 0.0
    count = 0
    for seq in corpus:
        seq = list(seq)
        for i, token in enumerate(seq):
            scores = model.score(seq[:i])
            logp = scores - _logsumexp(scores)
            total += float(logp[token])
            count += 1
    if count == 0:
        raise ValueError("corpus has no tokens")
    return float(np.exp(-total / count))


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))
