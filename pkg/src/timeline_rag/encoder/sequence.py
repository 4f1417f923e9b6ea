"""Sequence encoders over embedded events, pooling and the frozen retriever."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..timeline import TimelineEvent
from .embeddings import EventEmbedding, SequenceBatch, featurize
from .layers import Params, TransformerStack, accumulate, uniform_init


class EncoderKind(enum.Enum):
    BAG = "bag"
    ATTENTION = "attention"


class Pooling(enum.Enum):
    MEAN = "mean"
    CLS = "cls"


@dataclass(frozen=True)
class SequenceEncoderConfig:
    kind: EncoderKind = EncoderKind.BAG
    d: int = 32
    layers: int = 1
    heads: int = 1
    pooling: Pooling = Pooling.MEAN
    rotary: bool = False
    max_visits: int = 64

    def __post_init__(self):
        if self.kind == EncoderKind.ATTENTION and self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")


class EmptySequenceError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


class SequenceEncoder:
    """Event embedding followed by a BAG or ATTENTION body, with pooling.

    BAG: each token is ``tanh(e W + b)``.  ATTENTION: pre-norm transformer
    blocks with PAD keys masked.  Pooling is the mean over real tokens or the
    token at position 0 (the caller prepends CLS for CLS pooling).
    """

    def __init__(self, vocab_size: int, config: SequenceEncoderConfig, prefix: str = "enc", emb_prefix: str = "emb"):
        self.config = config
        self.prefix = prefix
        self.embedding = EventEmbedding(vocab_size, config.d, config.max_visits, prefix=emb_prefix)
        if config.kind == EncoderKind.ATTENTION:
            self.body = TransformerStack(prefix, config.d, config.heads, config.layers, rotary=config.rotary)
        else:
            self.body = None

    @property
    def uses_cls(self) -> bool:
        return self.config.pooling == Pooling.CLS

    def init(self, rng) -> Params:
        p = self.embedding.init(rng)
        d = self.config.d
        if self.body is None:
            p[f"{self.prefix}.w"] = uniform_init(rng, (d, d), d)
            p[f"{self.prefix}.b"] = uniform_init(rng, (d,), d)
        else:
            p.update(self.body.init(rng))
        return p

    def featurize(self, sequences, length: int | None = None) -> SequenceBatch:
        return featurize(sequences, None if length is None else length + int(self.uses_cls), cls=self.uses_cls)

    def forward(self, p: Params, batch: SequenceBatch, categorical_only: bool = False):
        """Returns (pooled (N, d), tokens (N, T, d), cache)."""
        e, ecache = self.embedding.forward(p, batch, categorical_only)
        mask = batch.mask
        if self.body is None:
            h = np.tanh(e @ p[f"{self.prefix}.w"] + p[f"{self.prefix}.b"])
            bcache = (e, h)
        else:
            h, bcache = self.body.forward(p, e, mask)
        if self.uses_cls:
            pooled = h[:, 0, :]
            n = None
        else:
            n = np.maximum(mask.sum(axis=1, keepdims=True), 1)
            pooled = (h * mask[..., None]).sum(axis=1) / n
        return pooled, h, (ecache, bcache, mask, n, h.shape)

    def backward(self, p: Params, cache, dpooled, grads: Params, dtokens=None) -> None:
        ecache, bcache, mask, n, shape = cache
        dh = np.zeros(shape) if dtokens is None else np.array(dtokens, dtype=np.float64)
        if dpooled is not None:
            if self.uses_cls:
                dh[:, 0, :] += dpooled
            else:
                dh += (dpooled / n)[:, None, :] * mask[..., None]
        if self.body is None:
            e, h = bcache
            da = dh * (1.0 - h**2)
            d = self.config.d
            accumulate(grads, f"{self.prefix}.w", e.reshape(-1, d).T @ da.reshape(-1, d))
            accumulate(grads, f"{self.prefix}.b", da.reshape(-1, d).sum(axis=0))
            de = da @ p[f"{self.prefix}.w"].T
        else:
            de = self.body.backward(p, bcache, dh, grads)
        self.embedding.backward(p, ecache, de, grads)

    def param_names(self, params: Params) -> list[str]:
        pre = (f"{self.prefix}.", f"{self.embedding.prefix}.")
        return [k for k in params if k.startswith(pre)]


def encode_sequence(
    events: Sequence[TimelineEvent],
    deltas: Sequence[float],
    params: Params,
    encoder: SequenceEncoder,
    length: int | None = None,
):
    """Encode one sequence; returns (pooled d-vector, per-token vectors of real events)."""
    if not events:
        raise EmptySequenceError("empty sequence")
    batch = encoder.featurize([(events, deltas)], length)
    pooled, tokens, _ = encoder.forward(params, batch)
    return pooled[0], tokens[0][batch.mask[0]]


def normalize_rows(x: np.ndarray, eps: float = 0.0) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= eps):
        raise DegenerateEmbeddingError("degenerate embedding")
    return x / norms


class Retriever:
    """Frozen snapshot of an encoder; produces unit-norm pooled vectors."""

    def __init__(self, encoder: SequenceEncoder, params: Params):
        self.encoder = encoder
        names = encoder.param_names(params)
        self.params = {k: params[k].copy() for k in names}
        for v in self.params.values():
            v.setflags(write=False)

    @classmethod
    def snapshot(cls, encoder: SequenceEncoder, params: Params) -> "Retriever":
        return cls(copy.deepcopy(encoder), params)

    def encode_batch(self, batch: SequenceBatch) -> np.ndarray:
        """Unit vectors for every row; rows with zero norm come back as NaN."""
        pooled, _, _ = self.encoder.forward(self.params, batch)
        norms = np.linalg.norm(pooled, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = pooled / norms
        out[(norms[:, 0] == 0) | ~batch.mask.any(axis=1)] = np.nan
        return out

    def encode(self, events: Sequence[TimelineEvent], deltas: Sequence[float]) -> np.ndarray:
        if not events:
            raise EmptySequenceError("empty sequence")
        pooled, _ = encode_sequence(events, deltas, self.params, self.encoder)
        return normalize_rows(pooled[None, :])[0]


def retriever_encode(events, deltas, retriever: Retriever) -> np.ndarray:
    return retriever.encode(events, deltas)
