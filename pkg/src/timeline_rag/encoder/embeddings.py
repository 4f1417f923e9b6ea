"""Six-component summed event embedding and Time2Vec."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..timeline import CLS, CareStage, EventType, RESERVED_TOKENS, TimelineEvent
from .layers import Params, accumulate, uniform_init

N_STAGES = len(CareStage)
N_TYPES = len(EventType)
VALUE_HIDDEN = 16
CLS_ID = RESERVED_TOKENS.index(CLS)


@dataclass
class SequenceBatch:
    """Padded event features, shape (N, T) each; ``mask`` flags real events."""

    concept: np.ndarray
    value: np.ndarray
    has_value: np.ndarray
    delta: np.ndarray
    visit: np.ndarray
    stage: np.ndarray
    etype: np.ndarray
    mask: np.ndarray

    @property
    def shape(self):
        return self.concept.shape

    def reshape(self, *shape) -> "SequenceBatch":
        return SequenceBatch(*(getattr(self, f).reshape(*shape) for f in _FIELDS))

    def take(self, idx) -> "SequenceBatch":
        return SequenceBatch(*(getattr(self, f)[idx] for f in _FIELDS))


_FIELDS = ("concept", "value", "has_value", "delta", "visit", "stage", "etype", "mask")


def empty_batch(shape) -> SequenceBatch:
    return SequenceBatch(
        np.zeros(shape, dtype=np.int64),
        np.zeros(shape),
        np.zeros(shape, dtype=bool),
        np.zeros(shape),
        np.zeros(shape, dtype=np.int64),
        np.zeros(shape, dtype=np.int64),
        np.zeros(shape, dtype=np.int64),
        np.zeros(shape, dtype=bool),
    )


def fill_row(batch: SequenceBatch, idx, events: Sequence[TimelineEvent], deltas: Sequence[float], offset: int = 0) -> None:
    for j, (ev, dt) in enumerate(zip(events, deltas), start=offset):
        pos = (*idx, j) if isinstance(idx, tuple) else (idx, j)
        batch.concept[pos] = ev.concept_id
        if ev.numeric_value is not None:
            batch.value[pos] = ev.numeric_value
            batch.has_value[pos] = True
        batch.delta[pos] = dt
        batch.visit[pos] = ev.visit_order
        batch.stage[pos] = int(ev.care_stage)
        batch.etype[pos] = int(ev.event_type)
        batch.mask[pos] = True


def put_cls(batch: SequenceBatch, idx) -> None:
    pos = (*idx, 0) if isinstance(idx, tuple) else (idx, 0)
    batch.concept[pos] = CLS_ID
    batch.stage[pos] = int(CareStage.STATIC)
    batch.etype[pos] = int(EventType.SPECIAL)
    batch.mask[pos] = True


def featurize(
    sequences: Sequence[tuple[Sequence[TimelineEvent], Sequence[float]]],
    length: int | None = None,
    cls: bool = False,
) -> SequenceBatch:
    """Pad a list of (events, scaled deltas) pairs into a batch."""
    extra = 1 if cls else 0
    T = length if length is not None else max([len(e) for e, _ in sequences] + [1]) + extra
    batch = empty_batch((len(sequences), T))
    for i, (events, deltas) in enumerate(sequences):
        if len(events) + extra > T:
            raise ValueError(f"sequence of {len(events)} events exceeds length {T}")
        if cls:
            put_cls(batch, i)
        fill_row(batch, i, events, deltas, offset=extra)
    return batch


def time2vec(tau, omega: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Linear first component, sinusoidal rest; ``tau`` broadcasts over leading dims."""
    z = np.asarray(tau, dtype=np.float64)[..., None] * omega + phi
    out = np.sin(z)
    out[..., 0] = z[..., 0]
    return out


class EventEmbedding:
    def __init__(self, vocab_size: int, d: int, max_visits: int = 64, prefix: str = "emb"):
        self.vocab_size, self.d, self.max_visits, self.prefix = vocab_size, d, max_visits, prefix

    def init(self, rng) -> Params:
        d, p = self.d, self.prefix
        return {
            f"{p}.concept": uniform_init(rng, (self.vocab_size, d), d),
            f"{p}.stage": uniform_init(rng, (N_STAGES, d), d),
            f"{p}.visit": uniform_init(rng, (self.max_visits, d), d),
            f"{p}.type": uniform_init(rng, (N_TYPES, d), d),
            f"{p}.null": uniform_init(rng, (d,), d),
            f"{p}.value.w1": uniform_init(rng, (1, VALUE_HIDDEN), 1),
            f"{p}.value.b1": uniform_init(rng, (VALUE_HIDDEN,), 1),
            f"{p}.value.w2": uniform_init(rng, (VALUE_HIDDEN, d), VALUE_HIDDEN),
            f"{p}.value.b2": uniform_init(rng, (d,), VALUE_HIDDEN),
            f"{p}.t2v.omega": uniform_init(rng, (d,), d),
            f"{p}.t2v.phi": uniform_init(rng, (d,), d),
        }

    def forward(self, p: Params, b: SequenceBatch, categorical_only: bool = False):
        pre = self.prefix
        visit = np.minimum(b.visit, self.max_visits - 1)
        e = p[f"{pre}.concept"][b.concept] + p[f"{pre}.stage"][b.stage] + p[f"{pre}.visit"][visit] + p[f"{pre}.type"][b.etype]
        cache = {"b": b, "visit": visit, "categorical_only": categorical_only}
        if not categorical_only:
            hv = np.tanh(b.value[..., None] * p[f"{pre}.value.w1"][0] + p[f"{pre}.value.b1"])
            vv = hv @ p[f"{pre}.value.w2"] + p[f"{pre}.value.b2"]
            has = b.has_value[..., None]
            e = e + np.where(has, vv, p[f"{pre}.null"])
            e = e + time2vec(b.delta, p[f"{pre}.t2v.omega"], p[f"{pre}.t2v.phi"])
            cache["hv"] = hv
        return e, cache

    def backward(self, p: Params, cache, de, grads: Params) -> None:
        pre, d = self.prefix, self.d
        b = cache["b"]
        de2 = de.reshape(-1, d)
        for name, ids, rows in (
            ("concept", b.concept, self.vocab_size),
            ("stage", b.stage, N_STAGES),
            ("visit", cache["visit"], self.max_visits),
            ("type", b.etype, N_TYPES),
        ):
            g = np.zeros((rows, d))
            np.add.at(g, ids.reshape(-1), de2)
            accumulate(grads, f"{pre}.{name}", g)
        if cache["categorical_only"]:
            return
        has = b.has_value[..., None]
        accumulate(grads, f"{pre}.null", np.where(has, 0.0, de).reshape(-1, d).sum(axis=0))
        dvv = np.where(has, de, 0.0)
        hv = cache["hv"]
        accumulate(grads, f"{pre}.value.w2", hv.reshape(-1, VALUE_HIDDEN).T @ dvv.reshape(-1, d))
        accumulate(grads, f"{pre}.value.b2", dvv.reshape(-1, d).sum(axis=0))
        dpre = (dvv @ p[f"{pre}.value.w2"].T) * (1.0 - hv**2)
        accumulate(grads, f"{pre}.value.w1", (b.value[..., None] * dpre).reshape(-1, VALUE_HIDDEN).sum(axis=0)[None, :])
        accumulate(grads, f"{pre}.value.b1", dpre.reshape(-1, VALUE_HIDDEN).sum(axis=0))
        # time2vec
        omega, phi = p[f"{pre}.t2v.omega"], p[f"{pre}.t2v.phi"]
        z = b.delta[..., None] * omega + phi
        dz = de * np.cos(z)
        dz[..., 0] = de[..., 0]
        accumulate(grads, f"{pre}.t2v.omega", (dz * b.delta[..., None]).reshape(-1, d).sum(axis=0))
        accumulate(grads, f"{pre}.t2v.phi", dz.reshape(-1, d).sum(axis=0))


def embed_event(event: TimelineEvent, scaled_delta: float, params: Params, embedding: EventEmbedding) -> np.ndarray:
    batch = featurize([([event], [scaled_delta])])
    e, _ = embedding.forward(params, batch)
    return e[0, 0]
