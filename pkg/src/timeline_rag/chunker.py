"""Partition a history slice into retrievable chunks.

Four strategies are supported: fixed-size overlapping event windows, fixed time
windows, visits and care-stage runs.  Any group longer than the chunk size is
re-split with the event strategy, so every final chunk fits the context length.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .timeline import CareStage, TimelineEvent


class Strategy(enum.IntEnum):
    EVENT = 0
    TIME = 1
    VISIT = 2
    STAGE = 3


@dataclass(frozen=True)
class ChunkDescriptor:
    patient_id: str
    strategy: Strategy
    start_index: int
    end_index: int
    ordinal: int

    def __len__(self) -> int:
        return self.end_index - self.start_index

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "strategy": self.strategy.name,
            "start": self.start_index,
            "end": self.end_index,
            "ordinal": self.ordinal,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "ChunkDescriptor":
        return cls(rec["patient_id"], Strategy[rec["strategy"]], int(rec["start"]), int(rec["end"]), int(rec["ordinal"]))


@dataclass(frozen=True)
class Chunk:
    descriptor: ChunkDescriptor
    events: tuple[TimelineEvent, ...]
    pad_length: int


@dataclass(frozen=True)
class ChunkingConfig:
    strategy: Strategy = Strategy.EVENT
    size: int = 256
    overlap: int = 32
    window_minutes: int = 360

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("chunk size must be >= 1")
        if not 0 <= self.overlap < self.size:
            raise ValueError("overlap must satisfy 0 <= overlap < size")
        if self.window_minutes < 1:
            raise ValueError("window_minutes must be >= 1")


def event_spans(n: int, size: int, overlap: int, offset: int = 0) -> list[tuple[int, int]]:
    if size < 1 or not 0 <= overlap < size:
        raise ValueError("need size >= 1 and 0 <= overlap < size")
    spans = []
    start, stride = 0, size - overlap
    while start < n:
        end = min(start + size, n)
        spans.append((offset + start, offset + end))
        if end == n:
            break
        start += stride
    return spans


def _resplit(groups: Iterable[tuple[int, int]], size: int, overlap: int) -> list[tuple[int, int]]:
    out = []
    for s, e in groups:
        if e - s > size:
            out.extend(event_spans(e - s, size, overlap, offset=s))
        else:
            out.append((s, e))
    return out


def _descriptors(spans, patient_id: str, strategy: Strategy) -> list[ChunkDescriptor]:
    return [ChunkDescriptor(patient_id, strategy, s, e, k) for k, (s, e) in enumerate(spans)]


def chunk_by_events(history: Sequence[TimelineEvent], size: int = 256, overlap: int = 32, patient_id: str = "") -> list[ChunkDescriptor]:
    return _descriptors(event_spans(len(history), size, overlap), patient_id, Strategy.EVENT)


def _group_by_key(history: Sequence[TimelineEvent], key, sticky) -> list[tuple[int, int]]:
    """Contiguous groups where ``key`` changes; events for which ``sticky`` is
    true never open a group and join the current one (or the first one)."""
    starts = []
    current = None
    force_break = False
    for i, ev in enumerate(history):
        if sticky(ev):
            if ev.care_stage == CareStage.GAP:
                force_break = True
            continue
        k = key(ev)
        if current is None or k != current or force_break:
            starts.append(i)
            current = k
        force_break = False
    if not history:
        return []
    if not starts:
        return [(0, len(history))]
    starts[0] = 0  # leading sticky events join the first group
    ends = starts[1:] + [len(history)]
    return list(zip(starts, ends))


def chunk_by_time(
    history: Sequence[TimelineEvent],
    window_minutes: int = 360,
    size: int = 256,
    overlap: int = 32,
    patient_id: str = "",
) -> list[ChunkDescriptor]:
    if window_minutes < 1:
        raise ValueError("window_minutes must be >= 1")
    times = [ev.time_minutes for ev in history if ev.time_minutes is not None]
    if not history:
        return []
    if not times:
        groups = [(0, len(history))]
    else:
        t0 = times[0]
        groups = _group_by_key(
            history,
            key=lambda ev: (ev.time_minutes - t0) // window_minutes,
            sticky=lambda ev: ev.time_minutes is None,
        )
    return _descriptors(_resplit(groups, size, overlap), patient_id, Strategy.TIME)


def _is_sticky(ev: TimelineEvent) -> bool:
    return ev.care_stage in (CareStage.GAP, CareStage.STATIC)


def chunk_by_visit(history: Sequence[TimelineEvent], size: int = 256, overlap: int = 32, patient_id: str = "") -> list[ChunkDescriptor]:
    groups = _group_by_key(history, key=lambda ev: ev.visit_order, sticky=lambda ev: _is_sticky(ev) or ev.visit_order == 0)
    return _descriptors(_resplit(groups, size, overlap), patient_id, Strategy.VISIT)


def chunk_by_stage(history: Sequence[TimelineEvent], size: int = 256, overlap: int = 32, patient_id: str = "") -> list[ChunkDescriptor]:
    groups = _group_by_key(history, key=lambda ev: ev.care_stage, sticky=_is_sticky)
    return _descriptors(_resplit(groups, size, overlap), patient_id, Strategy.STAGE)


def chunk_history(history: Sequence[TimelineEvent], config: ChunkingConfig, patient_id: str = "") -> list[ChunkDescriptor]:
    if config.strategy == Strategy.EVENT:
        return chunk_by_events(history, config.size, config.overlap, patient_id)
    if config.strategy == Strategy.TIME:
        return chunk_by_time(history, config.window_minutes, config.size, config.overlap, patient_id)
    if config.strategy == Strategy.VISIT:
        return chunk_by_visit(history, config.size, config.overlap, patient_id)
    return chunk_by_stage(history, config.size, config.overlap, patient_id)


class DescriptorOutOfRange(IndexError):
    pass


def materialize(descriptor: ChunkDescriptor, history: Sequence[TimelineEvent], context_length: int) -> Chunk:
    s, e = descriptor.start_index, descriptor.end_index
    if not 0 <= s < e <= len(history):
        raise DescriptorOutOfRange(
            f"descriptor out of range: [{s},{e}) over {len(history)} events (patient {descriptor.patient_id!r})"
        )
    if e - s > context_length:
        raise ValueError(f"chunk of {e - s} events exceeds context length {context_length}")
    return Chunk(descriptor, tuple(history[s:e]), context_length - (e - s))


def write_descriptors_jsonl(path: str | Path, descriptors: Iterable[ChunkDescriptor]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in descriptors:
            fh.write(json.dumps(d.to_json()) + "\n")


def read_descriptors_jsonl(path: str | Path) -> list[ChunkDescriptor]:
    with open(path, encoding="utf-8") as fh:
        return [ChunkDescriptor.from_json(json.loads(line)) for line in fh if line.strip()]
