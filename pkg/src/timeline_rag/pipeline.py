"""Example assembly: query/history split, retrieval against the index and featurization for the model."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .chunker import Chunk
from .encoder.embeddings import empty_batch, fill_row, put_cls
from .encoder.sequence import DegenerateEmbeddingError, Retriever, SequenceEncoder
from .fusion import FeatureSet, SlotOrder
from .index import SearchHit, VectorIndex, fetch_chunks, search
from .tasks import LabelRecord, MissingReference, TaskSpec
from .timeline import EmptyQueryError, PatientTimeline, TimeDeltaScaler, compute_deltas, split_query_history

log = logging.getLogger(__name__)


@dataclass
class Example:
    patient_id: str
    stay_ordinal: int
    label: int
    query_start: int
    query_stop: int
    query_deltas: list[float]
    query: tuple
    hits: list[SearchHit]
    chunks: list[Chunk]
    chunk_deltas: list[list[float]]

    @property
    def key(self) -> tuple[str, int]:
        return self.patient_id, self.stay_ordinal


def assemble_example(
    timeline: PatientTimeline,
    record: LabelRecord,
    task: TaskSpec,
    index: VectorIndex,
    retriever: Retriever,
    query_size: int,
    M: int,
    scaler: TimeDeltaScaler,
    slot_order: SlotOrder = SlotOrder.SIMILARITY,
) -> Example:
    split = split_query_history(timeline, task, record.stay_ordinal, query_size)
    deltas = compute_deltas(timeline, scaler)
    qd = deltas[split.query_start : split.query_stop]
    hits: list[SearchHit] = []
    if M > 0:
        qvec = retriever.encode(split.query, qd)
        hits = search(index, timeline.patient_id, qvec, M, split.query_start)
    if slot_order == SlotOrder.CHRONOLOGICAL:
        hits = sorted(hits, key=lambda h: h.descriptor.start_index)
    chunks = fetch_chunks(index, hits, {timeline.patient_id: timeline})
    cd = [deltas[c.descriptor.start_index : c.descriptor.end_index] for c in chunks]
    return Example(
        timeline.patient_id,
        record.stay_ordinal,
        int(record.label),
        split.query_start,
        split.query_stop,
        qd,
        split.query,
        hits,
        chunks,
        cd,
    )


def build_examples(
    timelines: Mapping[str, PatientTimeline],
    records: Sequence[LabelRecord],
    task: TaskSpec,
    index: VectorIndex,
    retriever: Retriever,
    query_size: int,
    M: int,
    scaler: TimeDeltaScaler | None = None,
    slot_order: SlotOrder = SlotOrder.SIMILARITY,
    threads: int = 1,
) -> tuple[list[Example], list[dict]]:
    """Assemble examples for ``records``; returns (examples in input order, exclusions with reasons)."""
    scaler = scaler or TimeDeltaScaler()

    def one(rec: LabelRecord):
        try:
            return assemble_example(timelines[rec.patient_id], rec, task, index, retriever, query_size, M, scaler, slot_order)
        except MissingReference as exc:
            return {"patient_id": rec.patient_id, "stay_ordinal": rec.stay_ordinal, "reason": exc.reason}
        except EmptyQueryError:
            return {"patient_id": rec.patient_id, "stay_ordinal": rec.stay_ordinal, "reason": "empty_query"}
        except DegenerateEmbeddingError:
            return {"patient_id": rec.patient_id, "stay_ordinal": rec.stay_ordinal, "reason": "degenerate_query"}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(r) for r in records]
    examples = [r for r in results if isinstance(r, Example)]
    excluded = [r for r in results if isinstance(r, dict)]
    return examples, excluded


def featurize_examples(
    examples: Sequence[Example],
    encoder: SequenceEncoder,
    query_size: int,
    chunk_size: int,
    M: int,
) -> FeatureSet:
    cls = int(encoder.uses_cls)
    N = len(examples)
    query = encoder.featurize([(ex.query, ex.query_deltas) for ex in examples], query_size) if N else empty_batch((0, query_size + cls))
    chunks = empty_batch((N, M, chunk_size + cls))
    valid = np.zeros((N, M), dtype=bool)
    for i, ex in enumerate(examples):
        for j, (ch, dl) in enumerate(zip(ex.chunks[:M], ex.chunk_deltas[:M])):
            if cls:
                put_cls(chunks, (i, j))
            fill_row(chunks, (i, j), ch.events, dl, offset=cls)
            valid[i, j] = True
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return FeatureSet(query, chunks, valid, labels, [ex.key for ex in examples])
