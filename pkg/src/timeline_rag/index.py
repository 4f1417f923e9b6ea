"""Per-patient exact cosine index over chunk embeddings.

Only chunk descriptors and vectors are stored; chunk contents are
re-materialized from the timeline at fetch time.

File layout (little-endian): magic ``ERGP``, u32 version, u32 d, u64 patient
count; per patient: u16 id length, id bytes, u32 entry count; per entry:
u8 strategy, u32 start, u32 end, u32 ordinal, d x float32.  A u64-length
prefixed UTF-8 JSON manifest follows the last patient.
"""

from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .chunker import Chunk, ChunkDescriptor, ChunkingConfig, Strategy, chunk_history, materialize
from .encoder.sequence import Retriever
from .timeline import PatientTimeline, TimeDeltaScaler, compute_deltas

log = logging.getLogger(__name__)

MAGIC = b"ERGP"
VERSION = 1


def _unit_from32(v32: np.ndarray) -> np.ndarray:
    v = v32.astype(np.float64)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class PatientEntries:
    descriptors: list[ChunkDescriptor]
    vectors32: np.ndarray
    vectors: np.ndarray = field(init=False)
    ends: np.ndarray = field(init=False)
    ordinals: np.ndarray = field(init=False)

    def __post_init__(self):
        d = self.vectors32.shape[1] if self.vectors32.ndim == 2 else 0
        self.vectors32 = np.ascontiguousarray(self.vectors32, dtype=np.float32).reshape(len(self.descriptors), d)
        self.vectors = _unit_from32(self.vectors32) if len(self.descriptors) else np.zeros((0, d))
        self.ends = np.array([x.end_index for x in self.descriptors], dtype=np.int64)
        self.ordinals = np.array([x.ordinal for x in self.descriptors], dtype=np.int64)
        if len(set(self.ordinals.tolist())) != len(self.ordinals):
            raise ValueError("duplicate chunk ordinals within a patient")


@dataclass
class VectorIndex:
    d: int
    patients: dict[str, PatientEntries]
    manifest: dict

    def __len__(self) -> int:
        return sum(len(p.descriptors) for p in self.patients.values())


@dataclass(frozen=True)
class SearchHit:
    descriptor: ChunkDescriptor
    similarity: float


def _encode_patient(timeline: PatientTimeline, config: ChunkingConfig, retriever: Retriever, scaler: TimeDeltaScaler):
    descs = chunk_history(timeline.events, config, timeline.patient_id)
    d = retriever.encoder.config.d
    if not descs:
        return PatientEntries([], np.zeros((0, d), dtype=np.float32))
    deltas = compute_deltas(timeline, scaler)
    seqs = [(timeline.events[x.start_index : x.end_index], deltas[x.start_index : x.end_index]) for x in descs]
    vecs = retriever.encode_batch(retriever.encoder.featurize(seqs, config.size))
    keep = np.isfinite(vecs).all(axis=1)
    for x in np.flatnonzero(~keep):
        log.warning("skipping degenerate chunk %s of patient %s", descs[x], timeline.patient_id)
    return PatientEntries([x for x, k in zip(descs, keep) if k], vecs[keep].astype(np.float32))


def build_index(
    timelines: Sequence[PatientTimeline],
    config: ChunkingConfig,
    retriever: Retriever,
    scaler: TimeDeltaScaler | None = None,
    encoder_digest: str = "",
    threads: int = 1,
) -> VectorIndex:
    """Chunk each full timeline, encode chunks with the frozen retriever and store unit vectors."""
    scaler = scaler or TimeDeltaScaler()
    ordered = sorted(timelines, key=lambda t: t.patient_id)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(lambda t: _encode_patient(t, config, retriever, scaler), ordered))
    else:
        entries = [_encode_patient(t, config, retriever, scaler) for t in ordered]
    manifest = {
        "strategy": config.strategy.name,
        "chunk_size": config.size,
        "overlap": config.overlap,
        "window_minutes": config.window_minutes,
        "encoder_digest": encoder_digest,
        "delta_max_minutes": scaler.delta_max_minutes,
    }
    d = retriever.encoder.config.d
    return VectorIndex(d, {t.patient_id: e for t, e in zip(ordered, entries)}, manifest)


def search(index: VectorIndex, patient_id: str, query_vector: np.ndarray, M: int, cutoff: int) -> list[SearchHit]:
    """Top-M entries by cosine among chunks ending at or before ``cutoff``.

    Ties are broken by ascending ordinal.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    entries = index.patients.get(patient_id)
    if entries is None or not entries.descriptors:
        return []
    eligible = np.flatnonzero(entries.ends <= cutoff)
    if eligible.size == 0:
        return []
    sims = entries.vectors[eligible] @ np.asarray(query_vector, dtype=np.float64)
    order = np.lexsort((entries.ordinals[eligible], -sims))[:M]
    return [SearchHit(entries.descriptors[eligible[i]], float(sims[i])) for i in order]


def fetch_chunks(
    index: VectorIndex,
    results: Sequence[SearchHit],
    timelines: Mapping[str, PatientTimeline],
    context_length: int | None = None,
) -> list[Chunk]:
    C = context_length or index.manifest.get("chunk_size", 256)
    return [materialize(h.descriptor, timelines[h.descriptor.patient_id].events, C) for h in results]


def write_index(path: str | Path, index: VectorIndex) -> None:
    parts = [MAGIC, struct.pack("<IIQ", VERSION, index.d, len(index.patients))]
    for pid, ent in index.patients.items():
        raw = pid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(ent.descriptors)))
        for desc, vec in zip(ent.descriptors, ent.vectors32):
            parts.append(struct.pack("<BIII", int(desc.strategy), desc.start_index, desc.end_index, desc.ordinal))
            parts.append(vec.astype("<f4").tobytes())
    manifest = json.dumps(index.manifest, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<Q", len(manifest)) + manifest)
    Path(path).write_bytes(b"".join(parts))


def read_index(path: str | Path) -> VectorIndex:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an index file")
    version, d, n_patients = struct.unpack_from("<IIQ", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported index version {version}")
    pos = 4 + struct.calcsize("<IIQ")
    patients = {}
    for _ in range(n_patients):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        pid = data[pos : pos + n].decode("utf-8")
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        descs, vecs = [], np.zeros((count, d), dtype=np.float32)
        for k in range(count):
            strategy, start, end, ordinal = struct.unpack_from("<BIII", data, pos)
            pos += 13
            descs.append(ChunkDescriptor(pid, Strategy(strategy), start, end, ordinal))
            vecs[k] = np.frombuffer(data, dtype="<f4", count=d, offset=pos)
            pos += 4 * d
        patients[pid] = PatientEntries(descs, vecs)
    (mlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    manifest = json.loads(data[pos : pos + mlen].decode("utf-8"))
    return VectorIndex(d, patients, manifest)
