"""Per-example reports of prototype assignments, chunk alignment and weights, and visit/stage aggregation."""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .fusion import FeatureSet, RagModel, stable_sigmoid
from .pipeline import Example
from .timeline import CareStage


@dataclass
class ChunkReport:
    start: int
    end: int
    ordinal: int
    similarity: float
    alpha: float
    weight: float
    visit_order: int
    care_stage: str
    top_prototype_mass: list[float]


@dataclass
class InspectionReport:
    patient_id: str
    stay_ordinal: int
    label: int
    probability: float
    query_top_prototypes: list[tuple[int, float]]
    chunks: list[ChunkReport]
    visit_weights: dict[int, float]
    stage_weights: dict[str, float]

    def to_json(self) -> dict:
        rec = asdict(self)
        rec["visit_weights"] = {str(k): v for k, v in self.visit_weights.items()}
        return rec


def _dominant(values):
    return Counter(values).most_common(1)[0][0]


def _chunk_visit_stage(events) -> tuple[int, str]:
    real = [e for e in events if e.care_stage not in (CareStage.GAP, CareStage.STATIC)] or list(events)
    return int(_dominant([e.visit_order for e in real])), CareStage(_dominant([e.care_stage for e in real])).name


def inspect(model: RagModel, params, examples: Sequence[Example], features: FeatureSet, top_k: int = 5) -> list[InspectionReport]:
    """Reports for ``examples`` (featurized in the same order as ``features``)."""
    if len(examples) != len(features):
        raise ValueError("examples and features differ in length")
    out = []
    bs = 256
    for s in range(0, len(examples), bs):
        idx = np.arange(s, min(s + bs, len(examples)))
        fr = model.forward(params, features.take(idx))
        probs = stable_sigmoid(fr.logits)
        for row, i in enumerate(idx):
            ex = examples[i]
            pq = fr.pi_q[row]
            top = np.argsort(-pq, kind="stable")[:top_k]
            chunks = []
            visit_w: dict[int, float] = defaultdict(float)
            stage_w: dict[str, float] = defaultdict(float)
            for j, (hit, ch) in enumerate(zip(ex.hits, ex.chunks)):
                if fr.weights is None or j >= fr.weights.shape[1]:
                    break
                v, st = _chunk_visit_stage(ch.events)
                w = float(fr.weights[row, j])
                chunks.append(
                    ChunkReport(
                        hit.descriptor.start_index,
                        hit.descriptor.end_index,
                        hit.descriptor.ordinal,
                        hit.similarity,
                        float(fr.alphas[row, j]),
                        w,
                        v,
                        st,
                        [float(x) for x in fr.pi_h[row, j, top]],
                    )
                )
                visit_w[v] += w
                stage_w[st] += w
            out.append(
                InspectionReport(
                    ex.patient_id,
                    ex.stay_ordinal,
                    ex.label,
                    float(probs[row]),
                    [(int(k), float(pq[k])) for k in top],
                    chunks,
                    dict(sorted(visit_w.items())),
                    dict(sorted(stage_w.items())),
                )
            )
    return out


def marker_attribution(reports: Sequence[InspectionReport], examples: Sequence[Example], marker_id: int, threshold: float = 0.5):
    """Among correctly predicted positives carrying the marker in a retrieved chunk,
    the fraction whose highest-weight chunk contains the marker.  Returns (rate, count)."""
    hits = total = 0
    for rep, ex in zip(reports, examples):
        if ex.label != 1 or rep.probability < threshold or not rep.chunks:
            continue
        has = [any(e.concept_id == marker_id for e in ch.events) for ch in ex.chunks[: len(rep.chunks)]]
        if not any(has):
            continue
        total += 1
        best = int(np.argmax([c.weight for c in rep.chunks]))
        hits += has[best]
    return (hits / total if total else float("nan")), total


def write_reports(directory: str | Path, reports: Sequence[InspectionReport]) -> None:
    directory = Path(directory)
    with open(directory / "inspection.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json()) + "\n")
    visit_tot: dict[int, float] = defaultdict(float)
    stage_tot: dict[str, float] = defaultdict(float)
    for r in reports:
        for k, v in r.visit_weights.items():
            visit_tot[k] += v
        for k, v in r.stage_weights.items():
            stage_tot[k] += v
    n = max(len(reports), 1)
    with open(directory / "visit_weights.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["visit_order", "mean_weight"])
        for k in sorted(visit_tot):
            wr.writerow([k, repr(visit_tot[k] / n)])
    with open(directory / "stage_weights.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["care_stage", "mean_weight"])
        for k in sorted(stage_tot):
            wr.writerow([k, repr(stage_tot[k] / n)])
