"""Prediction tasks, labelling rules, patient-level splits and the synthetic timeline generator."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .timeline import (
    DEATH,
    HOSP_ADMIT,
    HOSP_DISCHARGE,
    ICU_ADMIT,
    ICU_DISCHARGE,
    MINUTES_PER_DAY,
    RESERVED_TOKENS,
    CareStage,
    EventType,
    PatientTimeline,
    RawEvent,
    Vocabulary,
    build_timeline,
    read_events_jsonl,
    split_at,
    last_index_at_or_before,
    write_events_jsonl,
)

_ID = {tok: RESERVED_TOKENS.index(tok) for tok in (ICU_ADMIT, ICU_DISCHARGE, HOSP_ADMIT, HOSP_DISCHARGE, DEATH)}


class TaskName(enum.Enum):
    IHM_48H = "IHM_48H"
    LOS7_24H = "LOS7_24H"
    READMIT_30D = "READMIT_30D"
    MORT_1Y = "MORT_1Y"


class Reference(enum.Enum):
    ICU_ADMIT = "ICU_ADMIT"
    ICU_DISCHARGE = "ICU_DISCHARGE"


@dataclass(frozen=True)
class TaskSpec:
    name: TaskName
    reference: Reference
    window_minutes: Optional[int]
    label_rule: str
    strict_los: bool = False

    def __post_init__(self):
        windowed = self.name in (TaskName.IHM_48H, TaskName.LOS7_24H)
        if windowed != (self.window_minutes is not None):
            raise ValueError(f"{self.name.value}: window must be set exactly for the 48h/24h tasks")


TASKS = {
    TaskName.IHM_48H: TaskSpec(TaskName.IHM_48H, Reference.ICU_ADMIT, 2880, "death token within the hospital admission"),
    TaskName.LOS7_24H: TaskSpec(TaskName.LOS7_24H, Reference.ICU_ADMIT, 1440, "ICU stay of at least 7 days"),
    TaskName.READMIT_30D: TaskSpec(TaskName.READMIT_30D, Reference.ICU_DISCHARGE, None, "next ICU admission within 30 days"),
    TaskName.MORT_1Y: TaskSpec(TaskName.MORT_1Y, Reference.ICU_DISCHARGE, None, "death within 365 days of discharge"),
}


def get_task(name: str | TaskName) -> TaskSpec:
    return TASKS[TaskName(name) if isinstance(name, str) else name]


class MissingReference(ValueError):
    """Raised when a timeline lacks the markers a task needs; ``reason`` is a short code."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass(frozen=True)
class IcuStay:
    ordinal: int
    admit_index: int
    admit_time: int
    discharge_index: Optional[int]
    discharge_time: Optional[int]
    hosp_discharge_time: Optional[int]


def find_icu_stays(timeline: PatientTimeline) -> list[IcuStay]:
    ev = timeline.events
    stays = []
    i = 0
    while i < len(ev):
        if ev[i].concept_id == _ID[ICU_ADMIT]:
            d_idx = next((j for j in range(i + 1, len(ev)) if ev[j].concept_id == _ID[ICU_DISCHARGE]), None)
            nxt_admit = next((j for j in range(i + 1, len(ev)) if ev[j].concept_id == _ID[ICU_ADMIT]), len(ev))
            if d_idx is not None and d_idx > nxt_admit:
                d_idx = None
            after = d_idx if d_idx is not None else i
            h_idx = next((j for j in range(after, len(ev)) if ev[j].concept_id == _ID[HOSP_DISCHARGE]), None)
            h_time = None
            if h_idx is not None and ev[h_idx].visit_order == ev[i].visit_order:
                h_time = ev[h_idx].time_minutes
            stays.append(
                IcuStay(
                    len(stays),
                    i,
                    ev[i].time_minutes,
                    d_idx,
                    None if d_idx is None else ev[d_idx].time_minutes,
                    h_time,
                )
            )
        i += 1
    return stays


def _stay(timeline: PatientTimeline, stay: int) -> IcuStay:
    stays = find_icu_stays(timeline)
    if not stays:
        raise MissingReference("no_icu_admission")
    try:
        return stays[stay]
    except IndexError:
        raise MissingReference("no_such_stay") from None


def window_end_time(timeline: PatientTimeline, task: TaskSpec, stay: int = -1) -> int:
    s = _stay(timeline, stay)
    if task.reference == Reference.ICU_ADMIT:
        return s.admit_time + task.window_minutes
    if s.discharge_time is None:
        raise MissingReference("no_icu_discharge")
    return s.discharge_time


def _death_time(timeline: PatientTimeline) -> Optional[int]:
    for ev in reversed(timeline.events):
        if ev.concept_id == _ID[DEATH]:
            return ev.time_minutes
    return None


def label(timeline: PatientTimeline, task: TaskSpec, stay: int = -1) -> int:
    s = _stay(timeline, stay)
    death = _death_time(timeline)
    if task.name == TaskName.IHM_48H:
        if death is None or death < s.admit_time:
            return 0
        end = s.hosp_discharge_time if s.hosp_discharge_time is not None else s.discharge_time
        return int(end is None or death <= end)
    if s.discharge_time is None:
        raise MissingReference("no_icu_discharge")
    if task.name == TaskName.LOS7_24H:
        los = s.discharge_time - s.admit_time
        threshold = 7 * MINUTES_PER_DAY
        return int(los > threshold if task.strict_los else los >= threshold)
    if task.name == TaskName.READMIT_30D:
        later = [x for x in find_icu_stays(timeline) if x.admit_index > s.admit_index]
        return int(bool(later) and later[0].admit_time - s.discharge_time <= 30 * MINUTES_PER_DAY)
    # MORT_1Y: stays within one year of the death date are positive
    if death is None:
        return 0
    ref = s.hosp_discharge_time if s.hosp_discharge_time is not None else s.discharge_time
    return int(death - ref <= 365 * MINUTES_PER_DAY)


# Synthetic data ------------------------------------------------------------

MARKER_CODE = "MARKER//PLANTED"
QUERY_FEATURE_CODES = ("QFEAT//NEG", "QFEAT//POS")
_MEDICAL_TYPES = (EventType.LAB, EventType.MEDICATION, EventType.MICROBIOLOGY, EventType.DIAGNOSIS, EventType.PROCEDURE, EventType.DRG)
_ICU_TYPES = (EventType.ICU_CHART, EventType.ICU_FLUID_OUTPUT, EventType.ICU_PROCEDURE, EventType.ICU_INFUSION)
_VALUED = (EventType.LAB, EventType.ICU_CHART, EventType.ICU_INFUSION)


@dataclass(frozen=True)
class SyntheticConfig:
    """Generator settings.

    Labels of ``task`` follow the planted rule: with probability
    ``signal_strength`` the label equals marker presence, otherwise it equals a
    query-local feature bit.  Both bits are fair coins (``marker_rate`` for the
    marker).
    """

    patients: int = 2000
    visits: tuple[int, int] = (2, 5)
    events_per_visit: tuple[int, int] = (8, 20)
    marker_code: str = MARKER_CODE
    marker_copies: int = 8
    marker_rate: float = 0.5
    signal_strength: float = 0.9
    noise_codes: int = 500
    zipf_exponent: float = 1.1
    query_size: int = 32
    task: str = "IHM_48H"
    seed: int = 0

    def __post_init__(self):
        if self.visits[0] < 2:
            raise ValueError("need at least two prior visits so the marker sits two visits before the index stay")
        if not 0 <= self.signal_strength <= 1:
            raise ValueError("signal_strength must be in [0, 1]")


@dataclass(frozen=True)
class LabelRecord:
    patient_id: str
    stay_ordinal: int
    task: str
    label: int


@dataclass
class SyntheticDataset:
    timelines: dict[str, PatientTimeline]
    raw: dict[str, list[RawEvent]]
    labels: list[LabelRecord]
    manifest: dict
    vocab: Vocabulary
    excluded: list[dict] = field(default_factory=list)

    def labels_for(self, task: str) -> list[LabelRecord]:
        return [r for r in self.labels if r.task == task]


def _patient_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, i]))


def _noise_event(rng, probs, t, stage, icu: bool) -> RawEvent:
    k = int(rng.choice(len(probs), p=probs))
    types = _ICU_TYPES if icu else _MEDICAL_TYPES
    etype = types[k % len(types)]
    code = f"{'ICU' if icu else etype.name}//{k}"
    value = float(rng.standard_normal()) if etype in _VALUED else None
    return RawEvent(code, value, int(t), stage, etype)


def _visit_events(rng, probs, t0: int, n: int, stage: CareStage, icu=False, step=(10, 240)):
    out, t = [], t0
    for _ in range(n):
        t += int(rng.integers(*step))
        out.append(_noise_event(rng, probs, t, stage, icu))
    return out, t


def _generate_patient(cfg: SyntheticConfig, i: int, probs) -> tuple[list[RawEvent], dict]:
    rng = _patient_rng(cfg.seed, i)
    has_marker = bool(rng.random() < cfg.marker_rate)
    qbit = int(rng.random() < 0.5)
    from_marker = bool(rng.random() < cfg.signal_strength)
    y = int(has_marker) if from_marker else qbit

    raw: list[RawEvent] = [
        RawEvent("GENDER//" + ("F" if rng.random() < 0.5 else "M"), None, None, CareStage.STATIC, EventType.STATIC_DEMO),
        RawEvent(f"RACE//{int(rng.integers(0, 11))}", None, None, CareStage.STATIC, EventType.STATIC_DEMO),
    ]
    n_prior = int(rng.integers(cfg.visits[0], cfg.visits[1] + 1))
    marker_visit = int(rng.integers(0, n_prior - 1)) if has_marker else -1
    t = int(rng.integers(0, 5 * 365 * MINUTES_PER_DAY))
    lo, hi = cfg.events_per_visit
    for v in range(n_prior):
        kind = rng.choice(3)
        n = int(rng.integers(lo, hi + 1))
        if kind == 0:
            events, t = _visit_events(rng, probs, t, n, CareStage.OUTP)
        elif kind == 1:
            events, t = _visit_events(rng, probs, t, n, CareStage.ED)
        else:
            n_ed = int(rng.integers(1, 4))
            ed, t = _visit_events(rng, probs, t, n_ed, CareStage.ED)
            t += 30
            adm = [RawEvent(HOSP_ADMIT, None, t, CareStage.HOSP, EventType.ADMIN)]
            hosp, t = _visit_events(rng, probs, t, max(n - n_ed, 1), CareStage.HOSP)
            t += 30
            events = ed + adm + hosp + [RawEvent(HOSP_DISCHARGE, None, t, CareStage.HOSP, EventType.ADMIN)]
        if v == marker_visit:
            body = [k for k, e in enumerate(events) if e.type != EventType.ADMIN]
            for k in sorted(rng.choice(body, size=min(cfg.marker_copies, len(body)), replace=False), reverse=True):
                e = events[k]
                events.insert(k + 1, RawEvent(cfg.marker_code, None, e.time, e.stage, EventType.DIAGNOSIS))
        raw.extend(events)
        t += int(rng.integers(8, 400)) * MINUTES_PER_DAY

    # index admission: ED -> HOSP -> ICU
    ed, t = _visit_events(rng, probs, t, int(rng.integers(1, 4)), CareStage.ED)
    t += 30
    raw += ed + [RawEvent(HOSP_ADMIT, None, t, CareStage.HOSP, EventType.ADMIN)]
    hosp, t = _visit_events(rng, probs, t, int(rng.integers(cfg.query_size // 2, cfg.query_size)), CareStage.HOSP)
    raw += hosp
    t += 60
    admit = t
    los = 2 * MINUTES_PER_DAY + int(rng.integers(12 * 60, 8 * MINUTES_PER_DAY))
    raw.append(RawEvent(ICU_ADMIT, None, admit, CareStage.ICU, EventType.ADMIN))
    qtime = admit + int(rng.integers(60, 20 * 60))
    icu = []
    tt = admit
    qdone = False
    while True:
        tt += int(rng.integers(90, 240))
        if not qdone and tt >= qtime:
            icu.append(RawEvent(QUERY_FEATURE_CODES[qbit], None, qtime, CareStage.ICU, EventType.ICU_CHART))
            qdone = True
        if tt >= admit + los:
            break
        icu.append(_noise_event(rng, probs, tt, CareStage.ICU, icu=True))
    raw += icu
    discharge = admit + los
    raw.append(RawEvent(ICU_DISCHARGE, None, discharge, CareStage.ICU, EventType.ADMIN))
    task = get_task(cfg.task)
    if task.name == TaskName.IHM_48H:
        dies = bool(y)
        death_time = discharge
        hosp_end = discharge if dies else discharge + int(rng.integers(60, 3 * MINUTES_PER_DAY))
    else:
        dies, death_time, hosp_end = False, None, discharge + int(rng.integers(60, 3 * MINUTES_PER_DAY))
    raw.append(RawEvent(HOSP_DISCHARGE, None, hosp_end, CareStage.HOSP, EventType.ADMIN))
    if dies:
        raw.append(RawEvent(DEATH, None, death_time, CareStage.HOSP, EventType.SPECIAL))
    truth = {"marker": has_marker, "query_bit": qbit, "from_marker": from_marker, "planted_label": y}
    return raw, truth


def generate(config: SyntheticConfig, vocab: Vocabulary | None = None) -> SyntheticDataset:
    """Deterministic synthetic cohort: one index ICU stay per patient plus earlier visits."""
    vocab = vocab or Vocabulary()
    ranks = np.arange(1, config.noise_codes + 1, dtype=np.float64)
    probs = ranks ** (-config.zipf_exponent)
    probs /= probs.sum()
    timelines, raws, labels, truth, excluded = {}, {}, [], {}, []
    width = len(str(max(config.patients - 1, 0)))
    for i in range(config.patients):
        pid = f"P{i:0{width}d}"
        raw, gt = _generate_patient(config, i, probs)
        tl = build_timeline(raw, pid, vocab)
        raws[pid], timelines[pid], truth[pid] = raw, tl, gt
        for name in TaskName:
            try:
                labels.append(LabelRecord(pid, 0, name.value, label(tl, TASKS[name], 0)))
            except MissingReference as exc:
                excluded.append({"patient_id": pid, "stay_ordinal": 0, "task": name.value, "reason": exc.reason})
    manifest = {"config": asdict(config), "seed": config.seed, "truth": truth}
    return SyntheticDataset(timelines, raws, labels, manifest, vocab, excluded)


def split(patient_ids: Iterable[str], fractions: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0) -> dict[str, list[str]]:
    """Patient-level train/val/test split; every stay of a patient lands in one split."""
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    ids = sorted(set(patient_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    shuffled = [ids[k] for k in order]
    return {
        "train": sorted(shuffled[:n_train]),
        "val": sorted(shuffled[n_train : n_train + n_val]),
        "test": sorted(shuffled[n_train + n_val :]),
    }


def write_dataset(directory: str | Path, ds: SyntheticDataset) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_events_jsonl(directory / "events.jsonl", ds.raw)
    with open(directory / "labels.jsonl", "w", encoding="utf-8") as fh:
        for r in ds.labels:
            fh.write(json.dumps(asdict(r)) + "\n")
    (directory / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True))


def read_labels(path: str | Path) -> list[LabelRecord]:
    with open(path, encoding="utf-8") as fh:
        return [LabelRecord(**json.loads(line)) for line in fh if line.strip()]


def read_dataset(directory: str | Path, vocab: Vocabulary | None = None) -> SyntheticDataset:
    directory = Path(directory)
    vocab = vocab or Vocabulary()
    raw = read_events_jsonl(directory / "events.jsonl")
    timelines = {pid: build_timeline(ev, pid, vocab) for pid, ev in raw.items()}
    labels = read_labels(directory / "labels.jsonl")
    mpath = directory / "manifest.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return SyntheticDataset(timelines, raw, labels, manifest, vocab)


def query_window(timeline: PatientTimeline, task: TaskSpec, stay: int = -1, query_size: int = 1024):
    end = window_end_time(timeline, task, stay)
    return split_at(timeline, last_index_at_or_before(timeline, end), query_size)
