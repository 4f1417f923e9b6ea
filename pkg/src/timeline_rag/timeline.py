"""Event/timeline data model, vocabulary, timeline construction and time-delta scaling."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

MINUTES_PER_DAY = 1440


class CareStage(enum.IntEnum):
    OUTP = 0
    ED = 1
    HOSP = 2
    ICU = 3
    GAP = 4
    STATIC = 5


class EventType(enum.IntEnum):
    LAB = 0
    MEDICATION = 1
    MICROBIOLOGY = 2
    DIAGNOSIS = 3
    PROCEDURE = 4
    DRG = 5
    ICU_CHART = 6
    ICU_FLUID_OUTPUT = 7
    ICU_PROCEDURE = 8
    ICU_INFUSION = 9
    ADMIN = 10
    STATIC_DEMO = 11
    TIME_GAP = 12
    SPECIAL = 13


PAD, MASK, CLS, UNK = "PAD", "MASK", "CLS", "UNK"
SPECIAL_TOKENS = (PAD, MASK, CLS, UNK)
WEEK_GAP_TOKENS = tuple(f"TIME-GAP//{i}-W" for i in range(1, 4))
MONTH_GAP_TOKENS = tuple(f"TIME-GAP//{i}-M" for i in range(1, 13))
YEAR_GAP_TOKEN = "TIME-GAP//1-Y+"
GAP_TOKENS = WEEK_GAP_TOKENS + MONTH_GAP_TOKENS + (YEAR_GAP_TOKEN,)

OUTPATIENT_START, OUTPATIENT_END = "OUTPATIENT-START", "OUTPATIENT-END"
EMERGENCY_START, EMERGENCY_END = "EMERGENCY-START", "EMERGENCY-END"
HOSP_ADMIT, HOSP_DISCHARGE = "ADMISSION-AT-HOSPITAL", "DISCHARGE-FROM-HOSPITAL"
ICU_ADMIT, ICU_DISCHARGE = "ADMISSION-AT-ICU", "DISCHARGE-FROM-ICU"
BOUNDARY_TOKENS = (
    OUTPATIENT_START,
    OUTPATIENT_END,
    EMERGENCY_START,
    EMERGENCY_END,
    HOSP_ADMIT,
    HOSP_DISCHARGE,
    ICU_ADMIT,
    ICU_DISCHARGE,
)
DEATH = "MEDS_DEATH"
RESERVED_TOKENS = SPECIAL_TOKENS + GAP_TOKENS + BOUNDARY_TOKENS + (DEATH,)

# stage -> (start token, end token) for episodes wrapped by build_timeline
_WRAPPED_STAGES = {
    CareStage.OUTP: (OUTPATIENT_START, OUTPATIENT_END),
    CareStage.ED: (EMERGENCY_START, EMERGENCY_END),
}
_INSERTED_TOKENS = frozenset(GAP_TOKENS) | {
    OUTPATIENT_START,
    OUTPATIENT_END,
    EMERGENCY_START,
    EMERGENCY_END,
}

GAP_MIN_MINUTES = 7 * MINUTES_PER_DAY
DAYS_PER_MONTH = 30.44


class Vocabulary:
    """Bijective token <-> id map with the reserved tokens at fixed low ids.

    PAD, MASK, CLS and UNK occupy ids 0-3; gap, boundary and death tokens follow.
    A frozen vocabulary maps unseen tokens to UNK instead of growing.
    """

    def __init__(self, tokens: Iterable[str] = (), frozen: bool = False):
        self._id: dict[str, int] = {}
        self._tok: list[str] = []
        self.frozen = False
        for tok in RESERVED_TOKENS:
            self._add(tok)
        for tok in tokens:
            self._add(tok)
        self.frozen = frozen

    def _add(self, token: str) -> int:
        idx = self._id.get(token)
        if idx is None:
            idx = len(self._tok)
            self._id[token] = idx
            self._tok.append(token)
        return idx

    def __len__(self) -> int:
        return len(self._tok)

    def __contains__(self, token: str) -> bool:
        return token in self._id

    def encode(self, token: str) -> int:
        if token in self._id:
            return self._id[token]
        if self.frozen:
            return self._id[UNK]
        return self._add(token)

    def decode(self, idx: int) -> str:
        return self._tok[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._tok)

    def freeze(self) -> "Vocabulary":
        self.frozen = True
        return self

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, tok in enumerate(self._tok):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path, frozen: bool = True) -> "Vocabulary":
        pairs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, idx = line.rsplit("\t", 1)
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: vocabulary ids are not contiguous from 0")
        toks = [t for _, t in pairs]
        if tuple(toks[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError(f"{path}: reserved tokens missing or out of order")
        return cls(toks[len(RESERVED_TOKENS):], frozen=frozen)


@dataclass(frozen=True)
class TimelineEvent:
    concept_id: int
    numeric_value: Optional[float]
    time_minutes: Optional[int]
    care_stage: CareStage
    visit_order: int
    event_type: EventType


@dataclass(frozen=True)
class PatientTimeline:
    patient_id: str
    events: tuple[TimelineEvent, ...]
    visit_boundaries: tuple[tuple[int, int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class RawEvent:
    """One input record before timeline construction.

    ``visit`` is an optional encounter key; when absent, a new visit starts after
    any silence of at least one week between consecutive timed events.
    """

    code: str
    value: Optional[float]
    time: Optional[int]
    stage: CareStage
    type: EventType
    visit: Optional[int] = None


@dataclass
class TimeDeltaScaler:
    delta_max_minutes: int = 525600
    literal_denominator: bool = False
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.delta_max_minutes < 1:
            raise ValueError("delta_max_minutes must be >= 1")
        if self.literal_denominator and self.delta_max_minutes < 2:
            raise ValueError("literal log(delta_max) denominator needs delta_max >= 2")


def scale_delta(delta_minutes: float, scaler: TimeDeltaScaler) -> float:
    if delta_minutes < 0:
        raise ValueError("negative time delta")
    if delta_minutes > scaler.delta_max_minutes:
        scaler.clamped += 1
        return 1.0
    denom = math.log(scaler.delta_max_minutes if scaler.literal_denominator else 1 + scaler.delta_max_minutes)
    return min(math.log1p(delta_minutes) / denom, 1.0)


def gap_token(gap_minutes: int) -> Optional[str]:
    """Gap token for a silence between two visits, or None below one week."""
    if gap_minutes < GAP_MIN_MINUTES:
        return None
    days = gap_minutes / MINUTES_PER_DAY
    if days < 28:
        return WEEK_GAP_TOKENS[min(int(days // 7), 3) - 1]
    if days < 365:
        months = min(max(int(days // DAYS_PER_MONTH), 1), 12)
        return MONTH_GAP_TOKENS[months - 1]
    return YEAR_GAP_TOKEN


def _sort_key(item):
    pos, ev = item
    # static first, then by time; ties keep input order
    return (0, 0, pos) if ev.time is None else (1, ev.time, pos)


def build_timeline(
    raw_events: Sequence[RawEvent],
    patient_id: str,
    vocab: Vocabulary,
) -> PatientTimeline:
    """Sort raw events and insert gap, boundary, static and death tokens.

    Previously inserted gap/boundary tokens in the input are dropped and
    regenerated, so building an already-built timeline is a no-op.
    """
    statics, timed, deaths = [], [], []
    for pos, ev in sorted(enumerate(raw_events), key=_sort_key):
        if ev.code in _INSERTED_TOKENS:
            continue
        if ev.code == DEATH:
            deaths.append(ev)
        elif ev.time is None or ev.stage == CareStage.STATIC:
            statics.append(ev)
        else:
            timed.append(ev)

    out: list[TimelineEvent] = []
    for ev in statics:
        out.append(TimelineEvent(vocab.encode(ev.code), ev.value, None, CareStage.STATIC, 0, EventType.STATIC_DEMO))

    # group timed events into visits
    visits: list[list[RawEvent]] = []
    prev = None
    for ev in timed:
        if prev is None:
            new = True
        elif ev.visit is not None and prev.visit is not None:
            new = ev.visit != prev.visit
        else:
            new = ev.time - prev.time >= GAP_MIN_MINUTES
        if new:
            visits.append([])
        visits[-1].append(ev)
        prev = ev

    boundaries = []
    for n, visit in enumerate(visits, start=1):
        if n > 1:
            tok = gap_token(visit[0].time - visits[n - 2][-1].time)
            if tok is not None:
                out.append(
                    TimelineEvent(vocab.encode(tok), None, visits[n - 2][-1].time, CareStage.GAP, 0, EventType.TIME_GAP)
                )
        start = len(out)
        i = 0
        while i < len(visit):
            stage = visit[i].stage
            j = i
            while j < len(visit) and visit[j].stage == stage:
                j += 1
            wrap = _WRAPPED_STAGES.get(stage)
            if wrap:
                out.append(TimelineEvent(vocab.encode(wrap[0]), None, visit[i].time, stage, n, EventType.ADMIN))
            for ev in visit[i:j]:
                out.append(TimelineEvent(vocab.encode(ev.code), ev.value, ev.time, stage, n, ev.type))
            if wrap:
                out.append(TimelineEvent(vocab.encode(wrap[1]), None, visit[j - 1].time, stage, n, EventType.ADMIN))
            i = j
        boundaries.append([n, start, len(out)])

    for ev in deaths[:1]:
        if ev.time is None:
            raise ValueError(f"patient {patient_id}: death record without a timestamp")
        last = out[-1] if out else None
        visit_no = boundaries[-1][0] if boundaries else 0
        stage = last.care_stage if last is not None and last.care_stage != CareStage.STATIC else CareStage.HOSP
        out.append(TimelineEvent(vocab.encode(DEATH), None, ev.time, stage, visit_no, EventType.SPECIAL))
        if boundaries:
            boundaries[-1][2] = len(out)
        else:
            boundaries.append([0, len(out) - 1, len(out)])

    return PatientTimeline(patient_id, tuple(out), tuple(tuple(b) for b in boundaries))


def timeline_to_raw(timeline: PatientTimeline, vocab: Vocabulary) -> list[RawEvent]:
    return [
        RawEvent(
            vocab.decode(ev.concept_id),
            ev.numeric_value,
            ev.time_minutes,
            ev.care_stage,
            ev.event_type,
            ev.visit_order if ev.care_stage not in (CareStage.GAP, CareStage.STATIC) else None,
        )
        for ev in timeline.events
    ]


def compute_deltas(timeline: PatientTimeline | Sequence[TimelineEvent], scaler: TimeDeltaScaler) -> list[float]:
    events = timeline.events if isinstance(timeline, PatientTimeline) else timeline
    out, prev = [], None
    for ev in events:
        if ev.time_minutes is None:
            out.append(0.0)
            continue
        out.append(0.0 if prev is None else scale_delta(ev.time_minutes - prev, scaler))
        prev = ev.time_minutes
    return out


class EmptyQueryError(ValueError):
    pass


class QueryHistorySplit(NamedTuple):
    query: tuple[TimelineEvent, ...]
    history: tuple[TimelineEvent, ...]
    query_start: int
    query_stop: int


def split_at(timeline: PatientTimeline, window_end_index: int, query_size: int = 1024) -> QueryHistorySplit:
    """Query = the last ``query_size`` events up to and including ``window_end_index``."""
    if window_end_index < 0:
        raise EmptyQueryError("empty query")
    stop = min(window_end_index, len(timeline.events) - 1) + 1
    start = max(0, stop - query_size)
    ev = timeline.events
    return QueryHistorySplit(ev[start:stop], ev[:start], start, stop)


def last_index_at_or_before(timeline: PatientTimeline, time_minutes: int) -> int:
    """Index of the last event with time <= ``time_minutes`` (untimed prefix counts); -1 if none."""
    idx = -1
    for i, ev in enumerate(timeline.events):
        if ev.time_minutes is None or ev.time_minutes <= time_minutes:
            idx = i
        else:
            break
    return idx


def split_query_history(timeline: PatientTimeline, task, stay: int = -1, query_size: int = 1024) -> QueryHistorySplit:
    """Split a timeline at the query window of ``task`` for ICU stay ``stay``."""
    from .tasks import window_end_time

    end = window_end_time(timeline, task, stay)
    idx = last_index_at_or_before(timeline, end)
    if idx < 0 or timeline.events[idx].time_minutes is None:
        raise EmptyQueryError("empty query")
    return split_at(timeline, idx, query_size)


# JSON Lines input ---------------------------------------------------------

def raw_event_from_json(rec: dict) -> RawEvent:
    return RawEvent(
        code=str(rec["code"]),
        value=None if rec.get("value") is None else float(rec["value"]),
        time=None if rec.get("time") is None else int(rec["time"]),
        stage=CareStage[rec["stage"]],
        type=EventType[rec["type"]],
        visit=rec.get("visit"),
    )


def raw_event_to_json(patient_id: str, ev: RawEvent) -> dict:
    rec = {
        "patient_id": patient_id,
        "code": ev.code,
        "value": ev.value,
        "time": ev.time,
        "stage": ev.stage.name,
        "type": ev.type.name,
    }
    if ev.visit is not None:
        rec["visit"] = ev.visit
    return rec


def read_events_jsonl(path: str | Path) -> dict[str, list[RawEvent]]:
    """Group an event file by patient id, preserving line order within a patient."""
    by_patient: dict[str, list[RawEvent]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                by_patient.setdefault(str(rec["patient_id"]), []).append(raw_event_from_json(rec))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad event record ({exc})") from exc
    return by_patient


def write_events_jsonl(path: str | Path, raw: dict[str, Sequence[RawEvent]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pid in raw:
            for ev in raw[pid]:
                fh.write(json.dumps(raw_event_to_json(pid, ev)) + "\n")
