import numpy as np
import pytest
from scipy.optimize import minimize

from timeline_rag.metrics import auroc
from timeline_rag.tasks import (
    MARKER_CODE,
    QUERY_FEATURE_CODES,
    TASKS,
    MissingReference,
    Reference,
    SyntheticConfig,
    TaskName,
    TaskSpec,
    generate,
    get_task,
    label,
    query_window,
    split,
    write_dataset,
)
from timeline_rag.timeline import (
    DEATH,
    HOSP_ADMIT,
    HOSP_DISCHARGE,
    ICU_ADMIT,
    ICU_DISCHARGE,
    MINUTES_PER_DAY,
    CareStage,
    EventType,
    RawEvent,
    Vocabulary,
    build_timeline,
)

DAY = MINUTES_PER_DAY
QUERY_SIZE = 32


def admin(code, t, stage):
    return RawEvent(code, None, t, stage, EventType.ADMIN)


def stay(admit, los, hosp_tail=120):
    """Hospital admission wrapping one ICU stay of ``los`` minutes."""
    return [
        admin(HOSP_ADMIT, admit - 60, CareStage.HOSP),
        admin(ICU_ADMIT, admit, CareStage.ICU),
        RawEvent("ICU//1", 1.0, admit + 30, CareStage.ICU, EventType.ICU_CHART),
        admin(ICU_DISCHARGE, admit + los, CareStage.ICU),
        admin(HOSP_DISCHARGE, admit + los + hosp_tail, CareStage.HOSP),
    ]


def timeline(raw):
    return build_timeline(raw, "P", Vocabulary())


def test_ihm_death_inside_admission():
    raw = stay(1000, 3 * DAY) + [RawEvent(DEATH, None, 1000 + 3 * DAY, CareStage.HOSP, EventType.SPECIAL)]
    assert label(timeline(raw), TASKS[TaskName.IHM_48H]) == 1
    assert label(timeline(stay(1000, 3 * DAY)), TASKS[TaskName.IHM_48H]) == 0


def test_ihm_death_after_discharge_is_negative():
    raw = stay(1000, DAY) + [RawEvent(DEATH, None, 1000 + 40 * DAY, CareStage.HOSP, EventType.SPECIAL)]
    tl = timeline(raw)
    assert label(tl, TASKS[TaskName.IHM_48H]) == 0
    assert label(tl, TASKS[TaskName.MORT_1Y]) == 1


def test_los7_boundary():
    tl = timeline(stay(0, 7 * DAY))
    strict = TaskSpec(TaskName.LOS7_24H, Reference.ICU_ADMIT, 1440, "stay longer than 7 days", strict_los=True)
    assert label(tl, strict) == 0
    assert label(tl, TASKS[TaskName.LOS7_24H]) == 1
    assert label(timeline(stay(0, 7 * DAY - 1)), TASKS[TaskName.LOS7_24H]) == 0
    assert label(timeline(stay(0, 7 * DAY + 1)), strict) == 1


@pytest.mark.parametrize("gap_days, expected", [(31, 0), (30, 1), (5, 1)])
def test_readmission(gap_days, expected):
    first = stay(0, 2 * DAY)
    second = stay(2 * DAY + gap_days * DAY, DAY)
    tl = timeline(first + second)
    assert label(tl, TASKS[TaskName.READMIT_30D], stay=0) == expected
    assert label(tl, TASKS[TaskName.READMIT_30D], stay=1) == 0


def test_mortality_one_year_per_stay():
    raw = stay(0, DAY) + stay(500 * DAY, DAY)
    raw.append(RawEvent(DEATH, None, 700 * DAY, CareStage.HOSP, EventType.SPECIAL))
    tl = timeline(raw)
    assert label(tl, TASKS[TaskName.MORT_1Y], stay=0) == 0
    assert label(tl, TASKS[TaskName.MORT_1Y], stay=1) == 1


def test_missing_reference_reasons():
    no_icu = [RawEvent("LAB//1", 1.0, 10, CareStage.HOSP, EventType.LAB)]
    with pytest.raises(MissingReference) as info:
        label(timeline(no_icu), TASKS[TaskName.IHM_48H])
    assert info.value.reason == "no_icu_admission"
    open_stay = stay(0, DAY)[:3]
    with pytest.raises(MissingReference) as info:
        label(timeline(open_stay), TASKS[TaskName.LOS7_24H])
    assert info.value.reason == "no_icu_discharge"
    with pytest.raises(MissingReference) as info:
        label(timeline(stay(0, DAY)), TASKS[TaskName.IHM_48H], stay=3)
    assert info.value.reason == "no_such_stay"


def test_task_table():
    assert TASKS[TaskName.IHM_48H].window_minutes == 2880
    assert TASKS[TaskName.LOS7_24H].window_minutes == 1440
    assert TASKS[TaskName.READMIT_30D].window_minutes is None
    assert get_task("MORT_1Y").reference == Reference.ICU_DISCHARGE
    with pytest.raises(ValueError):
        TaskSpec(TaskName.IHM_48H, Reference.ICU_ADMIT, None, "x")
    with pytest.raises(ValueError):
        TaskSpec(TaskName.MORT_1Y, Reference.ICU_DISCHARGE, 60, "x")


def test_generator_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(visits=(1, 3))
    with pytest.raises(ValueError):
        SyntheticConfig(signal_strength=1.5)


@pytest.fixture(scope="module")
def cohort():
    return generate(SyntheticConfig(patients=2000, signal_strength=0.9, query_size=QUERY_SIZE, seed=11))


def marker_scores(ds, records):
    truth = ds.manifest["truth"]
    return [float(truth[r.patient_id]["marker"]) for r in records]


def test_no_signal_means_chance():
    ds = generate(SyntheticConfig(patients=2000, signal_strength=0.0, seed=3))
    recs = ds.labels_for("IHM_48H")
    assert abs(auroc(marker_scores(ds, recs), [r.label for r in recs]) - 0.5) <= 0.03


def test_full_signal_is_perfect():
    ds = generate(SyntheticConfig(patients=300, signal_strength=1.0, seed=4))
    recs = ds.labels_for("IHM_48H")
    assert auroc(marker_scores(ds, recs), [r.label for r in recs]) == 1.0


def test_generation_byte_identical(tmp_path):
    cfg = SyntheticConfig(patients=40, seed=9)
    write_dataset(tmp_path / "a", generate(cfg))
    write_dataset(tmp_path / "b", generate(cfg))
    for name in ("events.jsonl", "labels.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    write_dataset(tmp_path / "c", generate(SyntheticConfig(patients=40, seed=10)))
    assert (tmp_path / "a" / "events.jsonl").read_bytes() != (tmp_path / "c" / "events.jsonl").read_bytes()


def test_manifest_and_labels(cohort):
    truth = cohort.manifest["truth"]
    assert len(truth) == 2000 and cohort.manifest["seed"] == 11
    for rec in cohort.labels_for("IHM_48H"):
        assert rec.label == truth[rec.patient_id]["planted_label"]


def test_marker_sits_two_visits_before_index(cohort):
    marker = cohort.vocab.encode(MARKER_CODE)
    for pid, tl in list(cohort.timelines.items())[:300]:
        visits = [e.visit_order for e in tl.events if e.concept_id == marker]
        if not cohort.manifest["truth"][pid]["marker"]:
            assert visits == []
            continue
        index_visit = max(e.visit_order for e in tl.events)
        assert len(set(visits)) == 1 and index_visit - visits[0] >= 2


def test_no_leakage_into_query(cohort):
    task = get_task("IHM_48H")
    marker = cohort.vocab.encode(MARKER_CODE)
    forbidden = {cohort.vocab.encode(DEATH), cohort.vocab.encode(ICU_DISCHARGE)}
    for pid, tl in cohort.timelines.items():
        q = query_window(tl, task, 0, QUERY_SIZE)
        ids = {e.concept_id for e in q.query}
        assert marker not in ids
        assert not ids & forbidden
        assert all(e.concept_id != marker for e in tl.events[q.query_start :])


def query_counts(ds, records, width):
    task = get_task("IHM_48H")
    X = np.zeros((len(records), width))
    for i, r in enumerate(records):
        for e in query_window(ds.timelines[r.patient_id], task, 0, QUERY_SIZE).query:
            if e.concept_id < width:
                X[i, e.concept_id] += 1
    return X


def fit_logistic(X, y, l2=1.0):
    Xb = np.c_[X, np.ones(len(X))]

    def obj(w):
        z = Xb @ w
        nll = np.logaddexp(0, z) - y * z
        g = Xb.T @ (1 / (1 + np.exp(-z)) - y) + l2 * np.r_[w[:-1], 0]
        return nll.sum() + 0.5 * l2 * w[:-1] @ w[:-1], g

    return minimize(obj, np.zeros(Xb.shape[1]), jac=True, method="L-BFGS-B").x


def test_signal_only_recoverable_through_history(cohort):
    recs = cohort.labels_for("IHM_48H")
    parts = split([r.patient_id for r in recs], seed=0)
    train_ids, test_ids = set(parts["train"]), set(parts["test"])
    tr = [r for r in recs if r.patient_id in train_ids]
    te = [r for r in recs if r.patient_id in test_ids]
    width = len(cohort.vocab)
    w = fit_logistic(query_counts(cohort, tr, width), np.array([r.label for r in tr], dtype=float))
    scores = np.c_[query_counts(cohort, te, width), np.ones(len(te))] @ w
    y_te = [r.label for r in te]
    assert auroc(scores, y_te) <= 0.6

    # Bayes posterior from history marker presence plus the query bit
    marker = cohort.vocab.encode(MARKER_CODE)
    pos = cohort.vocab.encode(QUERY_FEATURE_CODES[1])
    s = 0.9
    oracle = []
    for r in te:
        q = query_window(cohort.timelines[r.patient_id], get_task("IHM_48H"), 0, QUERY_SIZE)
        m = any(e.concept_id == marker for e in q.history)
        b = any(e.concept_id == pos for e in q.query)
        oracle.append(s * m + (1 - s) * b)
    assert auroc(oracle, y_te) >= 0.95


def test_split_properties():
    ids = [f"P{i:03d}" for i in range(100)]
    a = split(ids, seed=5)
    assert a == split(list(reversed(ids)), seed=5)
    assert [len(a[k]) for k in ("train", "val", "test")] == [70, 10, 20]
    assert set(a["train"]) | set(a["val"]) | set(a["test"]) == set(ids)
    assert not set(a["train"]) & set(a["test"]) and not set(a["val"]) & set(a["test"])
    # duplicates stand for a patient with several stays
    b = split(ids + ids[:30], seed=5)
    assert b == a
    with pytest.raises(ValueError):
        split(ids, (0.5, 0.3, 0.3))
