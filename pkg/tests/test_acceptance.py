"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also repeated in the terminal summary (see conftest.py), so
``pytest tests/test_acceptance.py`` shows them without ``-s``.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_events
from test_chunker import check_invariants, digest as descriptor_digest
from test_fusion import end_to_end_error, tiny_model
from test_index import brute_force, make_retriever
from test_metrics import pairwise_auroc, threshold_auprc
from timeline_rag import cli
from timeline_rag import config as cfgmod
from timeline_rag.chunker import ChunkingConfig, Strategy, chunk_history
from timeline_rag.encoder.masking import Replacement, plan_masking
from timeline_rag.fusion import FusionPooling, RagModel
from timeline_rag.index import build_index, read_index, search
from timeline_rag.inspection import inspect, marker_attribution
from timeline_rag.metrics import auprc, auroc
from timeline_rag.pipeline import featurize_examples
from timeline_rag.prototypes import AssignmentDistribution, align, entropy, log_softmax, weigh
from timeline_rag.tasks import MARKER_CODE, SyntheticConfig, generate
from timeline_rag.timeline import DEATH, ICU_DISCHARGE

RESULTS: list[str] = []


def record(number, title, ok, detail):
    line = f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(line)
    RESULTS.append(line)
    return ok


# shared desk-scale pipeline ---------------------------------------------------


class Pipeline:
    def __init__(self, root: Path, cfg_path: Path):
        self.root, self.cfg = root, cfg_path
        self.timings: dict[str, float] = {}

    def run(self, name, *argv):
        t0 = time.perf_counter()
        code = cli.main(["--config", str(self.cfg), *[str(a) for a in argv]])
        self.timings[name] = time.perf_counter() - t0
        assert code == 0, f"{name} failed"

    def chain(self, tag):
        """gen-data -> build-index -> train -> eval under ``root/tag``."""
        d = self.root / tag
        self.run(f"{tag}:gen", "gen-data", "--out", d / "data")
        self.run(f"{tag}:index", "build-index", "--data", d / "data", "--out", d / "index")
        self.run(f"{tag}:train", "train", "--data", d / "data", "--index", d / "index", "--out", d / "model")
        self.run(f"{tag}:eval", "eval", *self.io(tag, "model"), "--out", d / "eval")
        return d

    def io(self, tag, model):
        d = self.root / tag
        return ["--data", d / "data", "--index", d / "index", "--model", d / model]

    def elapsed(self, *prefixes):
        return sum(v for k, v in self.timings.items() if k.startswith(prefixes))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = root / "desk.ini"
    cfg.write_text(cfgmod.dump_config(cfgmod.desk_scale()))
    p = Pipeline(root, cfg)
    p.chain("a")
    return p


# 1 -----------------------------------------------------------------------------


def test_criterion_01_index_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    ds = generate(SyntheticConfig(patients=200, seed=101))
    index = build_index(list(ds.timelines.values()), ChunkingConfig(Strategy.EVENT, 16, 4), make_retriever(16, vocab=len(ds.vocab)))
    checked = mismatches = 0
    for pid, tl in ds.timelines.items():
        for _ in range(5):
            q = rng.standard_normal(16)
            q /= np.linalg.norm(q)
            cutoff = int(rng.integers(0, len(tl.events) + 1))
            M = int(rng.integers(1, 30))
            got = [h.descriptor for h in search(index, pid, q, M, cutoff)]
            mismatches += got != brute_force(index, pid, q, M, cutoff)
            checked += 1
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and checked == 1000 and secs < 60
    assert record(1, "retrieval oracle equivalence", ok, f"{checked} queries over {len(index)} entries, {mismatches} mismatches, {secs:.1f}s")


# 2 -----------------------------------------------------------------------------


def test_criterion_02_end_to_end_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    variants = [dict(pooling=FusionPooling.MEAN), dict(pooling=FusionPooling.QUERY_SLOT), dict(retrieval=False)]
    worst = 0.0
    n = 102
    for k in range(n):
        model = tiny_model(M=3, L=4, d=8, **variants[k % len(variants)])
        worst = max(worst, end_to_end_error(rng, model, 0.3))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs < 120
    assert record(2, "gradient correctness", ok, f"{n} instances (d=8, L=4, M=3), worst relative error {worst:.2e}, {secs:.1f}s")


# 3 -----------------------------------------------------------------------------


def _dist(logits):
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    return AssignmentDistribution(np.exp(lp), lp)


def test_criterion_03_prototype_identities():
    rng = np.random.default_rng(303)
    failures = []
    sums = [abs(_dist(rng.standard_normal(L) * 5).probs.sum() - 1) for L in rng.integers(2, 200, 1000)]
    if max(sums) > 1e-9:
        failures.append("sum")
    for L in (2, 8, 128):
        eye = np.eye(L)
        with np.errstate(divide="ignore"):
            onehot = AssignmentDistribution(eye, np.log(eye))
        if np.abs(align(onehot, onehot)).max() != 0:
            failures.append("one-hot")
        u = AssignmentDistribution(np.full(L, 1 / L), np.full(L, -math.log(L)))
        if abs(align(u, u) - math.log(L)) > 1e-12:
            failures.append("uniform")
    gibbs_gap = []
    for _ in range(1000):
        L = int(rng.integers(2, 64))
        q, c = _dist(rng.standard_normal(L) * 3), _dist(rng.standard_normal(L) * 3)
        gap = align(q, c) - entropy(q.probs)
        gibbs_gap.append(gap)
        if abs(align(q, q) - entropy(q.probs)) > 1e-9:
            failures.append("gibbs equality")
    if min(gibbs_gap) < -1e-9:
        failures.append("gibbs bound")
    for _ in range(1000):
        a = rng.random(int(rng.integers(1, 30))) * 10
        w = weigh(a, 0.15)
        if abs(w.sum() - 1) > 1e-9:
            failures.append("weights sum")
        order = np.argsort(a)
        if np.any(np.diff(w[order]) > 1e-15):
            failures.append("anti-monotone")
    ok = not failures
    detail = f"1000 assignments, 1000 Gibbs pairs (min gap {min(gibbs_gap):.2e}), 1000 weight vectors"
    assert record(3, "prototype identities", ok, detail if ok else f"{detail}; failed: {sorted(set(failures))}")


# 4 -----------------------------------------------------------------------------


def test_criterion_04_regularization_direction(desk):
    t0 = time.perf_counter()
    desk.run("lam0:train", "train", "--data", desk.root / "a" / "data", "--index", desk.root / "a" / "index",
             "--out", desk.root / "a" / "model_lam0", "--lambda-u", 0)
    usage = {}
    for name in ("model_lam0", "model"):
        desk.run(f"lam:inspect:{name}", "inspect", *desk.io("a", name), "--out", desk.root / "a" / f"inspect_{name}")
        usage[name] = json.loads((desk.root / "a" / f"inspect_{name}" / "prototype_usage.json").read_text())
    q0, q5 = np.array(usage["model_lam0"]["query_usage"]), np.array(usage["model"]["query_usage"])
    h0, h5 = entropy(q0), entropy(q5)
    secs = time.perf_counter() - t0 + desk.elapsed("a:train")
    lam = json.loads((desk.root / "a" / "model" / "run.json").read_text())["config"]["lambda_u"]
    ok = len(q0) == 64 and lam == 0.005 and h5 > h0 and q5.max() < q0.max() and secs < 600
    detail = (f"L={len(q0)}, H(mean query assignment) {h0:.3f} -> {h5:.3f}, max {q0.max():.3f} -> {q5.max():.3f} "
              f"(lambda_u 0 -> {lam}), {secs:.0f}s")
    assert record(4, "regularization direction", ok, detail)


# 5 -----------------------------------------------------------------------------


def test_criterion_05_planted_signal_benefit(desk):
    a = desk.root / "a"
    desk.run("qo:train", "train", "--data", a / "data", "--index", a / "index", "--out", a / "model_qo", "--query-only")
    desk.run("qo:eval", "eval", *desk.io("a", "model_qo"), "--out", a / "eval_qo")
    full = json.loads((a / "eval" / "metrics.json").read_text())
    qo = json.loads((a / "eval_qo" / "metrics.json").read_text())
    manifest = json.loads((a / "data" / "run.json").read_text())
    secs = desk.elapsed("a:", "qo:")
    gain = full["auroc"] - qo["auroc"]
    separated = full["auroc_ci_low"] > qo["auroc_ci_high"]
    ok = (
        manifest["patients"] == 2000
        and manifest["config"]["signal_strength"] == 0.9
        and full["n_boot"] == qo["n_boot"] == 1000
        and gain >= 0.10
        and separated
        and secs < 900
    )
    detail = (f"test AUROC full {full['auroc']:.3f} [{full['auroc_ci_low']:.3f}, {full['auroc_ci_high']:.3f}] vs "
              f"query-only {qo['auroc']:.3f} [{qo['auroc_ci_low']:.3f}, {qo['auroc_ci_high']:.3f}], "
              f"gain {gain:.3f}, {secs:.0f}s")
    assert record(5, "planted-signal benefit", ok, detail)


# 6 -----------------------------------------------------------------------------


def test_criterion_06_chunking_invariants():
    counts = {}
    for strategy in Strategy:
        rng = np.random.default_rng(600 + int(strategy))
        n_checked = 0
        for _ in range(500):
            n = int(rng.integers(1, 150))
            size = int(rng.integers(1, 48))
            cfg = ChunkingConfig(strategy, size, int(rng.integers(0, size)), int(rng.integers(1, 3000)))
            h = random_events(rng, n)
            descs = chunk_history(h, cfg, "p")
            check_invariants(h, descs, cfg)
            assert descriptor_digest(chunk_history(list(h), cfg, "p")) == descriptor_digest(descs)
            n_checked += 1
        counts[strategy.name] = n_checked
    assert record(6, "chunking invariants", all(v == 500 for v in counts.values()), f"histories checked per strategy {counts}")


# 7 -----------------------------------------------------------------------------


def test_criterion_07_masking_statistics():
    n = 100_000
    ids = np.random.default_rng(707).integers(4, 2000, size=n)
    plan = plan_masking(ids, 707, 2000)
    frac = len(plan.positions) / n
    mix = np.bincount(plan.replacements, minlength=3) / len(plan.positions)
    m, r, k = mix[Replacement.MASK_TOKEN], mix[Replacement.RANDOM], mix[Replacement.KEEP]
    ok = abs(frac - 0.15) <= 0.005 and abs(m - 0.8) <= 0.015 and abs(r - 0.1) <= 0.015 and abs(k - 0.1) <= 0.015
    assert record(7, "masking statistics", ok, f"masked {frac:.4f}, mask/random/keep {m:.4f}/{r:.4f}/{k:.4f}")


# 8 -----------------------------------------------------------------------------


def metric_instances():
    # every weak ordering (scores drawn from n levels) times every label vector, n <= 5
    for n in range(2, 6):
        for s in itertools.product(range(n), repeat=n):
            for y in itertools.product((0, 1), repeat=n):
                if 0 < sum(y) < n:
                    yield s, y
    # every label vector over a handful of tie patterns, 6 <= n <= 12
    rng = np.random.default_rng(808)
    for n in range(6, 13):
        patterns = [tuple(range(n)), (0,) * n] + [tuple(rng.integers(0, levels, n)) for levels in (2, 3, n // 2)]
        for s in patterns:
            for y in itertools.product((0, 1), repeat=n):
                if 0 < sum(y) < n:
                    yield s, y


def test_criterion_08_metric_correctness():
    worst, count = 0.0, 0
    for s, y in metric_instances():
        worst = max(worst, abs(auroc(s, y) - float(pairwise_auroc(s, y))), abs(auprc(s, y) - float(threshold_auprc(s, y))))
        count += 1
    assert record(8, "metric correctness", worst <= 1e-12, f"{count} instances with n <= 12, worst deviation {worst:.1e}")


# 9 -----------------------------------------------------------------------------


def test_criterion_09_no_leakage(desk):
    a = desk.root / "a"
    cfg = cfgmod.load_config(desk.cfg)
    ds, splits = cli.load_data(a / "data")
    retriever, _ = cli.load_retriever(a / "index", len(ds.vocab))
    index = read_index(a / "index" / "index.ergp")
    examples = cli._examples(ds, splits, ("test",), cfg, index, retriever, cfg.num_retrieved)["test"]
    revealing = {ds.vocab.encode(DEATH), ds.vocab.encode(ICU_DISCHARGE), ds.vocab.encode(MARKER_CODE)}
    late_chunks = sum(h.descriptor.end_index > ex.query_start for ex in examples for h in ex.hits)
    bad_tokens = sum(e.concept_id in revealing for ex in examples for e in ex.query)
    retrieved = sum(len(ex.hits) for ex in examples)
    ok = late_chunks == 0 and bad_tokens == 0 and len(examples) == len(splits["test"]) and retrieved > 0
    detail = f"{len(examples)} test examples, {retrieved} retrieved chunks, {late_chunks} reach the query, {bad_tokens} label-revealing query tokens"
    assert record(9, "no leakage", ok, detail)


# 10 ----------------------------------------------------------------------------


def test_criterion_10_determinism(desk):
    b = desk.chain("b")
    a = desk.root / "a"
    same_metrics = (a / "eval" / "metrics.json").read_bytes() == (b / "eval" / "metrics.json").read_bytes()
    da = json.loads((a / "model" / "run.json").read_text())["model_digest"]
    db = json.loads((b / "model" / "run.json").read_text())["model_digest"]
    same_index = (a / "index" / "index.ergp").read_bytes() == (b / "index" / "index.ergp").read_bytes()
    same_ckpt = cli.file_digest(a / "model" / "model.ragp") == cli.file_digest(b / "model" / "model.ragp")
    ok = same_metrics and da == db and same_ckpt and same_index
    detail = f"metric JSON identical={same_metrics}, checkpoint digest {da[:12]} vs {db[:12]}, index identical={same_index}"
    assert record(10, "determinism", ok, detail)


def test_marker_chunk_gets_top_weight(desk):
    """Among correctly predicted positives, the retrieved marker chunk carries the largest weight at least 80% of the time."""
    a = desk.root / "a"
    cfg = cfgmod.load_config(desk.cfg)
    ds, splits = cli.load_data(a / "data")
    retriever, _ = cli.load_retriever(a / "index", len(ds.vocab))
    index = read_index(a / "index" / "index.ergp")
    model, params = RagModel.load(a / "model" / "model.ragp")
    examples = cli._examples(ds, splits, ("test",), cfg, index, retriever, model.M)["test"]
    feats = featurize_examples(examples, model.encoder, cfg.query_chunk_size, cfg.history_chunk_size, model.M)
    rate, n = marker_attribution(inspect(model, params, examples, feats), examples, ds.vocab.encode(MARKER_CODE))
    assert n >= 50 and rate >= 0.8, (rate, n)
