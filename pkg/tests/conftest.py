import sys

import numpy as np
import pytest

from timeline_rag.timeline import CareStage, EventType, TimelineEvent


def ev(concept=10, t=0, stage=CareStage.HOSP, visit=1, etype=EventType.LAB, value=None):
    return TimelineEvent(concept, value, t, stage, visit, etype)


def random_events(rng, n, vocab=40, max_visits=5):
    """Random already-ordered events with a few visits, gaps and statics; only for chunk/encoder tests."""
    out, t, visit = [], 0, 1
    for i in range(n):
        r = rng.random()
        if r < 0.05:
            out.append(TimelineEvent(int(rng.integers(4, vocab)), None, None, CareStage.STATIC, 0, EventType.STATIC_DEMO))
            continue
        if r < 0.12 and visit < max_visits:
            out.append(TimelineEvent(5, None, t, CareStage.GAP, 0, EventType.TIME_GAP))
            visit += 1
            t += int(rng.integers(10000, 20000))
            continue
        t += int(rng.integers(0, 400))
        stage = CareStage(int(rng.integers(0, 4)))
        val = float(rng.standard_normal()) if rng.random() < 0.5 else None
        out.append(TimelineEvent(int(rng.integers(4, vocab)), val, t, stage, visit, EventType(int(rng.integers(0, 10)))))
    return out


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(a)), np.max(np.abs(b))))


def fd_check(f, params, grads, rng, eps=1e-6, full_keys=(), max_elems=40, floor=1e-3):
    """Compare analytic gradients with central differences.

    Every tensor gets a random-direction check; tensors named in ``full_keys``
    additionally get element-wise checks on up to ``max_elems`` entries.
    Returns the worst relative error.  Gradients smaller than ``floor`` are
    compared on an absolute scale, since an exactly-zero derivative (e.g. an
    attention key bias) leaves only rounding noise in the difference quotient.
    """
    worst = 0.0
    for k in sorted(params):
        d = rng.standard_normal(params[k].shape)
        plus = {**params, k: params[k] + eps * d}
        minus = {**params, k: params[k] - eps * d}
        fd = (f(plus) - f(minus)) / (2 * eps)
        an = float(np.sum(grads[k] * d))
        worst = max(worst, abs(fd - an) / max(floor, abs(fd), abs(an)))
        if k in full_keys:
            flat = params[k].reshape(-1)
            for i in rng.permutation(flat.size)[:max_elems]:
                e = np.zeros_like(flat)
                e[i] = eps
                plus = {**params, k: (flat + e).reshape(params[k].shape)}
                minus = {**params, k: (flat - e).reshape(params[k].shape)}
                fd = (f(plus) - f(minus)) / (2 * eps)
                an = grads[k].reshape(-1)[i]
                worst = max(worst, abs(fd - an) / max(floor, abs(fd), abs(an)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
