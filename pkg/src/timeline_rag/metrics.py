"""AUROC, step-wise AUPRC and percentile bootstrap intervals."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("degenerate labels")
    return s, y, n_pos


def auroc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied pairs count one half."""
    s, y, n_pos = _check(scores, labels)
    n_neg = len(y) - n_pos
    r = rankdata(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Sum of (R_k - R_{k-1}) * P_k over distinct score thresholds, highest first."""
    s, y, n_pos = _check(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_k = tp[ends]
    prec = tp_k / (ends + 1)
    rec = tp_k / n_pos
    prev = np.r_[0.0, rec[:-1]]
    return float(np.sum((rec - prev) * prec))


def bootstrap_ci(
    scores,
    labels,
    metric: Callable = auroc,
    n_boot: int = 1000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile interval over example-level resamples; one-class resamples are redrawn."""
    s, y, _ = _check(scores, labels)
    rng = np.random.default_rng(seed)
    n = len(y)
    vals = np.empty(n_boot)
    for b in range(n_boot):
        while True:
            idx = rng.integers(0, n, n)
            k = y[idx].sum()
            if 0 < k < n:
                break
        vals[b] = metric(s[idx], y[idx])
    lo, hi = np.percentile(vals, [100 * (1 - level) / 2, 100 * (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class MetricReport:
    auroc: float
    auprc: float
    auroc_ci_low: float
    auroc_ci_high: float
    auprc_ci_low: float
    auprc_ci_high: float
    n_boot: int
    seed: int
    n: int
    prevalence: float

    @classmethod
    def compute(cls, scores, labels, n_boot: int = 1000, seed: int = 0) -> "MetricReport":
        s, y, n_pos = _check(scores, labels)
        a, p = auroc(s, y), auprc(s, y)
        al, ah = bootstrap_ci(s, y, auroc, n_boot, seed)
        pl, ph = bootstrap_ci(s, y, auprc, n_boot, seed)
        # the percentile interval can miss the point estimate on tiny samples
        return cls(a, p, min(al, a), max(ah, a), min(pl, p), max(ph, p), n_boot, seed, len(y), n_pos / len(y))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")
