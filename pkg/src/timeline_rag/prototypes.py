"""Prototype assignment, cross-entropy alignment, softmax weighting and the usage regularizer.

Every forward function has a matching ``*_backward`` returning exact
gradients; they are composed by the fusion model and checked against finite
differences in the test-suite.  All functions broadcast over leading axes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder.layers import uniform_init


class Branch(enum.Enum):
    QUERY = "query"
    HISTORY = "history"


@dataclass
class PrototypeBank:
    P: np.ndarray
    T_q: float = 0.05
    T_h: float = 0.2
    T_s: float = 0.15

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 2 or self.P.shape[0] < 2:
            raise ValueError("need an (L, d) prototype matrix with L >= 2")
        if min(self.T_q, self.T_h, self.T_s) <= 0:
            raise ValueError("temperatures must be positive")
        if not self.T_q < self.T_h:
            raise ValueError("query temperature must be below the history temperature")

    @classmethod
    def init(cls, L: int, d: int, rng, **temps) -> "PrototypeBank":
        return cls(uniform_init(rng, (L, d), d), **temps)

    @property
    def L(self) -> int:
        return self.P.shape[0]

    def temperature(self, branch: Branch) -> float:
        return self.T_q if branch == Branch.QUERY else self.T_h


@dataclass(frozen=True)
class AssignmentDistribution:
    probs: np.ndarray
    log_probs: np.ndarray


@dataclass
class BatchUsage:
    mean_query_assignment: np.ndarray
    mean_history_assignment: np.ndarray | None
    query_count: int
    history_count: int
    history_defined: bool = field(default=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def assign(x: np.ndarray, bank: PrototypeBank, branch: Branch) -> AssignmentDistribution:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input to prototype assignment")
    logp = log_softmax(x @ bank.P.T / bank.temperature(branch))
    return AssignmentDistribution(np.exp(logp), logp)


def assign_backward(x, bank: PrototypeBank, branch: Branch, dist: AssignmentDistribution, g_probs=None, g_log_probs=None):
    """Gradients w.r.t. (x, P) given upstream gradients on probs and/or log-probs."""
    g = np.zeros_like(dist.log_probs)
    if g_log_probs is not None:
        g = g + g_log_probs
    if g_probs is not None:
        g = g + g_probs * dist.probs
    # d logp_l / d z_k = delta_lk - p_k
    dz = g - dist.probs * g.sum(axis=-1, keepdims=True)
    T = bank.temperature(branch)
    dx = dz @ bank.P / T
    L, d = bank.P.shape
    dP = dz.reshape(-1, L).T @ np.asarray(x).reshape(-1, d) / T
    return dx, dP


def align(pi_q: AssignmentDistribution, pi_i: AssignmentDistribution) -> np.ndarray:
    """Cross-entropy of the chunk assignment against the query's: -sum_l q_l log c_l.

    Terms with zero query mass contribute nothing, so hand-built one-hot
    distributions with log(0) entries stay finite.
    """
    with np.errstate(invalid="ignore"):
        terms = np.where(pi_q.probs > 0, pi_q.probs * pi_i.log_probs, 0.0)
    return -terms.sum(axis=-1)


def align_backward(pi_q: AssignmentDistribution, pi_i: AssignmentDistribution, g_alpha):
    """Returns (grad wrt pi_q.probs, grad wrt pi_i.log_probs), each broadcast to its input shape."""
    g = np.asarray(g_alpha)[..., None]
    gq = -g * pi_i.log_probs
    gi = -g * pi_q.probs
    return _unbroadcast(gq, pi_q.probs.shape), _unbroadcast(gi, pi_i.log_probs.shape)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def weigh(alphas: np.ndarray, T_s: float, mask: np.ndarray | None = None) -> np.ndarray:
    """softmax(-alpha / T_s) over the last axis; masked slots get weight 0."""
    s = -np.asarray(alphas, dtype=np.float64) / T_s
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    tot = e.sum(axis=-1, keepdims=True)
    return np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)


def weigh_backward(weights: np.ndarray, g_w: np.ndarray, T_s: float) -> np.ndarray:
    ds = weights * (g_w - (g_w * weights).sum(axis=-1, keepdims=True))
    return -ds / T_s


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def usage_regularizer(pi_q: np.ndarray, pi_h: np.ndarray | None, mask: np.ndarray | None = None):
    """H(mean query assignment) + H(mean history assignment).

    ``pi_q`` is (B, L); ``pi_h`` is (B, M, L) with ``mask`` (B, M) flagging real
    retrieved chunks.  With no history chunk in the batch the history term is
    dropped and ``usage.history_defined`` is False.
    """
    pi_q = np.asarray(pi_q, dtype=np.float64)
    B, L = pi_q.shape
    qbar = pi_q.mean(axis=0)
    reg = entropy(qbar)
    hbar, count = None, 0
    if pi_h is not None and pi_h.size:
        m = np.ones(pi_h.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        count = int(m.sum())
        if count:
            hbar = (pi_h * m[..., None]).sum(axis=(0, 1)) / count
            reg += entropy(hbar)
    return reg, BatchUsage(qbar, hbar, B, count, hbar is not None)


def usage_backward(usage: BatchUsage, pi_h_shape, mask: np.ndarray | None, g_reg: float = 1.0):
    """Returns (grad wrt pi_q probs (B, L), grad wrt pi_h probs (B, M, L) or None)."""
    qbar = usage.mean_query_assignment
    gq = np.broadcast_to(-(np.log(np.maximum(qbar, 1e-300)) + 1.0) * g_reg / usage.query_count, (usage.query_count, qbar.shape[0])).copy()
    gh = None
    if pi_h_shape is not None:
        gh = np.zeros(pi_h_shape)
        if usage.history_defined:
            m = np.ones(pi_h_shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
            hbar = usage.mean_history_assignment
            gh = (-(np.log(np.maximum(hbar, 1e-300)) + 1.0) * g_reg / usage.history_count) * m[..., None]
    return gq, gh


def export_usage(path: str | Path, usage: BatchUsage, top_assignments: list[dict] | None = None) -> None:
    """JSON report of per-prototype usage mass plus optional per-example top-k assignments."""
    rec = {
        "prototypes": len(usage.mean_query_assignment),
        "query_usage": [float(x) for x in usage.mean_query_assignment],
        "history_usage": None
        if usage.mean_history_assignment is None
        else [float(x) for x in usage.mean_history_assignment],
        "query_entropy": entropy(usage.mean_query_assignment),
        "history_entropy": None if usage.mean_history_assignment is None else entropy(usage.mean_history_assignment),
        "max_entropy": math.log(len(usage.mean_query_assignment)),
        "examples": top_assignments or [],
    }
    Path(path).write_text(json.dumps(rec, indent=2))
