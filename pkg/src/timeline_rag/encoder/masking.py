"""Masked-event pretraining: masking plans, the MLM head and a small training loop."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..chunker import event_spans
from ..timeline import CLS, MASK, PAD, RESERVED_TOKENS, PatientTimeline
from .embeddings import SequenceBatch, featurize
from .layers import Linear, Params
from .sequence import SequenceEncoder

log = logging.getLogger(__name__)

MASK_RATE = 0.15
REPLACE_PROBS = (0.8, 0.1, 0.1)
PAD_ID = RESERVED_TOKENS.index(PAD)
MASK_ID = RESERVED_TOKENS.index(MASK)
CLS_ID = RESERVED_TOKENS.index(CLS)
FIRST_REGULAR_ID = len(RESERVED_TOKENS)


class Replacement(enum.IntEnum):
    MASK_TOKEN = 0
    RANDOM = 1
    KEEP = 2


@dataclass(frozen=True)
class MaskingPlan:
    positions: np.ndarray  # flat indices into the sequence
    replacements: np.ndarray  # Replacement codes
    labels: np.ndarray  # original concept ids
    random_ids: np.ndarray  # substitute ids, used where replacement == RANDOM


def plan_masking(concept_ids: np.ndarray, rng_seed, vocab_size: int, rate: float = MASK_RATE) -> MaskingPlan:
    """Select each non-PAD, non-CLS position independently with probability ``rate``."""
    ids = np.asarray(concept_ids).reshape(-1)
    rng = np.random.default_rng(rng_seed)
    eligible = (ids != PAD_ID) & (ids != CLS_ID)
    chosen = eligible & (rng.random(ids.shape[0]) < rate)
    positions = np.flatnonzero(chosen)
    repl = rng.choice(3, size=positions.shape[0], p=REPLACE_PROBS)
    low = min(FIRST_REGULAR_ID, vocab_size - 1)
    random_ids = rng.integers(low, vocab_size, size=positions.shape[0])
    return MaskingPlan(positions, repl, ids[positions].copy(), random_ids)


def apply_masking(concept_ids: np.ndarray, plan: MaskingPlan) -> np.ndarray:
    out = np.array(concept_ids, copy=True)
    flat = out.reshape(-1)
    is_mask = plan.replacements == Replacement.MASK_TOKEN
    is_rand = plan.replacements == Replacement.RANDOM
    flat[plan.positions[is_mask]] = MASK_ID
    flat[plan.positions[is_rand]] = plan.random_ids[is_rand]
    return out


def mlm_loss_and_grads(
    params: Params,
    encoder: SequenceEncoder,
    head: Linear,
    batch: SequenceBatch,
    plan: MaskingPlan,
    grads: Params | None = None,
):
    """Mean cross-entropy over masked positions; value/time components are not used."""
    masked = SequenceBatch(**{**batch.__dict__, "concept": apply_masking(batch.concept, plan)})
    _, tokens, cache = encoder.forward(params, masked, categorical_only=True)
    N, T, d = tokens.shape
    flat = tokens.reshape(-1, d)[plan.positions]
    logits, _ = head.forward(params, flat)
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = max(len(plan.positions), 1)
    loss = -logp[np.arange(len(plan.positions)), plan.labels].sum() / n
    if grads is None:
        return loss
    dlogits = np.exp(logp)
    dlogits[np.arange(len(plan.positions)), plan.labels] -= 1.0
    dlogits /= n
    dflat = head.backward(params, flat, dlogits, grads)
    dtokens = np.zeros((N * T, d))
    np.add.at(dtokens, plan.positions, dflat)
    encoder.backward(params, cache, None, grads, dtokens=dtokens.reshape(N, T, d))
    return loss


class AdamW:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Params, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            params[k] *= 1 - lr * self.wd
            params[k] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def pretraining_chunks(timelines: Sequence[PatientTimeline], size: int, overlap: int):
    out = []
    for tl in timelines:
        for s, e in event_spans(len(tl.events), size, overlap):
            out.append(tl.events[s:e])
    return out


def pretrain_mlm(
    timelines: Sequence[PatientTimeline],
    encoder: SequenceEncoder,
    params: Params,
    steps: int = 200,
    batch_size: int = 16,
    chunk_size: int = 64,
    overlap: int = 8,
    lr: float = 3e-3,
    weight_decay: float = 1e-2,
    seed: int = 0,
) -> tuple[Params, Params, list[float]]:
    """Train ``params`` in place on masked-event prediction; returns (params, head params, losses)."""
    rng = np.random.default_rng(seed)
    vocab_size = encoder.embedding.vocab_size
    head = Linear("mlm", encoder.config.d, vocab_size)
    params.update(head.init(rng))
    chunks = pretraining_chunks(timelines, chunk_size, overlap)
    if not chunks:
        raise ValueError("no events to pretrain on")
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    losses = []
    for step in range(steps):
        pick = rng.integers(0, len(chunks), size=batch_size)
        seqs = [(chunks[i], [0.0] * len(chunks[i])) for i in pick]
        batch = encoder.featurize(seqs, chunk_size)
        plan = plan_masking(batch.concept, rng.integers(2**63), vocab_size)
        if len(plan.positions) == 0:
            continue
        grads: Params = {}
        loss = mlm_loss_and_grads(params, encoder, head, batch, plan, grads)
        step_lr = lr * 0.5 * (1 + np.cos(np.pi * step / steps))
        opt.step(params, grads, step_lr)
        losses.append(float(loss))
        if step % 50 == 0:
            log.info("mlm step %d loss %.4f", step, loss)
    head_params = {k: params.pop(k) for k in list(params) if k.startswith("mlm.")}
    return params, head_params, losses
