"""Fused query/history sequence, the shallow fusion transformer, the training objective and the fine-tuning loop.

The whole model is a flat dict of float64 arrays.  ``RagModel.loss_and_grads``
runs the forward pass (backbone encoder on query and retrieved chunks,
prototype assignment, alignment, weighting, fusion, head) and returns exact
gradients for every trainable tensor.  The frozen retriever is never part of
this dict.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import prototypes as pt
from .encoder import checkpoint
from .encoder.embeddings import SequenceBatch
from .encoder.layers import Params, TransformerStack, accumulate, uniform_init
from .encoder.sequence import EncoderKind, Pooling, SequenceEncoder, SequenceEncoderConfig
from .metrics import auprc, auroc

log = logging.getLogger(__name__)


class FusionPooling(enum.Enum):
    MEAN = "mean"
    QUERY_SLOT = "query_slot"


class SlotOrder(enum.Enum):
    SIMILARITY = "similarity"
    CHRONOLOGICAL = "chronological"


@dataclass(frozen=True)
class FusedSequence:
    """Slot 0 is the query; slots 1..M hold weight-scaled chunk vectors."""

    slots: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if not self.valid_mask[..., 0].all():
            raise ValueError("query slot must be valid")


def fuse(q: np.ndarray, chunks_encoded: np.ndarray, weights: np.ndarray, M: int | None = None) -> FusedSequence:
    """Stack ``[q, w_1 c_1, ..., w_k c_k]``, padding to ``M`` chunk slots with masked zeros.

    Chunks are expected in retrieval order (most similar first).
    """
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(chunks_encoded, dtype=np.float64).reshape(-1, q.shape[-1])
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(w) != len(c):
        raise ValueError(f"{len(w)} weights for {len(c)} chunks")
    M = len(c) if M is None else M
    if len(c) > M:
        raise ValueError(f"{len(c)} chunks exceed {M} slots")
    slots = np.zeros((M + 1, q.shape[-1]))
    slots[0] = q
    slots[1 : len(c) + 1] = w[:, None] * c
    mask = np.zeros(M + 1, dtype=bool)
    mask[: len(c) + 1] = True
    return FusedSequence(slots, mask)


class NonFiniteActivation(FloatingPointError):
    pass


def stable_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(logits, y):
    """Per-example binary cross-entropy in log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def loss(y, logit, reg: float, lambda_u: float) -> float:
    """Mean BCE over the batch minus ``lambda_u * reg``."""
    return float(np.mean(bce_with_logits(logit, y)) - lambda_u * reg)


class FusionHead:
    """Learned slot positions, a pre-norm transformer over slots, pooling and an affine head."""

    def __init__(self, d: int, max_slots: int, layers: int = 2, heads: int = 4, pooling: FusionPooling = FusionPooling.MEAN):
        self.d, self.max_slots, self.pooling = d, max_slots, pooling
        self.body = TransformerStack("fusion", d, heads, layers)

    def init(self, rng) -> Params:
        p = self.body.init(rng)
        p["fusion.pos"] = uniform_init(rng, (self.max_slots, self.d), self.d)
        p["head.w"] = uniform_init(rng, (self.d,), self.d)
        p["head.b"] = np.zeros(1)
        return p

    def forward(self, p: Params, slots: np.ndarray, mask: np.ndarray):
        S = slots.shape[-2]
        if S > self.max_slots:
            raise ValueError(f"{S} slots exceed the {self.max_slots} position vectors")
        x = slots + p["fusion.pos"][:S]
        h, bcache = self.body.forward(p, x, mask)
        if self.pooling == FusionPooling.QUERY_SLOT:
            pooled, n = h[..., 0, :], None
        else:
            n = mask.sum(axis=-1, keepdims=True)
            pooled = (h * mask[..., None]).sum(axis=-2) / n
        logit = pooled @ p["head.w"] + p["head.b"][0]
        if not np.all(np.isfinite(logit)):
            bad = np.flatnonzero(~np.isfinite(np.atleast_1d(logit)))
            raise NonFiniteActivation(
                f"non-finite logit at rows {bad.tolist()}; max |slot|={np.nanmax(np.abs(slots)):.3g}, "
                f"max |pooled|={np.nanmax(np.abs(pooled)):.3g}"
            )
        return logit, (bcache, pooled, mask, n, h.shape)

    def backward(self, p: Params, cache, dlogit, grads: Params) -> np.ndarray:
        bcache, pooled, mask, n, shape = cache
        dlogit = np.asarray(dlogit, dtype=np.float64)
        accumulate(grads, "head.w", (pooled * dlogit[..., None]).reshape(-1, self.d).sum(axis=0))
        accumulate(grads, "head.b", np.array([dlogit.sum()]))
        dpooled = dlogit[..., None] * p["head.w"]
        dh = np.zeros(shape)
        if self.pooling == FusionPooling.QUERY_SLOT:
            dh[..., 0, :] = dpooled
        else:
            dh += (dpooled / n)[..., None, :] * mask[..., None]
        dx = self.body.backward(p, bcache, dh, grads)
        S = shape[-2]
        gpos = np.zeros((self.max_slots, self.d))
        gpos[:S] = dx.reshape(-1, S, self.d).sum(axis=0)
        accumulate(grads, "fusion.pos", gpos)
        return dx


def predict(fused: FusedSequence, head: FusionHead, params: Params) -> float:
    logit, _ = head.forward(params, fused.slots[None], fused.valid_mask[None])
    return float(stable_sigmoid(logit)[0])


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    encoder: SequenceEncoderConfig = field(default_factory=SequenceEncoderConfig)
    prototypes: int = 128
    t_q: float = 0.05
    t_h: float = 0.2
    t_s: float = 0.15
    num_retrieved: int = 24
    fusion_layers: int = 2
    fusion_heads: int = 4
    fusion_pooling: FusionPooling = FusionPooling.MEAN
    slot_order: SlotOrder = SlotOrder.SIMILARITY
    use_retrieval: bool = True

    def to_json(self) -> dict:
        rec = asdict(self)
        rec["encoder"] = {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self.encoder).items()}
        for k in ("fusion_pooling", "slot_order"):
            rec[k] = getattr(self, k).value
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "ModelConfig":
        rec = dict(rec)
        enc = dict(rec.pop("encoder"))
        enc["kind"] = EncoderKind(enc["kind"])
        enc["pooling"] = Pooling(enc["pooling"])
        rec["fusion_pooling"] = FusionPooling(rec["fusion_pooling"])
        rec["slot_order"] = SlotOrder(rec["slot_order"])
        return cls(encoder=SequenceEncoderConfig(**enc), **rec)


@dataclass
class FeatureSet:
    """Pre-featurized examples: query batch (N, Tq), chunk batch (N, M, Tc) and labels."""

    query: SequenceBatch
    chunks: SequenceBatch
    chunk_valid: np.ndarray
    labels: np.ndarray
    keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(
            self.query.take(idx),
            self.chunks.take(idx),
            self.chunk_valid[idx],
            self.labels[idx],
            [self.keys[i] for i in idx] if self.keys else [],
        )


@dataclass
class ForwardResult:
    logits: np.ndarray
    pi_q: np.ndarray
    pi_h: Optional[np.ndarray]
    alphas: Optional[np.ndarray]
    weights: Optional[np.ndarray]
    reg: float
    usage: pt.BatchUsage
    cache: dict


class RagModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.encoder = SequenceEncoder(config.vocab_size, config.encoder)
        M = config.num_retrieved if config.use_retrieval else 0
        self.head = FusionHead(config.encoder.d, M + 1, config.fusion_layers, config.fusion_heads, config.fusion_pooling)

    @property
    def M(self) -> int:
        return self.config.num_retrieved if self.config.use_retrieval else 0

    def init(self, rng, encoder_params: Params | None = None) -> Params:
        p = self.encoder.init(rng)
        if encoder_params is not None:
            for k in self.encoder.param_names(p):
                p[k] = np.array(encoder_params[k], dtype=np.float64)
        p["proto.P"] = uniform_init(rng, (self.config.prototypes, self.config.encoder.d), self.config.encoder.d)
        p.update(self.head.init(rng))
        return p

    def bank(self, p: Params) -> pt.PrototypeBank:
        c = self.config
        return pt.PrototypeBank(p["proto.P"], c.t_q, c.t_h, c.t_s)

    def forward(self, p: Params, batch: FeatureSet) -> ForwardResult:
        bank = self.bank(p)
        q, _, qcache = self.encoder.forward(p, batch.query)
        B, d = q.shape
        dq = pt.assign(q, bank, pt.Branch.QUERY)
        cache = {"q": q, "qcache": qcache, "dq": dq, "bank": bank}
        M = min(self.M, batch.chunk_valid.shape[1]) if batch.chunk_valid.ndim == 2 else 0
        if M:
            valid = batch.chunk_valid[:, :M]
            cb = batch.chunks.take((slice(None), slice(0, M)))
            T = cb.shape[-1]
            c_flat, _, ccache = self.encoder.forward(p, cb.reshape(B * M, T))
            c = c_flat.reshape(B, M, d)
            dc = pt.assign(c, bank, pt.Branch.HISTORY)
            dq3 = pt.AssignmentDistribution(dq.probs[:, None, :], dq.log_probs[:, None, :])
            alphas = pt.align(dq3, dc)
            w = pt.weigh(alphas, bank.T_s, valid)
            slots = np.concatenate([q[:, None, :], w[..., None] * c], axis=1)
            mask = np.concatenate([np.ones((B, 1), dtype=bool), valid], axis=1)
            reg, usage = pt.usage_regularizer(dq.probs, dc.probs, valid)
            cache.update(c=c, ccache=ccache, dc=dc, dq3=dq3, w=w, valid=valid, M=M)
            pi_h, out_alpha, out_w = dc.probs, alphas, w
        else:
            slots, mask = q[:, None, :], np.ones((B, 1), dtype=bool)
            reg, usage = pt.usage_regularizer(dq.probs, None)
            cache["M"] = 0
            pi_h = out_alpha = out_w = None
        logits, hcache = self.head.forward(p, slots, mask)
        cache.update(hcache=hcache, usage=usage)
        return ForwardResult(logits, dq.probs, pi_h, out_alpha, out_w, reg, usage, cache)

    def loss_and_grads(self, p: Params, batch: FeatureSet, lambda_u: float, need_grads: bool = True):
        fr = self.forward(p, batch)
        y = batch.labels.astype(np.float64)
        B = len(y)
        total = loss(y, fr.logits, fr.reg, lambda_u)
        if not need_grads:
            return total, None, fr
        grads: Params = {}
        dlogit = (stable_sigmoid(fr.logits) - y) / B
        dslots = self.head.backward(p, fr.cache["hcache"], dlogit, grads)
        c_ = fr.cache
        bank, dq = c_["bank"], c_["dq"]
        gq = dslots[:, 0, :].copy()
        M = c_["M"]
        g_reg = -lambda_u
        if M:
            c, w, dc, valid = c_["c"], c_["w"], c_["dc"], c_["valid"]
            dslot_c = dslots[:, 1:, :]
            gc = dslot_c * w[..., None]
            gw = (dslot_c * c).sum(axis=-1)
            galpha = pt.weigh_backward(w, gw, bank.T_s)
            gq_probs, gc_logp = pt.align_backward(c_["dq3"], dc, galpha)
            uq, uh = pt.usage_backward(fr.usage, dc.probs.shape, valid, g_reg)
            gq_probs = gq_probs[:, 0, :] + uq
            dx_c, dP_c = pt.assign_backward(c, bank, pt.Branch.HISTORY, dc, g_probs=uh, g_log_probs=gc_logp)
            gc = (gc + dx_c) * valid[..., None]
            accumulate(grads, "proto.P", dP_c)
            self.encoder.backward(p, c_["ccache"], gc.reshape(B * M, -1), grads)
        else:
            uq, _ = pt.usage_backward(fr.usage, None, None, g_reg)
            gq_probs = uq
        dx_q, dP_q = pt.assign_backward(c_["q"], bank, pt.Branch.QUERY, dq, g_probs=gq_probs)
        accumulate(grads, "proto.P", dP_q)
        self.encoder.backward(p, c_["qcache"], gq + dx_q, grads)
        for k in p:
            if k not in grads:
                grads[k] = np.zeros_like(p[k])
        return total, grads, fr

    def predict_proba(self, p: Params, data: FeatureSet, batch_size: int = 256) -> np.ndarray:
        out = []
        for s in range(0, len(data), batch_size):
            fr = self.forward(p, data.take(np.arange(s, min(s + batch_size, len(data)))))
            out.append(stable_sigmoid(fr.logits))
        return np.concatenate(out) if out else np.zeros(0)

    def usage(self, p: Params, data: FeatureSet, batch_size: int = 256) -> pt.BatchUsage:
        """Assignment usage over a whole dataset (mean over all queries / all valid retrieved chunks)."""
        qsum, hsum, nq, nh = None, None, 0, 0
        for s in range(0, len(data), batch_size):
            fr = self.forward(p, data.take(np.arange(s, min(s + batch_size, len(data)))))
            u = fr.usage
            qsum = u.mean_query_assignment * u.query_count + (0 if qsum is None else qsum)
            nq += u.query_count
            if u.history_defined:
                hsum = u.mean_history_assignment * u.history_count + (0 if hsum is None else hsum)
                nh += u.history_count
        return pt.BatchUsage(qsum / nq, None if hsum is None else hsum / nh, nq, nh, hsum is not None)

    def save(self, path: str | Path, p: Params) -> str:
        digest = checkpoint.save(path, p)
        Path(str(path) + ".json").write_text(json.dumps(self.config.to_json(), indent=1, sort_keys=True))
        return digest

    @classmethod
    def load(cls, path: str | Path) -> tuple["RagModel", Params]:
        cfg = ModelConfig.from_json(json.loads(Path(str(path) + ".json").read_text()))
        return cls(cfg), checkpoint.load(path)


# Training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.15
    momentum: float = 0.0
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 75
    patience: int = 3
    lambda_u: float = 0.005
    lr_min: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be >= 0")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, params: Params, epoch: int, step: int):
        super().__init__(msg)
        self.params, self.epoch, self.step = params, epoch, step


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auroc: float
    val_auprc: float
    H_qbar: float
    H_hbar: float
    lr: float


LOG_COLUMNS = ("epoch", "train_loss", "val_auroc", "val_auprc", "H_qbar", "H_hbar", "lr")


def cosine_lr(cfg: TrainConfig, step: int, total: int) -> float:
    if total <= 1:
        return cfg.lr
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total))


def _safe_metric(fn, scores, labels) -> float:
    try:
        return fn(scores, labels)
    except ValueError:
        return float("nan")


def evaluate(model: RagModel, p: Params, data: FeatureSet) -> tuple[float, float, pt.BatchUsage]:
    scores = model.predict_proba(p, data)
    u = model.usage(p, data)
    return _safe_metric(auroc, scores, data.labels), _safe_metric(auprc, scores, data.labels), u


@dataclass
class TrainResult:
    params: Params
    history: list[EpochRecord]
    best_epoch: int
    stopped_early: bool


def train(
    model: RagModel,
    params: Params,
    train_data: FeatureSet,
    val_data: FeatureSet | None,
    config: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Mini-batch SGD with cosine-annealed learning rate and early stopping on validation AUROC."""
    p = {k: v.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in p.items()}
    rng = np.random.default_rng(config.seed)
    n = len(train_data)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total = steps_per_epoch * config.max_epochs
    step = 0
    history: list[EpochRecord] = []
    best, best_epoch, best_params, bad = -np.inf, 0, {k: v.copy() for k, v in p.items()}, 0
    stopped = False
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        lr = cosine_lr(config, step, total)
        for s in range(0, n, config.batch_size):
            lr = cosine_lr(config, step, total)
            batch = train_data.take(order[s : s + config.batch_size])
            try:
                value, grads, _ = model.loss_and_grads(p, batch, config.lambda_u)
            except NonFiniteActivation as exc:
                raise TrainingDiverged(str(exc), p, epoch, step) from exc
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch} step {step}", p, epoch, step)
            new = {}
            for k, v in p.items():
                g = grads[k] + config.weight_decay * v
                vel = config.momentum * velocity[k] + g
                velocity[k] = vel
                new[k] = v - lr * vel
            p = new
            losses.append(value * len(batch))
            step += 1
        train_loss = float(np.sum(losses) / n)
        if val_data is not None and len(val_data):
            va, vp, u = evaluate(model, p, val_data)
        else:
            va, vp, u = float("nan"), float("nan"), model.usage(p, train_data)
        rec = EpochRecord(
            epoch,
            train_loss,
            va,
            vp,
            pt.entropy(u.mean_query_assignment),
            pt.entropy(u.mean_history_assignment) if u.history_defined else float("nan"),
            lr,
        )
        history.append(rec)
        log.info("epoch %d loss %.4f val_auroc %.4f", epoch, train_loss, va)
        score = va if np.isfinite(va) else -train_loss
        if score > best:
            best, best_epoch, best_params, bad = score, epoch, {k: v.copy() for k, v in p.items()}, 0
        else:
            bad += 1
            if val_data is not None and bad >= config.patience:
                stopped = True
                break
    if log_path is not None:
        write_log(log_path, history)
    return TrainResult(best_params, history, best_epoch, stopped)


def write_log(path: str | Path, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_COLUMNS)
        for r in history:
            wr.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in LOG_COLUMNS[1:]])


def query_only(config: ModelConfig) -> ModelConfig:
    """Same backbone and fusion stack with retrieval switched off."""
    return replace(config, use_retrieval=False)
