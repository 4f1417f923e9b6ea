"""Run configuration: INI sections flattened into one namespace of key=value settings."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .chunker import ChunkingConfig, Strategy
from .encoder.sequence import EncoderKind, Pooling, SequenceEncoderConfig
from .fusion import FusionPooling, ModelConfig, SlotOrder, TrainConfig
from .tasks import SyntheticConfig
from .timeline import TimeDeltaScaler


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    # data
    patients: int = 2000
    visits_min: int = 2
    visits_max: int = 5
    events_min: int = 8
    events_max: int = 20
    marker_copies: int = 8
    marker_rate: float = 0.5
    signal_strength: float = 0.9
    noise_codes: int = 500
    task: str = "IHM_48H"
    delta_max_minutes: int = 525600
    # retrieval
    chunk_strategy: str = "event"
    history_chunk_size: int = 256
    history_chunk_overlap: int = 32
    time_window_minutes: int = 360
    query_chunk_size: int = 1024
    num_retrieved: int = 24
    # backbone
    d: int = 32
    encoder: str = "bag"
    encoder_layers: int = 1
    encoder_heads: int = 1
    pooling: str = "mean"
    rotary: bool = False
    max_visits: int = 64
    # prototypes
    prototypes: int = 128
    t_q: float = 0.05
    t_h: float = 0.2
    t_s: float = 0.15
    # fusion
    fusion_layers: int = 2
    fusion_heads: int = 4
    fusion_pooling: str = "mean"
    slot_order: str = "similarity"
    # training
    lr: float = 0.15
    momentum: float = 0.0
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 75
    patience: int = 3
    lambda_u: float = 0.005
    # pretraining
    mlm_steps: int = 200
    mlm_lr: float = 3e-3
    mlm_batch_size: int = 16
    # evaluation
    n_boot: int = 1000

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()

    def synthetic(self) -> SyntheticConfig:
        return SyntheticConfig(
            patients=self.patients,
            visits=(self.visits_min, self.visits_max),
            events_per_visit=(self.events_min, self.events_max),
            marker_copies=self.marker_copies,
            marker_rate=self.marker_rate,
            signal_strength=self.signal_strength,
            noise_codes=self.noise_codes,
            query_size=self.query_chunk_size,
            task=self.task,
            seed=self.seed,
        )

    def chunking(self) -> ChunkingConfig:
        return ChunkingConfig(
            Strategy[self.chunk_strategy.upper()], self.history_chunk_size, self.history_chunk_overlap, self.time_window_minutes
        )

    def encoder_config(self) -> SequenceEncoderConfig:
        return SequenceEncoderConfig(
            EncoderKind(self.encoder),
            self.d,
            self.encoder_layers,
            self.encoder_heads,
            Pooling(self.pooling),
            self.rotary,
            self.max_visits,
        )

    def model(self, vocab_size: int, use_retrieval: bool = True) -> ModelConfig:
        return ModelConfig(
            vocab_size,
            self.encoder_config(),
            self.prototypes,
            self.t_q,
            self.t_h,
            self.t_s,
            self.num_retrieved,
            self.fusion_layers,
            self.fusion_heads,
            FusionPooling(self.fusion_pooling),
            SlotOrder(self.slot_order),
            use_retrieval,
        )

    def training(self) -> TrainConfig:
        return TrainConfig(
            self.lr, self.momentum, self.weight_decay, self.batch_size, self.max_epochs, self.patience, self.lambda_u, 0.0, self.seed
        )

    def scaler(self) -> TimeDeltaScaler:
        return TimeDeltaScaler(self.delta_max_minutes)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    if kind in ("bool", bool):
        low = raw.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return low in ("1", "true", "yes", "on")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text; section names are for grouping only and keys must be unique across sections."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    values, seen = {}, {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            if key not in _TYPES:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            if key in seen:
                raise ValueError(f"config key {key!r} set in both [{seen[key]}] and [{section}]")
            seen[key] = section
            values[key] = _coerce(key, raw)
    return replace(base or RunConfig(), **values)


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    if path is None:
        return base or RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"), base)


def dump_config(cfg: RunConfig) -> str:
    return "[run]\n" + "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def desk_scale(**overrides) -> RunConfig:
    """Small settings that train in well under a minute on one CPU core."""
    base = RunConfig(
        chunk_strategy="visit",
        history_chunk_size=32,
        history_chunk_overlap=4,
        query_chunk_size=32,
        num_retrieved=8,
        d=16,
        prototypes=64,
        max_epochs=40,
        mlm_steps=100,
    )
    return replace(base, **overrides)


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
