"""Retrieval-augmented prediction over longitudinal event timelines."""

from .chunker import ChunkDescriptor, ChunkingConfig, Strategy, chunk_history, materialize
from .config import RunConfig, desk_scale, load_config
from .fusion import FusedSequence, FusionHead, ModelConfig, RagModel, TrainConfig, fuse, predict, train
from .index import VectorIndex, build_index, read_index, search, write_index
from .metrics import MetricReport, auprc, auroc, bootstrap_ci
from .prototypes import PrototypeBank, align, assign, usage_regularizer, weigh
from .tasks import SyntheticConfig, TaskName, generate, get_task, label, split
from .timeline import PatientTimeline, TimelineEvent, TimeDeltaScaler, Vocabulary, build_timeline

__version__ = "0.1.0"
