from .embeddings import EventEmbedding, SequenceBatch, embed_event, featurize, time2vec
from .masking import MaskingPlan, Replacement, apply_masking, plan_masking, pretrain_mlm
from .sequence import (
    DegenerateEmbeddingError,
    EmptySequenceError,
    EncoderKind,
    Pooling,
    Retriever,
    SequenceEncoder,
    SequenceEncoderConfig,
    encode_sequence,
    retriever_encode,
)

__all__ = [
    "DegenerateEmbeddingError",
    "EmptySequenceError",
    "EncoderKind",
    "EventEmbedding",
    "MaskingPlan",
    "Pooling",
    "Replacement",
    "Retriever",
    "SequenceBatch",
    "SequenceEncoder",
    "SequenceEncoderConfig",
    "apply_masking",
    "embed_event",
    "encode_sequence",
    "featurize",
    "plan_masking",
    "pretrain_mlm",
    "retriever_encode",
    "time2vec",
]
