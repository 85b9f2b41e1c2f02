"""Synthetic text-motion corpus: data model, generator, embedder, storage."""

from .motion import (
    DEFAULT_FPS,
    F_MAX,
    F_MIN,
    NUM_JOINTS,
    POSE_DIM,
    MotionSequence,
    assemble_motion,
    velocity_consistency_error,
)
from .grammar import (
    ACTIONS,
    TEXT_EMBED_DIM,
    TextDescriptor,
    TextEmbedder,
    embed_text,
    pace_for_length,
    render_text,
    parse_text,
    vocabulary,
)
from .normalize import Normalizer, fit_normalizer
from .sample import CorpusSample, assign_split
from .generate import CorpusConfig, generate_corpus, make_sample, split_samples
from .fileio import (
    load_corpus,
    load_normalizer,
    save_corpus,
    save_normalizer,
    corpus_to_bytes,
    corpus_from_bytes,
)

__all__ = [
    "ACTIONS",
    "CorpusConfig",
    "CorpusSample",
    "DEFAULT_FPS",
    "F_MAX",
    "F_MIN",
    "MotionSequence",
    "NUM_JOINTS",
    "Normalizer",
    "POSE_DIM",
    "TEXT_EMBED_DIM",
    "TextDescriptor",
    "TextEmbedder",
    "assemble_motion",
    "assign_split",
    "corpus_from_bytes",
    "corpus_to_bytes",
    "embed_text",
    "fit_normalizer",
    "generate_corpus",
    "load_corpus",
    "load_normalizer",
    "make_sample",
    "pace_for_length",
    "parse_text",
    "render_text",
    "save_corpus",
    "save_normalizer",
    "split_samples",
    "velocity_consistency_error",
]
