"""Unified text-motion generation: one frozen-base decoder transformer with
low-rank adapters does diffusion-based motion generation and autoregressive
captioning over a single mixed-modality sequence."""

__version__ = "0.1.0"

from .corpus import (Caption, CorpusPair, CorpusStats, MotionSequence,
                     Vocabulary, build_vocabulary, generate_corpus,
                     load_corpus, normalize, save_corpus)
from .metrics import JointEmbedder, MetricReport, evaluate, fid, train_embedder
from .model import MixedSequence, ModelConfig, MotionTextTransformer, init_state
from .sampling import SampleConfig, inpaint_motion, sample_motion, sample_text
from .schedule import NoiseSchedule, cosine_schedule
from .training import TrainConfig, build_example, pretrain_base, train_loop

__all__ = [
    "Caption", "CorpusPair", "CorpusStats", "MotionSequence", "Vocabulary",
    "build_vocabulary", "generate_corpus", "load_corpus", "normalize",
    "save_corpus", "JointEmbedder", "MetricReport", "evaluate", "fid",
    "train_embedder", "MixedSequence", "ModelConfig", "MotionTextTransformer",
    "init_state", "SampleConfig", "inpaint_motion", "sample_motion",
    "sample_text", "NoiseSchedule", "cosine_schedule", "TrainConfig",
    "build_example", "pretrain_base", "train_loop",
]
