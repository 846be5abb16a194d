import numpy as np
import pytest
import torch

from momug import corpus
from momug.model import ModelConfig, init_state
from momug.schedule import cosine_schedule

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def vocab():
    return corpus.build_vocabulary()


@pytest.fixture(scope="session")
def sched():
    return cosine_schedule(50)


@pytest.fixture(scope="session")
def small_pairs():
    pairs = corpus.generate_corpus(3, 32, 8)
    normed, stats = corpus.normalize_corpus(pairs)
    return normed, stats


def make_tiny_config(vocab, **overrides):
    kwargs = dict(vocab_size=vocab.size, d_model=32, n_layers=2, n_heads=2,
                  d_ff=64, d_motion=8, max_seq_len=96, T=50, lora_rank=2,
                  lora_alpha=4.0, lora_dropout=0.0)
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture()
def tiny_model(vocab):
    return init_state(make_tiny_config(vocab), seed=5)


@pytest.fixture()
def tiny_model_f64(vocab):
    return init_state(make_tiny_config(vocab), seed=5).double()
