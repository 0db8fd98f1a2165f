from dataclasses import replace

import numpy as np
import pytest

from amos.autodiff import ParameterSet
from amos.data import GrammarSpec, build_vocab, generate_synthetic_corpus
from amos.encoder import EncoderConfig
from amos.settings import TrainConfig

TINY_GRAMMAR = GrammarSpec(min_length=12, max_length=20, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(num_layers=2, hidden_size=8, num_attention_heads=2, ffn_size=16,
                         num_buckets=4, max_relative_distance=8, dropout_rate=0.0, vocab_size=12)


@pytest.fixture
def params():
    return ParameterSet()


@pytest.fixture
def corpus_files(tmp_path):
    corpus = tmp_path / "data" / "corpus.txt"
    generate_synthetic_corpus(TINY_GRAMMAR, 48, corpus, workers=2)
    vocab = tmp_path / "data" / "vocab.txt"
    build_vocab(corpus).save(vocab)
    return corpus, vocab


@pytest.fixture
def tiny_config(corpus_files):
    corpus, vocab = corpus_files
    return TrainConfig(corpus=str(corpus), vocab=str(vocab), hidden_size=8, num_attention_heads=2,
                       ffn_size=16, disc_layers=2, head_depths=[1, 2], switch_points=[0.5],
                       num_buckets=4, max_relative_distance=8, batch_size=4, seq_len=20,
                       total_steps=12, warmup_steps=2, log_interval=2, checkpoint_interval=6,
                       probe_steps=30, probe_sequences=48, seed=5)


@pytest.fixture
def make_config(tiny_config):
    def make(**changes):
        return replace(tiny_config, **changes)
    return make
