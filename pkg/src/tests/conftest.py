import numpy as np
import pytest

from dual_skew_seq2seq.corpus import TaskKind, TaskSpec, generate_task
from dual_skew_seq2seq.seq2seq import Seq2SeqConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return Seq2SeqConfig(
        src_vocab=8, tgt_vocab=8, emb_dim=4, hidden_dim=6, attn_dim=5, max_src_len=16, max_tgt_len=16, seed=0
    )


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config)


@pytest.fixture
def copy_spec():
    return TaskSpec(kind=TaskKind.COPY, src_vocab=8, tgt_vocab=8, min_len=2, max_len=4, size=32, seed=0)


@pytest.fixture
def copy_corpus(copy_spec):
    return generate_task(copy_spec)
