import numpy as np
import pytest

from spkmtl.data import CorpusConfig, generate_corpus, make_batch
from spkmtl.model import BackboneConfig, SpeakerClassifierConfig
from spkmtl.trainer import ensure_classifiers
from spkmtl.model import init_backbone

TINY_CORPUS = CorpusConfig(num_speakers=3, utts_per_speaker=4, content_vocab=3, seq_len_min=5,
                           seq_len_max=8, frames_per_symbol_min=1, frames_per_symbol_max=3,
                           input_dim=4, seed=7)
TINY_MODEL = BackboneConfig(num_blocks=3, model_dim=6, ff_dim=8, input_dim=4, vocab=3)
TINY_CLF = SpeakerClassifierConfig(attn_hidden=5, num_speakers=3)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(TINY_CORPUS)


@pytest.fixture
def tiny_setup(tiny_corpus):
    """Factory: ``(params, batch, model_cfg)`` with the classifiers ``spec`` needs."""

    def make(spec, seed=0):
        params = init_backbone(TINY_MODEL, seed)
        ensure_classifiers(params, spec, TINY_MODEL, TINY_CLF, seed)
        return params, make_batch(tiny_corpus[:6]), TINY_MODEL

    return make
