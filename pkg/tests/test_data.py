import numpy as np
import pytest

from spkmtl import graph as G
from spkmtl.ctc import min_frames
from spkmtl.data import (CorpusConfig, batch_iterator, generate_corpus, make_batch,
                         nearest_centroid_accuracy, read_corpus, speaker_model, split, write_corpus)
from spkmtl.model import as_nodes, attention_pool, init_classifier, SpeakerClassifierConfig

SMALL = CorpusConfig(num_speakers=6, utts_per_speaker=20, seq_len_min=10, seq_len_max=20, seed=3)


def test_clean_content_is_recoverable_by_nearest_prototype():
    cfg = CorpusConfig(num_speakers=3, utts_per_speaker=5, speaker_offset_scale=0,
                       speaker_tilt_scale=0, noise_scale=0, seed=1)
    protos = speaker_model(cfg).prototypes
    for utt in generate_corpus(cfg):
        nearest = np.argmax(utt.features @ protos.T, axis=1)
        runs = [int(s) for i, s in enumerate(nearest) if i == 0 or s != nearest[i - 1]]
        assert runs == utt.content


def test_noiseless_speakers_separable_by_centroid():
    cfg = CorpusConfig(num_speakers=8, utts_per_speaker=10, speaker_offset_scale=1.0,
                       speaker_tilt_scale=0.0, noise_scale=0.0, seed=2)
    corpus = generate_corpus(cfg)
    assert nearest_centroid_accuracy(corpus, corpus) == 1.0


def test_generation_is_deterministic():
    a, b = generate_corpus(SMALL), generate_corpus(SMALL)
    assert all(x.features.tobytes() == y.features.tobytes() and x.content == y.content
               for x, y in zip(a, b))


def test_ctc_feasible_by_construction():
    cfg = CorpusConfig(num_speakers=4, utts_per_speaker=30, seq_len_min=1, seq_len_max=6,
                       frames_per_symbol_min=1, frames_per_symbol_max=3, seed=4)
    for utt in generate_corpus(cfg):
        assert utt.num_frames >= min_frames(utt.content)
        assert cfg.seq_len_min <= utt.num_frames <= cfg.seq_len_max


def test_content_distribution_is_uniform():
    corpus = generate_corpus(CorpusConfig(num_speakers=10, utts_per_speaker=50, seed=5))
    symbols = np.concatenate([u.content for u in corpus])
    counts = np.bincount(symbols, minlength=10)
    n, p = len(symbols), 0.1
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(seq_len_min=10, seq_len_max=5))
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(noise_scale=-1.0))


def test_speaker_scale_increases_centroid_accuracy():
    for seed in range(3):
        accs = []
        for scale in (0.0, 0.5, 1.0):
            cfg = CorpusConfig(num_speakers=20, utts_per_speaker=20, seq_len_min=10, seq_len_max=20,
                               speaker_offset_scale=scale, speaker_tilt_scale=0.0,
                               noise_scale=2.0, seed=seed)
            tr, ev = split(generate_corpus(cfg), 0.25, seed)
            accs.append(nearest_centroid_accuracy(tr, ev))
        assert accs[0] < accs[1] < accs[2]


def test_split_default_fraction_and_stratification():
    corpus = generate_corpus(CorpusConfig(num_speakers=4, utts_per_speaker=100, seed=6))
    train, held = split(corpus, 0.05, seed=0)
    assert len(train) + len(held) == len(corpus)
    counts = np.bincount([u.speaker for u in held])
    assert counts.tolist() == [5, 5, 5, 5]
    assert not {u.uid for u in train} & {u.uid for u in held}


def test_split_needs_two_utterances():
    corpus = generate_corpus(CorpusConfig(num_speakers=2, utts_per_speaker=1, seed=0))
    with pytest.raises(ValueError, match="need >= 2"):
        split(corpus, 0.5)


def test_batches_are_padded_and_deterministic():
    corpus = generate_corpus(SMALL)
    batches = list(batch_iterator(corpus, 8, shuffle_seed=1))
    again = list(batch_iterator(corpus, 8, shuffle_seed=1))
    assert [b.uids for b in batches] == [b.uids for b in again]
    b = batches[0]
    assert b.features.shape == (8, b.lengths.max(), SMALL.input_dim)
    assert np.all(b.features[~b.mask] == 0)


def test_masked_pool_equals_unpadded_pool():
    corpus = generate_corpus(SMALL)
    short = min(corpus, key=lambda u: u.num_frames)
    long = max(corpus, key=lambda u: u.num_frames)
    padded = make_batch([short, long])
    params = init_classifier("spk1", SMALL.input_dim, SpeakerClassifierConfig(8, 6), 0)
    nodes = as_nodes(params)
    pooled, _ = attention_pool(padded.features, nodes, "spk1", padded.mask)
    alone, _ = attention_pool(short.features[None], nodes, "spk1")
    np.testing.assert_allclose(pooled.value[0], alone.value[0], rtol=1e-13, atol=1e-15)


def test_corpus_files_round_trip(tmp_path):
    corpus = generate_corpus(SMALL)
    write_corpus(tmp_path / "c", corpus)
    back = read_corpus(tmp_path / "c")
    assert [u.uid for u in back] == [u.uid for u in corpus]
    assert all(a.features.tobytes() == b.features.tobytes() and a.content == b.content
               and a.speaker == b.speaker for a, b in zip(corpus, back))
