import numpy as np
import pytest

from spkmtl import graph as G
from spkmtl.model import (BackboneConfig, SpeakerClassifierConfig, as_nodes, attention_pool,
                          backbone_forward, block_forward, init_backbone, init_classifier,
                          speaker_posterior)
from spkmtl.objectives import SpeakerPosterior, speaker_ce

from conftest import TINY_CLF, TINY_MODEL


def test_output_shape_and_normalisation():
    cfg = BackboneConfig(num_blocks=3, model_dim=8, ff_dim=12, input_dim=5, vocab=4)
    params = init_backbone(cfg, 0)
    x = np.random.default_rng(0).normal(size=(2, 7, 5))
    out = backbone_forward(as_nodes(params), x, cfg.num_blocks)
    assert out.log_probs.shape == (2, 7, 5)
    np.testing.assert_allclose(np.exp(out.log_probs.value).sum(-1), 1.0, atol=1e-12)
    post = out.tap(2).value
    np.testing.assert_allclose(post.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(post.var(-1), 1.0, atol=1e-3)


def test_same_seed_same_parameters():
    a, b = init_backbone(BackboneConfig(), 3), init_backbone(BackboneConfig(), 3)
    assert a.checksum() == b.checksum()
    assert a.checksum() != init_backbone(BackboneConfig(), 4).checksum()


def test_pre_ln_tap_reproduces_post_ln_tap():
    cfg = TINY_MODEL
    params = init_backbone(cfg, 1)
    nodes = as_nodes(params)
    out = backbone_forward(nodes, np.random.default_rng(1).normal(size=(2, 5, 4)), cfg.num_blocks)
    for k in range(1, cfg.num_blocks + 1):
        ln = G.layer_norm(out.tap(k, pre_layer_norm=True), nodes[f"backbone.block{k}.ln.gain"],
                          nodes[f"backbone.block{k}.ln.bias"], 1e-5)
        assert ln.value.tobytes() == out.tap(k).value.tobytes()


def test_block_zero_tap_is_raw_input():
    params = init_backbone(TINY_MODEL, 0)
    x = np.random.default_rng(2).normal(size=(1, 4, 4))
    out = backbone_forward(as_nodes(params), x, TINY_MODEL.num_blocks)
    np.testing.assert_array_equal(out.tap(0).value, x)
    with pytest.raises(ValueError):
        out.tap(TINY_MODEL.num_blocks + 1)


def test_attention_pool_contracts():
    params = init_classifier("spk1", 3, SpeakerClassifierConfig(4, 2), 0)
    nodes = as_nodes(params)
    v = np.array([0.5, -1.0, 2.0])
    pooled, w = attention_pool(np.tile(v, (1, 6, 1)), nodes, "spk1")
    np.testing.assert_allclose(pooled.value[0], v, rtol=1e-14)
    single, _ = attention_pool(v[None, None, :], nodes, "spk1")
    np.testing.assert_array_equal(single.value[0], v)
    _, w = attention_pool(np.random.default_rng(0).normal(size=(2, 5, 3)), nodes, "spk1")
    np.testing.assert_allclose(w.value.sum(-1), 1.0, atol=1e-12)


def test_speaker_posterior_contracts():
    params = init_classifier("spk2", 3, SpeakerClassifierConfig(4, 5), 0)
    params["spk2.out.weight"] = np.zeros((3, 5))
    nodes = as_nodes(params)
    pooled = G.constant(np.array([[1.0, 2.0, 3.0]]))
    np.testing.assert_allclose(speaker_posterior(pooled, nodes, "spk2").value, 0.2)
    params["spk2.out.weight"] = np.random.default_rng(0).normal(size=(3, 5))
    a = speaker_posterior(pooled, as_nodes(params), "spk2").value
    params["spk2.out.bias"] = params["spk2.out.bias"] + 7.0
    b = speaker_posterior(pooled, as_nodes(params), "spk2").value
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert abs(a.sum() - 1.0) < 1e-9


def test_classifier_is_small_relative_to_backbone():
    bb = init_backbone(BackboneConfig(), 0)
    clf = init_classifier("spk1", 64, SpeakerClassifierConfig(), 0)
    assert clf.count() < 0.05 * bb.count()


def test_composed_model_gradcheck(tiny_corpus):
    """Backbone + attention pool + classifier + CTC, no reversal layer."""
    from spkmtl.ctc import ctc_node
    from spkmtl.data import make_batch
    from spkmtl.trainer import ensure_classifiers
    from spkmtl.objectives import ObjectiveSpec

    params = init_backbone(TINY_MODEL, 2)
    ensure_classifiers(params, ObjectiveSpec("spk-enh", l1=2), TINY_MODEL, TINY_CLF, 2)
    batch = make_batch(tiny_corpus[::3][:3])

    def fn(p):
        out = backbone_forward(p, batch.features, TINY_MODEL.num_blocks)
        pooled, _ = attention_pool(out.tap(2, pre_layer_norm=True), p, "spk1", batch.mask)
        ce = speaker_ce(SpeakerPosterior(speaker_posterior(pooled, p, "spk1"), batch.speakers))
        return ctc_node(out.log_probs, batch.labels, batch.lengths) + G.scale(ce, 0.7)

    rep = G.finite_diff_check(fn, params.entries, eps=1e-5, max_elements=8)
    assert rep.worst <= 1e-4, sorted(rep.max_rel_error.items(), key=lambda kv: -kv[1])[:3]
