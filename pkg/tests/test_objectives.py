import math

import numpy as np
import pytest

from spkmtl import graph as G
from spkmtl.data import make_batch
from spkmtl.model import as_nodes, backbone_forward, classify
from spkmtl.objectives import (ConfigError, NumericalError, ObjectiveSpec, SpeakerPosterior,
                               assemble_objective, focal_scale, grl_adaptive, grl_standard,
                               set_adaptive_scale, speaker_ce)


def _posterior(rows, targets):
    return SpeakerPosterior(G.constant(np.array(rows, dtype=float)), np.array(targets))


def test_speaker_ce_values():
    assert float(speaker_ce(_posterior([[1.0, 0.0], [0.0, 1.0]], [0, 1])).value) == 0.0
    assert float(speaker_ce(_posterior([[0.25] * 4], [2])).value) == pytest.approx(math.log(4))
    post = _posterior([[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]], [0, 3])
    assert float(speaker_ce(post).value) == pytest.approx((math.log(2) + math.log(4)) / 2)


def test_speaker_ce_zero_target_is_an_error():
    with pytest.raises(NumericalError):
        speaker_ce(_posterior([[1.0, 0.0]], [1]))


@pytest.mark.parametrize("p1,beta,expected", [(1.0, 1.0, 0.0), (0.9, 1.0, 0.1), (0.5, 2.0, 0.25), (0.3, 0.0, 1.0)])
def test_focal_scale(p1, beta, expected):
    assert focal_scale(p1, beta) == pytest.approx(expected, abs=1e-15)


def test_grl_standard_forward_and_backward():
    z = G.param(np.array([1.5, -2.0]), "z")
    r = grl_standard(z, 0.5)
    assert r.value.tobytes() == z.value.tobytes()
    upstream = G.constant(np.array([1.0, -2.0]))
    grads = G.backward(G.sum(r * upstream))
    np.testing.assert_array_equal(grads["z"], [-0.5, 1.0])


@pytest.mark.parametrize("p2,beta,scale", [(0.25, 1.0, 0.25), (0.05, 1.0, 0.05), (0.81, 0.5, 0.9)])
def test_grl_adaptive_scale(p2, beta, scale):
    z = G.param(np.array([1.0, 2.0, 3.0]), "z")
    r = grl_adaptive(z, p2, beta)
    assert r.attrs["reverse_scale"] == pytest.approx(scale, abs=1e-15)
    grads = G.backward(G.sum(r))
    np.testing.assert_allclose(grads["z"], -scale)


def test_grl_config_errors():
    with pytest.raises(ConfigError):
        grl_standard(G.constant(1.0), 0.0)
    with pytest.raises(ConfigError):
        grl_adaptive(G.constant(1.0), 0.5, 0.0)
    r = grl_adaptive(G.param(np.ones(2), "z"))
    with pytest.raises(G.GraphError, match="never set"):
        G.backward(G.sum(r))


def test_lambda_adapt_monotone_in_p2():
    z = G.constant(np.ones(2))
    node = grl_adaptive(z, None, 1.0)
    scales = [set_adaptive_scale(node, p) for p in np.linspace(0, 1, 11)]
    assert all(a <= b for a, b in zip(scales, scales[1:]))


@pytest.mark.parametrize("kwargs", [
    dict(kind="spk-enh"),
    dict(kind="spk-adv-adaptive"),
    dict(kind="spk-adv-standard", l2=3),
    dict(kind="spk-enh-adv-joint", l1=5, l2=3),
    dict(kind="nonsense"),
    dict(kind="spk-adv-adaptive", l2=3, beta_adapt=0.0),
])
def test_objective_spec_validation(kwargs):
    with pytest.raises(ConfigError):
        ObjectiveSpec(**kwargs)


def _state(tiny_setup, spec):
    params, batch, mc = tiny_setup(spec)
    nodes = as_nodes(params)
    out = backbone_forward(nodes, batch.features, mc.num_blocks)
    return assemble_objective(spec, out, nodes, batch), nodes


def test_baseline_matches_plain_ctc(tiny_setup):
    obj, nodes = _state(tiny_setup, ObjectiveSpec())
    assert obj.total is obj.ctc
    assert set(obj.metrics) == {"ctc", "total"}


def test_enh_total_is_ctc_plus_focal_weighted_ce(tiny_setup):
    spec = ObjectiveSpec("spk-enh", l1=1)
    obj, _ = _state(tiny_setup, spec)
    m = obj.metrics
    assert m["lambda1"] == pytest.approx(1 - m["p1"], abs=1e-15)
    assert m["total"] == pytest.approx(m["ctc"] + m["lambda1"] * m["spk1"], rel=1e-14)


def test_beta_focal_zero_is_unweighted(tiny_setup):
    obj, _ = _state(tiny_setup, ObjectiveSpec("spk-enh", l1=1, beta_focal=0.0))
    assert obj.metrics["lambda1"] == 1.0
    assert obj.metrics["total"] == pytest.approx(obj.metrics["ctc"] + obj.metrics["spk1"], rel=1e-14)


def test_focal_per_utterance_switch(tiny_setup):
    obj, _ = _state(tiny_setup, ObjectiveSpec("spk-enh", l1=1, focal_per_utterance=True))
    assert 0 < obj.metrics["lambda1"] < 1


def test_joint_structure(tiny_setup):
    spec = ObjectiveSpec("spk-enh-adv-joint", l1=1, l2=2)
    obj, _ = _state(tiny_setup, spec)
    m = obj.metrics
    assert m["lambda_adapt"] == pytest.approx(m["p2"], abs=1e-15)
    assert m["total"] == pytest.approx(m["ctc"] + m["lambda1"] * m["spk1"] + m["spk2"], rel=1e-14)
    assert obj.grl.op == "grl_adaptive"
    # the enhancing branch reads the pre-LN tap, the adversarial branch the block output
    ops = {n.op for n in G.topological_order(obj.total)}
    assert {"ctc", "grl_adaptive", "layer_norm"} <= ops


def test_standard_total_scales_discriminator_loss(tiny_setup):
    spec = ObjectiveSpec("spk-adv-standard", l2=2, lambda2=0.5)
    obj, _ = _state(tiny_setup, spec)
    m = obj.metrics
    assert m["total"] == pytest.approx(m["ctc"] + 0.5 * m["spk2"], rel=1e-14)


def test_missing_classifier_is_config_error(tiny_setup):
    spec = ObjectiveSpec("spk-enh", l1=1)
    params, batch, mc = tiny_setup(ObjectiveSpec())
    nodes = as_nodes(params)
    out = backbone_forward(nodes, batch.features, mc.num_blocks)
    with pytest.raises(ConfigError, match="spk1"):
        assemble_objective(spec, out, nodes, batch)


def _spk2_grads(params, batch, mc, reversal):
    """Gradients of the discriminator loss alone, with the given layer at the tap."""
    nodes = as_nodes(params)
    out = backbone_forward(nodes, batch.features, mc.num_blocks)
    probs = classify(reversal(out.tap(2)), nodes, "spk2", batch.mask)
    return G.backward(speaker_ce(SpeakerPosterior(probs, batch.speakers)))


def test_standard_grl_negates_gradients_below(tiny_setup):
    params, batch, mc = tiny_setup(ObjectiveSpec("spk-adv-adaptive", l2=2))
    plain = _spk2_grads(params, batch, mc, G.identity)
    rev = _spk2_grads(params, batch, mc, lambda z: grl_standard(z, 1.0))
    for name, g in plain.items():
        if name.startswith("spk2."):
            assert rev[name].tobytes() == g.tobytes()
        elif name.startswith(("backbone.input", "backbone.block1", "backbone.block2")):
            assert rev[name].tobytes() == (-g).tobytes(), name
        else:
            assert not np.any(g) and not np.any(rev[name])


def test_adaptive_grl_scales_gradients_below(tiny_setup):
    params, batch, mc = tiny_setup(ObjectiveSpec("spk-adv-adaptive", l2=2))
    plain = _spk2_grads(params, batch, mc, G.identity)
    lam = 0.3 ** 0.7
    rev = _spk2_grads(params, batch, mc, lambda z: grl_adaptive(z, 0.3, 0.7))
    for name, g in plain.items():
        if name.startswith("spk2."):
            assert rev[name].tobytes() == g.tobytes()
        elif name.startswith("backbone.block2") or name.startswith("backbone.input"):
            # one extra rounding per product: tolerance relative to the tensor's scale
            np.testing.assert_allclose(rev[name], -lam * g, rtol=1e-12, atol=1e-12 * np.abs(g).max())
