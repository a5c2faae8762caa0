import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spkmtl import graph as G
from spkmtl.ctc import (InfeasibleAlignmentError, ctc_batch, ctc_bruteforce, ctc_loss, ctc_node,
                        greedy_decode, label_error_rate, min_frames)


def _log_softmax(x):
    return x - np.log(np.exp(x - x.max(-1, keepdims=True)).sum(-1, keepdims=True)) - x.max(-1, keepdims=True)


def _random_instance(rng, t_max=6, l_max=3):
    V = int(rng.integers(2, 4))
    T = int(rng.integers(1, t_max + 1))
    L = int(rng.integers(1, l_max + 1))
    labels = rng.integers(0, V, size=L).tolist()
    return _log_softmax(rng.normal(scale=2.0, size=(T, V + 1))), labels


def test_single_frame_uniform():
    loss, _ = ctc_loss(np.log(np.full((1, 3), 1 / 3)), [0])
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_two_frames_uniform_three_alignments():
    # paths (0,0), (0,b), (b,0), each 1/9
    loss, _ = ctc_loss(np.log(np.full((2, 3), 1 / 3)), [0])
    assert loss == pytest.approx(-math.log(3 / 9), abs=1e-12)
    assert loss == pytest.approx(ctc_bruteforce(np.log(np.full((2, 3), 1 / 3)), [0]), abs=1e-12)


def test_exactly_one_alignment():
    rng = np.random.default_rng(0)
    lp = _log_softmax(rng.normal(size=(2, 3)))
    loss, _ = ctc_loss(lp, [0, 1])
    assert loss == pytest.approx(-(lp[0, 0] + lp[1, 1]), abs=1e-12)
    assert loss == pytest.approx(ctc_bruteforce(lp, [0, 1]), abs=1e-12)


def test_single_path_bruteforce():
    lp = _log_softmax(np.array([[0.3, -1.0, 0.2]]))
    assert ctc_bruteforce(lp, [0]) == pytest.approx(-lp[0, 0], abs=1e-14)


def test_oracle_equivalence_200_instances():
    rng = np.random.default_rng(1)
    checked = 0
    while checked < 200:
        lp, labels = _random_instance(rng)
        if lp.shape[0] < min_frames(labels):
            continue
        assert abs(ctc_loss(lp, labels)[0] - ctc_bruteforce(lp, labels)) <= 1e-9
        checked += 1


def test_infeasible_is_an_error_on_both_paths():
    lp = _log_softmax(np.zeros((2, 3)))
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(lp, [0, 1, 0])
    with pytest.raises(InfeasibleAlignmentError):
        ctc_bruteforce(lp, [0, 1, 0])
    # a repeat needs a separating blank: [1, 1] needs 3 frames
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(lp, [1, 1])
    with pytest.raises(InfeasibleAlignmentError):
        ctc_bruteforce(lp, [1, 1])


def test_bruteforce_budget():
    with pytest.raises(ValueError, match="budget"):
        ctc_bruteforce(np.zeros((12, 5)), [0])


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    eps = 1e-5
    for _ in range(20):
        lp, labels = _random_instance(rng, t_max=5)
        if lp.shape[0] < min_frames(labels):
            continue
        _, grad = ctc_loss(lp, labels)
        num = np.zeros_like(lp)
        for idx in np.ndindex(lp.shape):
            up, dn = lp.copy(), lp.copy()
            up[idx] += eps
            dn[idx] -= eps
            num[idx] = (ctc_loss(up, labels)[0] - ctc_loss(dn, labels)[0]) / (2 * eps)
        rel = np.abs(grad - num) / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-7)
        assert rel.max() <= 1e-5


def test_permuting_non_target_symbols_is_invariant():
    rng = np.random.default_rng(3)
    lp = _log_softmax(rng.normal(size=(6, 6)))
    labels = [0, 1]
    # swap classes 2 and 4 (neither a target nor blank)
    perm = [0, 1, 4, 3, 2, 5]
    a, _ = ctc_loss(lp, labels)
    b, _ = ctc_loss(lp[:, perm], labels)
    assert a == pytest.approx(b, abs=1e-12)


def test_tiny_probabilities_stay_finite():
    lp = np.full((5, 4), np.log(1e-300))
    lp[:, 3] = np.log(1 - 3e-300)
    loss, grad = ctc_loss(lp, [0, 2])
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    assert loss > 600


def test_batch_padding_matches_individual():
    rng = np.random.default_rng(4)
    lps = rng.normal(size=(3, 6, 4))
    labels, lengths = [[0], [1, 2, 0], [2, 2]], [2, 6, 4]
    losses, grad = ctc_batch(lps, labels, lengths)
    for n in range(3):
        l1, g1 = ctc_loss(lps[n, :lengths[n]], labels[n])
        assert losses[n] == pytest.approx(l1, abs=1e-12)
        np.testing.assert_allclose(grad[n, :lengths[n]], g1, atol=1e-12)
        assert not np.any(grad[n, lengths[n]:])


def test_ctc_node_backpropagates_mean():
    rng = np.random.default_rng(5)
    x = G.param(rng.normal(size=(2, 4, 3)), "x")
    node = ctc_node(G.log_softmax(x), [[0], [1, 0]], [4, 3])
    grads = G.backward(node)
    losses, _ = ctc_batch(G.log_softmax(G.constant(x.value)).value, [[0], [1, 0]], [4, 3])
    assert float(node.value) == pytest.approx(losses.mean())
    assert grads["x"].shape == (2, 4, 3)


@pytest.mark.parametrize("argmax,expected", [
    ([2, 0, 0, 2, 1], [0, 1]),
    ([2, 2, 2], []),
    ([0, 2, 0], [0, 0]),
])
def test_greedy_decode(argmax, expected):
    lp = np.full((len(argmax), 3), -5.0)
    lp[np.arange(len(argmax)), argmax] = 0.0
    assert greedy_decode(lp) == expected


def test_label_error_rate():
    assert label_error_rate([1, 2, 3], [1, 2, 3]) == 0
    assert label_error_rate([], [1, 2, 3, 4]) == 1.0
    assert label_error_rate([0, 1, 2], [0, 5, 2]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        label_error_rate([1], [])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_oracle_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    lp, labels = _random_instance(rng, t_max=5)
    if lp.shape[0] < min_frames(labels):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(lp, labels)
        return
    assert abs(ctc_loss(lp, labels)[0] - ctc_bruteforce(lp, labels)) <= 1e-9
