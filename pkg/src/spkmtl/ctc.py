"""CTC loss by the log-space forward-backward recursion.

The blank symbol is always the last class: with a content vocabulary of
size ``V`` the posteriors have ``V + 1`` columns and blank is index ``V``.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import graph as G

NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    """The label sequence cannot be aligned to the given number of frames."""


def min_frames(labels) -> int:
    """Shortest input that can emit ``labels``: one frame each, plus a blank between repeats."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.size < 1:
        raise ValueError("label sequence must be a non-empty 1-d sequence")
    blank = num_classes - 1
    if np.any(labels < 0) or np.any(labels >= blank):
        raise ValueError(f"labels must lie in [0, {blank}); blank is {blank}")
    return labels


def ctc_batch(log_probs: np.ndarray, labels: list, lengths=None):
    """Per-utterance CTC negative log-likelihoods and their gradients.

    ``log_probs`` has shape ``(N, T, C)``.  Frames at or beyond ``lengths[n]``
    are ignored and receive zero gradient.  Returns ``(losses (N,), grad (N,T,C))``
    where ``grad[n]`` is the derivative of ``losses[n]`` with respect to
    ``log_probs[n]`` treated as free inputs.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    N, T, C = log_probs.shape
    blank = C - 1
    lengths = np.full(N, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
    labels = [_check_labels(l, C) for l in labels]
    for n, (lab, tn) in enumerate(zip(labels, lengths)):
        if not 1 <= tn <= T:
            raise ValueError(f"utterance {n}: length {tn} outside [1, {T}]")
        need = min_frames(lab)
        if tn < need:
            raise InfeasibleAlignmentError(
                f"utterance {n}: {tn} frames cannot emit {len(lab)} labels (needs {need})"
            )

    S = 2 * max(len(l) for l in labels) + 1
    ext = np.full((N, S), blank, dtype=np.int64)
    s_len = np.empty(N, dtype=np.int64)
    for n, lab in enumerate(labels):
        ext[n, 1:2 * len(lab):2] = lab
        s_len[n] = 2 * len(lab) + 1
    skip = np.zeros((N, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    emit = np.take_along_axis(log_probs, np.broadcast_to(ext[:, None, :], (N, T, S)), axis=2)
    rows = np.arange(N)

    with np.errstate(invalid="ignore"):
        alpha = np.full((N, T, S), NEG_INF)
        alpha[:, 0, 0] = emit[:, 0, 0]
        alpha[:, 0, 1] = emit[:, 0, 1]
        for t in range(1, T):
            prev = alpha[:, t - 1]
            acc = prev.copy()
            acc[:, 1:] = np.logaddexp(acc[:, 1:], prev[:, :-1])
            acc[:, 2:] = np.where(skip[:, 2:], np.logaddexp(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
            alpha[:, t] = acc + emit[:, t]

        last = lengths - 1
        log_p = np.logaddexp(alpha[rows, last, s_len - 1], alpha[rows, last, s_len - 2])

        beta = np.full((N, T, S), NEG_INF)
        init = np.full((N, S), NEG_INF)
        init[rows, s_len - 1] = 0.0
        init[rows, s_len - 2] = 0.0
        nxt = np.full((N, S), NEG_INF)
        for t in range(T - 1, -1, -1):
            acc = nxt.copy()
            acc[:, :-1] = np.logaddexp(acc[:, :-1], nxt[:, 1:])
            acc[:, :-2] = np.where(skip[:, 2:], np.logaddexp(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
            cur = np.where((t == last)[:, None], init, np.where((t < last)[:, None], acc, NEG_INF))
            beta[:, t] = cur + emit[:, t]
            nxt = beta[:, t]

        # occupation probability of extended position s at frame t
        occ = alpha + beta - emit - log_p[:, None, None]
        occ = np.where(np.isfinite(occ), np.exp(occ), 0.0)
    occ *= np.arange(S)[None, None, :] < s_len[:, None, None]
    onehot = np.zeros((N, S, C))
    np.put_along_axis(onehot, ext[:, :, None], 1.0, axis=2)
    grad = -np.einsum("nts,nsc->ntc", occ, onehot)
    grad[np.arange(T)[None, :] >= lengths[:, None]] = 0.0
    return -log_p, grad


def ctc_loss(log_probs, labels):
    """CTC loss for one utterance: ``log_probs`` is ``(T, V+1)``.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``log_probs``.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    losses, grad = ctc_batch(log_probs[None], [labels])
    return float(losses[0]), grad[0]


def ctc_bruteforce(log_probs, labels, budget=10**7) -> float:
    """Reference CTC loss by summing over every length-T path."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, C = log_probs.shape
    if C ** T > budget:
        raise ValueError(f"{C}^{T} paths exceed the enumeration budget {budget}")
    target = tuple(int(x) for x in _check_labels(labels, C))
    blank = C - 1
    total = NEG_INF
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == target:
            total = np.logaddexp(total, log_probs[np.arange(T), path].sum())
    if total == NEG_INF:
        raise InfeasibleAlignmentError(f"no length-{T} path emits {list(target)}")
    return float(-total)


def collapse(path, blank) -> tuple:
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return tuple(out)


def greedy_decode(log_probs, length=None) -> list[int]:
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    log_probs = np.asarray(log_probs)
    if length is not None:
        log_probs = log_probs[:length]
    return list(collapse(np.argmax(log_probs, axis=-1), log_probs.shape[-1] - 1))


def edit_distance(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def label_error_rate(hyp, ref) -> float:
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


def ctc_node(log_probs: G.Node, labels: list, lengths) -> G.Node:
    """Batch-mean CTC loss as a graph node over ``(N, T, C)`` log-posteriors."""
    losses, grad = ctc_batch(log_probs.value, labels, lengths)
    n = len(labels)

    def bw(g):
        return (grad * (g / n),)

    out = G.custom(losses.mean(), (log_probs,), bw, op="ctc")
    out.attrs["per_utterance"] = losses
    return out
