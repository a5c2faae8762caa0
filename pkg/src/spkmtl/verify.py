"""Self-contained oracle suite: CTC enumeration, finite differences, reversal identities, checkpoints."""

from __future__ import annotations

import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import graph as G
from .ctc import ctc_bruteforce, ctc_loss, ctc_node
from .data import CorpusConfig, generate_corpus, make_batch
from .model import (BackboneConfig, SpeakerClassifierConfig, as_nodes, attention_pool,
                    backbone_forward, classify, init_backbone, speaker_posterior)
from .objectives import ObjectiveSpec, SpeakerPosterior, grl_adaptive, grl_standard, speaker_ce
from .tensorio import load_checkpoint, save_checkpoint
from .trainer import ensure_classifiers

_CORPUS = CorpusConfig(num_speakers=3, utts_per_speaker=4, content_vocab=3, seq_len_min=5,
                       seq_len_max=8, frames_per_symbol_min=1, frames_per_symbol_max=3,
                       input_dim=4, seed=7)
_MODEL = BackboneConfig(num_blocks=3, model_dim=6, ff_dim=8, input_dim=4, vocab=3)
_CLF = SpeakerClassifierConfig(attn_hidden=5, num_speakers=3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.1f}s)"


def random_ctc_instance(rng, max_t=6, max_label=3, max_vocab=3):
    vocab = int(rng.integers(1, max_vocab + 1))
    while True:
        t = int(rng.integers(1, max_t + 1))
        labels = [int(s) for s in rng.integers(0, vocab, size=int(rng.integers(1, max_label + 1)))]
        need = len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))
        if need <= t:
            break
    logits = rng.normal(scale=2.0, size=(t, vocab + 1))
    lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    return lp, labels


def check_ctc_oracle(n=200, seed=0, tol=1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        lp, labels = random_ctc_instance(rng)
        worst = max(worst, abs(ctc_loss(lp, labels)[0] - ctc_bruteforce(lp, labels)))
    return CheckResult("ctc-oracle", worst <= tol, f"{n} instances, max |dp - enum| = {worst:.2e}")


def check_ctc_gradient(n=20, seed=1, tol=1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        lp, labels = random_ctc_instance(rng)
        fn = lambda p: ctc_node(G.reshape(p["lp"], (1,) + lp.shape), [labels],  # noqa: E731
                                np.array([len(lp)]))
        rep = G.finite_diff_check(fn, {"lp": lp}, eps=1e-5, tolerance=tol)
        worst = max(worst, rep.worst)
    return CheckResult("ctc-gradient", worst <= tol, f"max relative error {worst:.2e}")


def _setup(spec, seed=0):
    params = init_backbone(_MODEL, seed)
    ensure_classifiers(params, spec, _MODEL, _CLF, seed)
    return params, make_batch(generate_corpus(_CORPUS)[:6])


def check_model_gradient(tol=1e-4, max_elements=8) -> CheckResult:
    """Every parameter group of backbone + pooled classifier + CTC, without reversal."""
    params, batch = _setup(ObjectiveSpec("spk-enh", l1=2), seed=2)

    def fn(p):
        out = backbone_forward(p, batch.features, _MODEL.num_blocks)
        pooled, _ = attention_pool(out.tap(2, pre_layer_norm=True), p, "spk1", batch.mask)
        ce = speaker_ce(SpeakerPosterior(speaker_posterior(pooled, p, "spk1"), batch.speakers))
        return ctc_node(out.log_probs, batch.labels, batch.lengths) + G.scale(ce, 0.7)

    rep = G.finite_diff_check(fn, params.entries, eps=1e-5, tolerance=tol, max_elements=max_elements,
                              rng=np.random.default_rng(0))
    name, err = max(rep.max_rel_error.items(), key=lambda kv: kv[1])
    return CheckResult("model-gradient", rep.passed,
                       f"{len(rep.max_rel_error)} groups, worst {err:.2e} at {name}")


def discriminator_grads(params, batch, reversal, tap=2):
    """Gradients of the discriminator loss alone with ``reversal`` applied at the tap."""
    nodes = as_nodes(params)
    out = backbone_forward(nodes, batch.features, _MODEL.num_blocks)
    probs = classify(reversal(out.tap(tap)), nodes, "spk2", batch.mask)
    return G.backward(speaker_ce(SpeakerPosterior(probs, batch.speakers)))


def _below(name, tap):
    return name.startswith("backbone.input") or any(
        name.startswith(f"backbone.block{k}.") for k in range(1, tap + 1))


def check_grl_identities(p2=0.3, beta=0.7) -> CheckResult:
    params, batch = _setup(ObjectiveSpec("spk-adv-adaptive", l2=2), seed=3)
    plain = discriminator_grads(params, batch, G.identity)
    std = discriminator_grads(params, batch, lambda z: grl_standard(z, 1.0))
    ada = discriminator_grads(params, batch, lambda z: grl_adaptive(z, p2, beta))
    lam = p2 ** beta
    problems = []
    for name, g in plain.items():
        if name.startswith("spk2."):
            if std[name].tobytes() != g.tobytes() or ada[name].tobytes() != g.tobytes():
                problems.append(f"{name}: discriminator gradient altered")
        elif _below(name, 2):
            if not np.any(g):
                problems.append(f"{name}: no gradient reached")
            if std[name].tobytes() != (-g).tobytes():
                problems.append(f"{name}: standard reversal is not exact negation")
            if not np.allclose(ada[name], -lam * g, rtol=1e-12, atol=1e-12 * np.abs(g).max()):
                problems.append(f"{name}: adaptive reversal is not -P2^beta times plain")
    ok = not problems
    return CheckResult("grl-identities", ok, "exact" if ok else "; ".join(problems[:3]))


def check_checkpoint_round_trip() -> CheckResult:
    params, _ = _setup(ObjectiveSpec("spk-enh-adv-joint", l1=1, l2=2), seed=4)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.ckpt")
        save_checkpoint(params, path)
        back = load_checkpoint(path)
    ok = list(back) == list(params) and all(
        back[k].shape == params[k].shape and back[k].tobytes() == params[k].tobytes() for k in params)
    return CheckResult("checkpoint-round-trip", ok, f"{len(params)} tensors bit-exact" if ok else "mismatch")


CHECKS = (check_ctc_oracle, check_ctc_gradient, check_model_gradient, check_grl_identities,
          check_checkpoint_round_trip)


def run_all() -> list[CheckResult]:
    results = []
    for check in CHECKS:
        t = time.perf_counter()
        try:
            res = check()
        except Exception as exc:  # a crash is a failed check, not a crashed suite
            res = CheckResult(check.__name__.removeprefix("check_").replace("_", "-"), False,
                              f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t
        results.append(res)
    return results
