"""Layer-wise speaker-identification probing of a frozen backbone."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from .data import batch_iterator, make_batch
from .model import (BackboneConfig, SpeakerClassifierConfig, as_nodes, backbone_forward,
                    classify, init_classifier)
from .tensorio import ParamStore


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-3
    attn_hidden: int = 64
    eval_fraction: float = 0.05
    split_seed: int = 0
    probe_seed: int = 0
    pre_layer_norm: bool = False


@dataclass
class BlockResult:
    block: int
    eval_acc: float
    train_acc: float
    epochs: int
    n_eval: int


@dataclass
class ProbeReport:
    model_id: str
    num_speakers: int
    blocks: list = field(default_factory=list)
    split_seed: int = 0
    probe_seed: int = 0
    eval_fraction: float = 0.05

    @property
    def eval_acc(self) -> np.ndarray:
        return np.array([b.eval_acc for b in self.blocks])

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ProbeReport":
        with open(path) as fh:
            raw = json.load(fh)
        raw["blocks"] = [BlockResult(**b) for b in raw["blocks"]]
        return cls(**raw)


def block_features(params: ParamStore, dataset, model_cfg: BackboneConfig, block: int,
                   pre_layer_norm=False, batch_size=64):
    """Padded activations of ``block`` for every utterance (block 0 = raw features)."""
    nodes = {k: G.constant(v) for k, v in params.entries.items() if k.startswith("backbone.")}
    T = max(u.num_frames for u in dataset)
    dim = dataset[0].features.shape[1] if block == 0 else model_cfg.model_dim
    feats = np.zeros((len(dataset), T, dim))
    pos = 0
    for batch in batch_iterator(dataset, batch_size):
        if block == 0:
            z = batch.features
        else:
            z = backbone_forward(nodes, batch.features, model_cfg.num_blocks, upto=block) \
                .tap(block, pre_layer_norm).value
        feats[pos:pos + len(batch), :z.shape[1]] = z
        pos += len(batch)
    lengths = np.array([u.num_frames for u in dataset])
    mask = np.arange(T)[None, :] < lengths[:, None]
    return feats, mask


def _accuracy(params, prefix, feats, mask, speakers, batch_size=256):
    nodes = {k: G.constant(v) for k, v in params.entries.items()}
    hits = 0
    for s in range(0, len(feats), batch_size):
        probs = classify(feats[s:s + batch_size], nodes, prefix, mask[s:s + batch_size]).value
        hits += int(np.sum(np.argmax(probs, axis=1) == speakers[s:s + batch_size]))
    return hits / len(feats)


def train_probe(train_feats, train_mask, train_spk, num_speakers, cfg: ProbeConfig, prefix="probe"):
    """Fit an attention-pool + softmax classifier on fixed features with Adam."""
    clf_cfg = SpeakerClassifierConfig(cfg.attn_hidden, num_speakers)
    params = init_classifier(prefix, train_feats.shape[-1], clf_cfg, cfg.probe_seed)
    m = {k: np.zeros_like(v) for k, v in params.entries.items()}
    v = {k: np.zeros_like(x) for k, x in params.entries.items()}
    n = len(train_feats)
    steps_per_epoch = -(-n // cfg.batch_size)
    total, t = steps_per_epoch * cfg.epochs, 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.probe_seed, epoch]).permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            nodes = as_nodes(params)
            probs = classify(train_feats[idx], nodes, prefix, train_mask[idx])
            picked = G.take(probs, train_spk[idx][:, None], axis=1)
            loss = G.mean(-G.log(picked))
            grads = G.backward(loss)
            t += 1
            lr = cfg.lr * min(1.0, 2.0 * (total - t + 1) / total)
            for k, g in grads.items():
                m[k] = 0.9 * m[k] + 0.1 * g
                v[k] = 0.999 * v[k] + 0.001 * g * g
                params.entries[k] = params.entries[k] - lr * (m[k] / (1 - 0.9 ** t)) / (
                    np.sqrt(v[k] / (1 - 0.999 ** t)) + 1e-8)
    return params


def probe_block(params: ParamStore, block: int, train, held, model_cfg: BackboneConfig,
                cfg: ProbeConfig, num_speakers: int):
    """Train a fresh probe on ``block``'s output; return ``(train_acc, eval_acc)``.

    The backbone is only read; its checksum is verified unchanged.
    """
    seen = {u.speaker for u in train}
    unseen = sorted({u.speaker for u in held} - seen)
    if unseen:
        raise ProbeError(f"eval split contains speakers absent from training: {unseen}")
    before = params.checksum("backbone.")
    ftr, mtr = block_features(params, train, model_cfg, block, cfg.pre_layer_norm)
    fev, mev = block_features(params, held, model_cfg, block, cfg.pre_layer_norm)
    ytr = np.array([u.speaker for u in train])
    yev = np.array([u.speaker for u in held])
    prefix = f"probe.block{block}"
    probe = train_probe(ftr, mtr, ytr, num_speakers, cfg, prefix)
    if params.checksum("backbone.") != before:
        raise ProbeError("backbone changed during probing")
    return _accuracy(probe, prefix, ftr, mtr, ytr), _accuracy(probe, prefix, fev, mev, yev)


def probe_all_blocks(params: ParamStore, train, held, model_cfg: BackboneConfig,
                     cfg: ProbeConfig, num_speakers: int, model_id="model", blocks=None):
    report = ProbeReport(model_id, num_speakers, split_seed=cfg.split_seed,
                         probe_seed=cfg.probe_seed, eval_fraction=cfg.eval_fraction)
    for b in (range(1, model_cfg.num_blocks + 1) if blocks is None else blocks):
        tr_acc, ev_acc = probe_block(params, b, train, held, model_cfg, cfg, num_speakers)
        report.blocks.append(BlockResult(b, ev_acc, tr_acc, cfg.epochs, len(held)))
    return report


def binomial_sigma(p_a, p_b, n_a, n_b) -> float:
    """Standard error of the difference of two independent accuracies."""
    var = p_a * (1 - p_a) / n_a + p_b * (1 - p_b) / n_b
    return math.sqrt(max(var, 0.25 / max(n_a, n_b) ** 2))


@dataclass
class Comparison:
    blocks: list
    deltas: np.ndarray
    sigmas: np.ndarray
    significant: np.ndarray

    def summary(self) -> str:
        ups = [b for b, d, s in zip(self.blocks, self.deltas, self.significant) if s and d > 0]
        downs = [b for b, d, s in zip(self.blocks, self.deltas, self.significant) if s and d < 0]
        return f"significant gains at blocks {ups}, drops at blocks {downs}"


def compare_reports(a: ProbeReport, b: ProbeReport, n_sigma=3.0) -> Comparison:
    """Per-block ``b - a`` eval accuracy deltas, flagged beyond ``n_sigma`` binomial sigma."""
    if len(a.blocks) != len(b.blocks) or [x.block for x in a.blocks] != [x.block for x in b.blocks]:
        raise ProbeError("reports cover different blocks")
    if (a.split_seed, a.eval_fraction) != (b.split_seed, b.eval_fraction):
        raise ProbeError("reports were computed on different splits")
    deltas, sigmas = [], []
    for x, y in zip(a.blocks, b.blocks):
        deltas.append(y.eval_acc - x.eval_acc)
        sigmas.append(binomial_sigma(x.eval_acc, y.eval_acc, x.n_eval, y.n_eval))
    deltas, sigmas = np.array(deltas), np.array(sigmas)
    sig = np.abs(deltas) > n_sigma * sigmas
    sig &= deltas != 0
    return Comparison([x.block for x in a.blocks], deltas, sigmas, sig)
