"""Tappable feed-forward block stack and the attention-pooling speaker classifier.

Parameter names::

    backbone.input.{weight,bias}
    backbone.block{K}.ff1.{weight,bias}, .ff2.{weight,bias}, .ln.{gain,bias}   K = 1..B
    backbone.output.{weight,bias}
    {prefix}.attn.hidden.{weight,bias}, {prefix}.attn.score.weight, {prefix}.out.{weight,bias}

where ``prefix`` is ``spk1``, ``spk2`` or ``probe.block{K}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import graph as G
from .tensorio import ParamStore

LN_EPS = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 8
    model_dim: int = 64
    ff_dim: int = 128
    input_dim: int = 16
    vocab: int = 10

    def __post_init__(self):
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2")
        for name in ("model_dim", "ff_dim", "input_dim", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def num_classes(self):
        return self.vocab + 1


@dataclass(frozen=True)
class SpeakerClassifierConfig:
    attn_hidden: int = 64
    num_speakers: int = 20


@dataclass(frozen=True)
class TapPoint:
    block: int
    pre_layer_norm: bool = False


def infer_backbone_config(params: ParamStore) -> BackboneConfig:
    """Recover the architecture from tensor shapes of a saved backbone."""
    try:
        input_dim, d = params["backbone.input.weight"].shape
        ff = params["backbone.block1.ff1.weight"].shape[1]
        classes = params["backbone.output.weight"].shape[1]
    except KeyError as exc:
        raise ValueError(f"checkpoint has no backbone tensor {exc}") from None
    blocks = 0
    while f"backbone.block{blocks + 1}.ff1.weight" in params:
        blocks += 1
    return BackboneConfig(blocks, d, ff, input_dim, classes - 1)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(cfg: BackboneConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng([seed, 101])
    d, f = cfg.model_dim, cfg.ff_dim
    p = ParamStore(rng_seed=seed)
    p["backbone.input.weight"] = _uniform(rng, cfg.input_dim, (cfg.input_dim, d))
    p["backbone.input.bias"] = np.zeros(d)
    for k in range(1, cfg.num_blocks + 1):
        b = f"backbone.block{k}"
        p[f"{b}.ff1.weight"] = _uniform(rng, d, (d, f))
        p[f"{b}.ff1.bias"] = np.zeros(f)
        p[f"{b}.ff2.weight"] = _uniform(rng, f, (f, d))
        p[f"{b}.ff2.bias"] = np.zeros(d)
        p[f"{b}.ln.gain"] = np.ones(d)
        p[f"{b}.ln.bias"] = np.zeros(d)
    p["backbone.output.weight"] = _uniform(rng, d, (d, cfg.num_classes))
    p["backbone.output.bias"] = np.zeros(cfg.num_classes)
    return p


def init_classifier(prefix: str, model_dim: int, cfg: SpeakerClassifierConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng([seed, sum(prefix.encode())])
    h = cfg.attn_hidden
    p = ParamStore(rng_seed=seed)
    p[f"{prefix}.attn.hidden.weight"] = _uniform(rng, model_dim, (model_dim, h))
    p[f"{prefix}.attn.hidden.bias"] = np.zeros(h)
    p[f"{prefix}.attn.score.weight"] = _uniform(rng, h, (h,))
    p[f"{prefix}.out.weight"] = _uniform(rng, model_dim, (model_dim, cfg.num_speakers))
    p[f"{prefix}.out.bias"] = np.zeros(cfg.num_speakers)
    return p


def as_nodes(params: ParamStore, prefixes=("",)) -> dict[str, G.Node]:
    return {k: G.param(v, name=k) for k, v in params.entries.items()
            if any(k.startswith(pre) for pre in prefixes)}


@dataclass
class BackboneOutput:
    inputs: G.Node
    pre_ln: list     # pre_ln[k-1]: block k residual sum before layer norm
    post_ln: list    # post_ln[k-1]: block k output
    log_probs: G.Node

    def tap(self, block: int, pre_layer_norm=False) -> G.Node:
        """Activation at ``block`` (1-based); block 0 is the raw input features."""
        if block == 0:
            return self.inputs
        if not 1 <= block <= len(self.post_ln):
            raise ValueError(f"tap block {block} outside [0, {len(self.post_ln)}]")
        return (self.pre_ln if pre_layer_norm else self.post_ln)[block - 1]


def block_forward(h: G.Node, nodes, k: int):
    b = f"backbone.block{k}"
    u = G.tanh(h @ nodes[f"{b}.ff1.weight"] + nodes[f"{b}.ff1.bias"])
    pre = h + (u @ nodes[f"{b}.ff2.weight"] + nodes[f"{b}.ff2.bias"])
    post = G.layer_norm(pre, nodes[f"{b}.ln.gain"], nodes[f"{b}.ln.bias"], LN_EPS)
    return pre, post


def backbone_forward(nodes: dict, features, num_blocks: int, upto: int | None = None) -> BackboneOutput:
    """Run the block stack on ``(N, T, F)`` features.

    With ``upto`` only blocks ``1..upto`` are evaluated and ``log_probs`` is
    None (used by probing, which never needs the output layer).
    """
    x = G.as_node(features)
    h = x @ nodes["backbone.input.weight"] + nodes["backbone.input.bias"]
    pre_ln, post_ln = [], []
    for k in range(1, (num_blocks if upto is None else upto) + 1):
        pre, h = block_forward(h, nodes, k)
        pre_ln.append(pre)
        post_ln.append(h)
    log_probs = None
    if upto is None:
        logits = h @ nodes["backbone.output.weight"] + nodes["backbone.output.bias"]
        log_probs = G.log_softmax(logits, axis=-1)
    return BackboneOutput(x, pre_ln, post_ln, log_probs)


def attention_pool(frames, nodes, prefix: str, mask=None):
    """MLP attention pooling over time.

    ``frames`` is ``(N, T, d)``; padded frames (``mask`` False) get zero
    weight.  Returns ``(pooled (N, d), weights (N, T))``.
    """
    frames = G.as_node(frames)
    hidden = G.tanh(frames @ nodes[f"{prefix}.attn.hidden.weight"]
                    + nodes[f"{prefix}.attn.hidden.bias"])
    scores = hidden @ nodes[f"{prefix}.attn.score.weight"]
    weights = G.softmax(scores, axis=-1, mask=mask)
    pooled = G.sum(G.reshape(weights, weights.shape + (1,)) * frames, axis=1)
    return pooled, weights


def speaker_logits(pooled, nodes, prefix: str):
    return pooled @ nodes[f"{prefix}.out.weight"] + nodes[f"{prefix}.out.bias"]


def speaker_posterior(pooled, nodes, prefix: str):
    """``(N, S)`` softmax posterior over speakers."""
    return G.softmax(speaker_logits(pooled, nodes, prefix), axis=-1)


def classify(frames, nodes, prefix, mask=None):
    pooled, _ = attention_pool(frames, nodes, prefix, mask)
    return speaker_posterior(pooled, nodes, prefix)
