"""Speaker-based multi-task objectives and gradient reversal layers.

Composite losses (``ctc`` is the recognition loss)::

    baseline-ctc         ctc
    spk-enh              ctc + lambda1 * ce(spk1(z_l1))
    spk-adv-standard     ctc + lambda2 * ce(spk2(R(z_l2)))           R reverses with -1
    spk-adv-adaptive     ctc + ce(spk2(R_adapt(z_l2)))               R_adapt reverses with -mean(P2)**beta
    spk-enh-adv-joint    ctc + lambda1 * ce(spk1(z_l1)) + ce(spk2(R_adapt(z_l2)))

``lambda1 = (1 - P1)**beta_focal``.  Both scales are detached constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from .ctc import ctc_node
from .model import BackboneOutput, attention_pool, speaker_posterior

KINDS = ("baseline-ctc", "spk-enh", "spk-adv-standard", "spk-adv-adaptive", "spk-enh-adv-joint")
PROB_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "baseline-ctc"
    l1: int | None = None
    l2: int | None = None
    beta_focal: float = 1.0
    beta_adapt: float = 1.0
    lambda2: float | None = None
    # focal weight per utterance instead of from the batch-mean posterior
    focal_per_utterance: bool = False
    l1_pre_layer_norm: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}; expected one of {KINDS}")
        if self.uses_spk1 and self.l1 is None:
            raise ConfigError(f"{self.kind} requires l1")
        if self.uses_spk2 and self.l2 is None:
            raise ConfigError(f"{self.kind} requires l2")
        if self.l1 is not None and self.l2 is not None and self.uses_spk1 and self.uses_spk2 \
                and not self.l1 < self.l2:
            raise ConfigError(f"l1 ({self.l1}) must be below l2 ({self.l2})")
        if self.beta_focal < 0:
            raise ConfigError("beta_focal must be >= 0")
        if self.beta_adapt <= 0:
            raise ConfigError("beta_adapt must be > 0")
        if self.kind == "spk-adv-standard":
            if self.lambda2 is None or self.lambda2 <= 0:
                raise ConfigError("spk-adv-standard requires lambda2 > 0")

    @property
    def uses_spk1(self):
        return self.kind in ("spk-enh", "spk-enh-adv-joint")

    @property
    def uses_spk2(self):
        return self.kind in ("spk-adv-standard", "spk-adv-adaptive", "spk-enh-adv-joint")

    @property
    def adaptive(self):
        return self.kind in ("spk-adv-adaptive", "spk-enh-adv-joint")

    def check_blocks(self, num_blocks):
        for name in ("l1", "l2"):
            v = getattr(self, name)
            if v is not None and not 1 <= v <= num_blocks:
                raise ConfigError(f"{name}={v} outside [1, {num_blocks}]")


@dataclass
class SpeakerPosterior:
    probs: G.Node       # (N, S)
    targets: np.ndarray

    @property
    def target_prob(self) -> np.ndarray:
        return self.probs.value[np.arange(len(self.targets)), self.targets]


def speaker_ce(posterior: SpeakerPosterior, weights=None) -> G.Node:
    """Batch mean of ``-log P(target)`` with the posterior floored at 1e-12.

    ``weights`` (detached, per utterance) turn it into a weighted mean of the
    per-utterance terms.
    """
    tp = posterior.target_prob
    if not np.all(np.isfinite(tp)) or np.any(tp <= 0.0):
        raise NumericalError("speaker posterior collapsed to 0 or non-finite for a target")
    picked = G.take(posterior.probs, posterior.targets[:, None], axis=1)
    floored = G.custom(np.maximum(picked.value, PROB_FLOOR), (picked,),
                       lambda g: (g * (picked.value >= PROB_FLOOR),), op="floor")
    nll = -G.log(floored)
    if weights is not None:
        nll = nll * np.asarray(weights, dtype=np.float64)[:, None]
    return G.mean(nll)


def focal_scale(p1: float, beta_focal: float = 1.0) -> float:
    """lambda1 = (1 - P1) ** beta_focal."""
    return float((1.0 - p1) ** beta_focal)


def _reversal(z, reverse_scale, op):
    z = G.as_node(z)
    out = G.custom(z.value, (z,), None, op=op, non_derivative=True)
    out.attrs["reverse_scale"] = reverse_scale

    def bw(g):
        lam = out.attrs["reverse_scale"]
        if lam is None:
            raise G.GraphError(f"{out.label()}: reversal scale was never set")
        return (g * -lam,)

    out.backward_fn = bw
    return out


def grl_standard(z, lambda2: float = 1.0) -> G.Node:
    """Identity forward; backward sends ``-lambda2 * g`` to the producers of ``z``.

    The standard objective places this with ``lambda2=1`` and scales the whole
    discriminator loss by its own lambda2, so both sides of the reversal see it.
    """
    if lambda2 <= 0:
        raise ConfigError("lambda2 must be > 0")
    return _reversal(z, float(lambda2), "grl")


def grl_adaptive(z, batch_mean_p2: float | None = None, beta_adapt: float = 1.0) -> G.Node:
    """Identity forward; backward sends ``-(batch_mean_p2 ** beta_adapt) * g`` below.

    The discriminator above receives ``g`` unscaled.  When the posterior is
    not known yet (it is computed above this node) pass ``None`` and call
    :func:`set_adaptive_scale` before backward.
    """
    if beta_adapt <= 0:
        raise ConfigError("beta_adapt must be > 0")
    node = _reversal(z, None, "grl_adaptive")
    node.attrs["beta_adapt"] = float(beta_adapt)
    if batch_mean_p2 is not None:
        set_adaptive_scale(node, batch_mean_p2)
    return node


def set_adaptive_scale(node: G.Node, batch_mean_p2: float) -> float:
    lam = float(batch_mean_p2) ** node.attrs["beta_adapt"]
    node.attrs["reverse_scale"] = lam
    return lam


@dataclass
class Objective:
    total: G.Node
    ctc: G.Node
    spk1: G.Node | None = None
    spk2: G.Node | None = None
    grl: G.Node | None = None
    metrics: dict = field(default_factory=dict)


def assemble_objective(spec: ObjectiveSpec, out: BackboneOutput, nodes: dict, batch) -> Objective:
    """Build the scalar loss for ``spec`` over one batch.

    A single ``backward`` on ``Objective.total`` yields every update,
    including the reversed ones flowing out of the discriminator.
    """
    spec.check_blocks(len(out.post_ln))
    ctc = ctc_node(out.log_probs, batch.labels, batch.lengths)
    metrics = {"ctc": float(ctc.value)}
    total = ctc
    obj = Objective(total, ctc, metrics=metrics)

    for prefix in (["spk1"] if spec.uses_spk1 else []) + (["spk2"] if spec.uses_spk2 else []):
        missing = [k for k in (f"{prefix}.out.weight", f"{prefix}.attn.hidden.weight") if k not in nodes]
        if missing:
            raise ConfigError(f"{spec.kind} needs classifier {prefix}; missing {missing}")

    if spec.uses_spk1:
        z1 = out.tap(spec.l1, pre_layer_norm=spec.l1_pre_layer_norm)
        pooled, _ = attention_pool(z1, nodes, "spk1", batch.mask)
        post = SpeakerPosterior(speaker_posterior(pooled, nodes, "spk1"), batch.speakers)
        tp = post.target_prob
        if spec.focal_per_utterance:
            w = (1.0 - tp) ** spec.beta_focal
            spk1 = speaker_ce(post, weights=w)
            lam1 = float(w.mean())
            term = spk1
        else:
            lam1 = focal_scale(float(tp.mean()), spec.beta_focal)
            spk1 = speaker_ce(post)
            term = G.scale(spk1, lam1)
        total = total + term
        obj.spk1 = spk1
        metrics.update(spk1=float(spk1.value), lambda1=lam1, p1=float(tp.mean()))

    if spec.uses_spk2:
        z2 = out.tap(spec.l2)
        grl = grl_adaptive(z2, None, spec.beta_adapt) if spec.adaptive else grl_standard(z2, 1.0)
        pooled, _ = attention_pool(grl, nodes, "spk2", batch.mask)
        post = SpeakerPosterior(speaker_posterior(pooled, nodes, "spk2"), batch.speakers)
        spk2 = speaker_ce(post)
        p2 = float(post.target_prob.mean())
        if spec.adaptive:
            metrics["lambda_adapt"] = set_adaptive_scale(grl, p2)
            total = total + spk2
        else:
            metrics["lambda2"] = float(spec.lambda2)
            total = total + G.scale(spk2, spec.lambda2)
        obj.spk2, obj.grl = spk2, grl
        metrics.update(spk2=float(spk2.value), p2=p2)

    obj.total = total
    metrics["total"] = float(total.value)
    return obj
