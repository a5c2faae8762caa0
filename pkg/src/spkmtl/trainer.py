"""Training loops for every objective, continue-training and the sequential pipeline."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import graph as G
from .ctc import InfeasibleAlignmentError, greedy_decode, label_error_rate
from .data import batch_iterator
from .model import (BackboneConfig, SpeakerClassifierConfig, as_nodes, backbone_forward,
                    classify, init_backbone, init_classifier)
from .objectives import ConfigError, NumericalError, ObjectiveSpec, assemble_objective
from .tensorio import ParamStore, load_checkpoint, read_tensors, save_checkpoint, write_tensors

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    epochs: int = 15
    batch_size: int = 32
    peak_lr: float = 1e-3
    constant_fraction: float = 0.5
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = 5.0
    # LR multiplier for the adversarial discriminator (spk2) so it keeps pace
    discriminator_lr_scale: float = 20.0
    seed: int = 0
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be > 0")
        if not 0 <= self.constant_fraction <= 1:
            raise ConfigError("constant_fraction must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.discriminator_lr_scale <= 0:
            raise ConfigError("discriminator_lr_scale must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Constant peak LR, then a linear ramp that would reach 0 at ``total_steps``."""
    n_const = int(np.floor(cfg.constant_fraction * total_steps))
    if step < n_const:
        return cfg.peak_lr
    return cfg.peak_lr * (total_steps - step) / (total_steps - n_const)


class Optimizer:
    """Adam or plain SGD over a ParamStore, updating in place."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamStore, grads: dict, lr: float):
        self.t += 1
        c = self.cfg
        for name, g in grads.items():
            lr_k = lr * c.discriminator_lr_scale if name.startswith("spk2.") else lr
            if c.optimizer == "sgd":
                params.entries[name] = params.entries[name] - lr_k * g
                continue
            m = self.m.get(name, 0.0) * c.adam_beta1 + (1 - c.adam_beta1) * g
            v = self.v.get(name, 0.0) * c.adam_beta2 + (1 - c.adam_beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - c.adam_beta1 ** self.t)
            vhat = v / (1 - c.adam_beta2 ** self.t)
            params.entries[name] = params.entries[name] - lr_k * mhat / (np.sqrt(vhat) + c.adam_eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(float(self.t))}
        out.update({f"m.{k}": v for k, v in self.m.items()})
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, state: dict):
        self.t = int(np.asarray(state["step"]).item())
        self.m = {k[2:]: v for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: v for k, v in state.items() if k.startswith("v.")}


def clip_gradients(grads: dict, max_norm: float | None):
    """Scale all gradients by one common factor so the global norm is <= max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    f = max_norm / norm
    return {k: g * f for k, g in grads.items()}, norm


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def series(self, key):
        return np.array([r.get(key, np.nan) for r in self.steps])

    def records(self):
        out = [dict(r, type="step") for r in self.steps] + [dict(r, type="eval") for r in self.evals]
        return sorted(out, key=lambda r: (r["step"], r["type"] == "eval"))

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records():
                fh.write(json.dumps(dict(r, schema_version=SCHEMA_VERSION), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        lg = cls()
        with open(path) as fh:
            for line in fh:
                r = json.loads(line)
                kind = r.pop("type")
                r.pop("schema_version", None)
                (lg.steps if kind == "step" else lg.evals).append(r)
        return lg


def ensure_classifiers(params: ParamStore, spec: ObjectiveSpec, model_cfg: BackboneConfig,
                       clf_cfg: SpeakerClassifierConfig, seed: int):
    """Create missing classifiers from scratch."""
    for prefix, needed in (("spk1", spec.uses_spk1), ("spk2", spec.uses_spk2)):
        if needed and not params.names(prefix + "."):
            params.update(init_classifier(prefix, model_cfg.model_dim, clf_cfg, seed))


def evaluate(params: ParamStore, dataset, model_cfg: BackboneConfig, batch_size=64) -> dict:
    """Greedy-decode label error rate over ``dataset``."""
    return {"ler": _decode(params, dataset, model_cfg, batch_size)[1]}


def _decode(params, dataset, model_cfg, batch_size=64):
    nodes = {k: G.constant(v, name=k) for k, v in params.entries.items()}
    hyps, errs, ref_len = {}, 0, 0
    for batch in batch_iterator(dataset, batch_size):
        out = backbone_forward(nodes, batch.features, model_cfg.num_blocks)
        for n in range(len(batch)):
            hyp = greedy_decode(out.log_probs.value[n], batch.lengths[n])
            hyps[batch.uids[n]] = hyp
            errs += label_error_rate(hyp, batch.labels[n]) * len(batch.labels[n])
            ref_len += len(batch.labels[n])
    return hyps, errs / ref_len


def evaluate_speaker(params: ParamStore, dataset, model_cfg, spec: ObjectiveSpec, batch_size=64):
    nodes = {k: G.constant(v, name=k) for k, v in params.entries.items()}
    out_metrics = {}
    taps = []
    if spec.uses_spk1:
        taps.append(("spk1", spec.l1, spec.l1_pre_layer_norm))
    if spec.uses_spk2:
        taps.append(("spk2", spec.l2, False))
    if not taps:
        return out_metrics
    sums = {p: [0.0, 0] for p, _, _ in taps}
    for batch in batch_iterator(dataset, batch_size):
        out = backbone_forward(nodes, batch.features, model_cfg.num_blocks,
                               upto=max(b for _, b, _ in taps))
        for prefix, block, pre in taps:
            probs = classify(out.tap(block, pre), nodes, prefix, batch.mask).value
            tp = probs[np.arange(len(batch)), batch.speakers]
            sums[prefix][0] += float(-np.log(np.maximum(tp, 1e-12)).sum())
            sums[prefix][1] += len(batch)
    for prefix, (s, n) in sums.items():
        out_metrics[f"eval_{prefix}_ce"] = s / n
    return out_metrics


def train(cfg: TrainConfig, train_set, eval_set, model_cfg: BackboneConfig,
          clf_cfg: SpeakerClassifierConfig, params: ParamStore | None = None,
          out_dir=None, start_epoch=0, optimizer_state=None, log_obj: TrainLog | None = None,
          eval_every=1):
    """Run ``cfg.epochs`` epochs and return ``(params, TrainLog)``.

    ``params`` is modified in a copy.  A fresh backbone is initialised from
    ``cfg.seed`` when none is given; absent classifiers are created from
    scratch.  With ``out_dir`` a checkpoint (plus optimizer state) is written
    after each epoch together with ``train_log.jsonl`` and ``best`` pointing
    at the epoch with the lowest eval label error rate.
    """
    spec = cfg.objective
    spec.check_blocks(model_cfg.num_blocks)
    params = init_backbone(model_cfg, cfg.seed) if params is None else params.copy()
    ensure_classifiers(params, spec, model_cfg, clf_cfg, cfg.seed)
    prefixes = ["backbone."] + (["spk1."] if spec.uses_spk1 else []) + (["spk2."] if spec.uses_spk2 else [])

    opt = Optimizer(cfg)
    if optimizer_state is not None:
        opt.load_state(optimizer_state)
    lg = TrainLog() if log_obj is None else log_obj
    steps_per_epoch = -(-len(train_set) // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step = start_epoch * steps_per_epoch
    best = (np.inf, None)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(start_epoch, cfg.epochs):
        for batch in batch_iterator(train_set, cfg.batch_size, cfg.seed, epoch):
            lr = lr_at(step, total, cfg)
            nodes = as_nodes(params, prefixes)
            out = backbone_forward(nodes, batch.features, model_cfg.num_blocks)
            try:
                obj = assemble_objective(spec, out, nodes, batch)
            except InfeasibleAlignmentError as exc:
                log.warning("step %d: skipping infeasible batch (%s)", step, exc)
                step += 1
                continue
            for key, val in obj.metrics.items():
                if not np.isfinite(val):
                    raise NumericalError(f"step {step}: {key} is {val}")
            grads = G.backward(obj.total)
            grads, gnorm = clip_gradients(grads, cfg.grad_clip_norm)
            if not np.isfinite(gnorm):
                raise NumericalError(f"step {step}: non-finite gradient norm")
            opt.step(params, grads, lr)
            lg.steps.append({"step": step, "epoch": epoch, "lr": lr, "grad_norm": gnorm, **obj.metrics})
            step += 1
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            rec = {"step": step, "epoch": epoch}
            rec.update(evaluate(params, eval_set, model_cfg))
            rec.update(evaluate_speaker(params, eval_set, model_cfg, spec))
            lg.evals.append(rec)
            if rec["ler"] < best[0]:
                best = (rec["ler"], epoch)
        if out_dir is not None:
            save_checkpoint(params, os.path.join(out_dir, f"epoch{epoch + 1:03d}.ckpt"))
            write_tensors(os.path.join(out_dir, f"epoch{epoch + 1:03d}.optim"), opt.state())
            lg.write_jsonl(os.path.join(out_dir, "train_log.jsonl"))
            if best[1] is not None:
                with open(os.path.join(out_dir, "best"), "w") as fh:
                    fh.write(f"epoch{best[1] + 1:03d}.ckpt\n")
    if out_dir is not None:
        save_checkpoint(params, os.path.join(out_dir, "final.ckpt"))
    return params, lg


def resume(cfg: TrainConfig, out_dir, epoch: int, train_set, eval_set, model_cfg, clf_cfg):
    """Continue an interrupted run from the checkpoint written after ``epoch`` epochs."""
    params = load_checkpoint(os.path.join(out_dir, f"epoch{epoch:03d}.ckpt"))
    state = read_tensors(os.path.join(out_dir, f"epoch{epoch:03d}.optim"))
    return train(cfg, train_set, eval_set, model_cfg, clf_cfg, params=params,
                 start_epoch=epoch, optimizer_state=state)


def check_backbone(params: ParamStore, model_cfg: BackboneConfig):
    """Raise if the backbone tensors differ from what ``model_cfg`` expects.

    Returns names in ``params`` outside every known partition.
    """
    expected = init_backbone(model_cfg, 0)
    problems = []
    for name, arr in expected.entries.items():
        if name not in params:
            problems.append(f"{name}: missing")
        elif params[name].shape != arr.shape:
            problems.append(f"{name}: shape {params[name].shape}, expected {arr.shape}")
    for name in params.names("backbone."):
        if name not in expected:
            problems.append(f"{name}: unexpected backbone tensor")
    if problems:
        raise ConfigError("checkpoint does not match backbone config:\n  " + "\n  ".join(problems))
    return [k for k in params if not k.startswith(("backbone.", "spk1.", "spk2.", "probe."))]


def continue_train(seed_params: ParamStore, cfg: TrainConfig, train_set, eval_set,
                   model_cfg, clf_cfg, out_dir=None, **kw):
    """Load the seed backbone, restart the LR schedule and train fresh classifiers."""
    unknown = check_backbone(seed_params, model_cfg)
    if unknown:
        log.warning("ignoring unknown tensors in seed checkpoint: %s", ", ".join(unknown))
    params = seed_params.subset("backbone.")
    return train(cfg, train_set, eval_set, model_cfg, clf_cfg, params=params, out_dir=out_dir, **kw)


def sequential_enh_then_adv(seed_params: ParamStore, l1: int, l2: int, stage1: TrainConfig,
                            stage2: TrainConfig, train_set, eval_set, model_cfg, clf_cfg,
                            out_dir=None, stage1_result=None, **kw):
    """Speaker-enhancing training at ``l1``, then adaptive adversarial fine-tuning at ``l2``.

    Stage 2 starts from the stage-1 backbone with a reset LR schedule; the
    enhancing classifier is dropped.  ``stage1_result=(params, log)`` reuses
    an already finished stage 1 instead of training it again.
    """
    if not l1 < l2:
        raise ConfigError(f"l1 ({l1}) must be below l2 ({l2})")
    s1 = replace(stage1, objective=replace(stage1.objective, kind="spk-enh", l1=l1, l2=None))
    s2 = replace(stage2, objective=replace(stage2.objective, kind="spk-adv-adaptive", l1=None, l2=l2))
    d1 = d2 = None
    if out_dir is not None:
        d1, d2 = os.path.join(out_dir, "stage1"), os.path.join(out_dir, "stage2")
    if stage1_result is None:
        p1, log1 = continue_train(seed_params, s1, train_set, eval_set, model_cfg, clf_cfg,
                                  out_dir=d1, **kw)
    else:
        p1, log1 = stage1_result
    p2, log2 = continue_train(p1, s2, train_set, eval_set, model_cfg, clf_cfg, out_dir=d2, **kw)
    return p2, log1, log2


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def decode_dataset(params: ParamStore, dataset, model_cfg: BackboneConfig):
    """Greedy hypotheses and the corpus-level label error rate."""
    hyps, ler = _decode(params, dataset, model_cfg)
    return [hyps[u.uid] for u in dataset], ler
