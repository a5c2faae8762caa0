"""End-to-end protocol: seed model, continue-trained variants and probe comparisons.

Every variant starts from the same seed CTC model and is continue-trained
with a restarted schedule, so probe differences are attributable to the
auxiliary objective alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, save_config
from .data import generate_corpus, split
from .objectives import ObjectiveSpec
from .probe import ProbeReport, probe_all_blocks
from .tensorio import ParamStore, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainLog, continue_train, sequential_enh_then_adv, train


@dataclass
class Data:
    corpus: list
    train: list
    held: list
    probe_train: list
    probe_held: list


@dataclass
class RunResult:
    name: str
    params: ParamStore
    log: TrainLog
    ler: float
    probe: ProbeReport | None = None


def prepare(cfg: ExperimentConfig) -> Data:
    """Generate the corpus and both splits (training/eval and probe train/eval)."""
    corpus = generate_corpus(cfg.corpus)
    train_set, held = split(corpus, cfg.experiment.eval_fraction, cfg.experiment.split_seed)
    ptr, pev = split(corpus, cfg.probe.eval_fraction, cfg.probe.split_seed)
    return Data(corpus, train_set, held, ptr, pev)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment with training, probe and split seeds derived from ``seed``."""
    return replace(cfg, train=replace(cfg.train, seed=seed),
                   probe=replace(cfg.probe, probe_seed=seed, split_seed=cfg.probe.split_seed + seed),
                   experiment=replace(cfg.experiment, split_seed=cfg.experiment.split_seed + seed))


def seed_model(cfg: ExperimentConfig, data: Data, cache_dir=None) -> ParamStore:
    """CTC-only model trained from scratch; cached as ``seed.ckpt`` under ``cache_dir``."""
    path = os.path.join(cache_dir, "seed.ckpt") if cache_dir else None
    if path and os.path.exists(path):
        return load_checkpoint(path)
    tcfg = replace(cfg.train, objective=ObjectiveSpec(), epochs=cfg.experiment.seed_epochs)
    params, _ = train(tcfg, data.train, data.held, cfg.model, cfg.classifier, eval_every=0)
    if path:
        os.makedirs(cache_dir, exist_ok=True)
        save_checkpoint(params, path)
    return params


def run_variant(cfg: ExperimentConfig, data: Data, seed_params: ParamStore, spec: ObjectiveSpec,
                name=None, out_dir=None, probe=True, train_cfg: TrainConfig | None = None) -> RunResult:
    tcfg = replace(train_cfg or cfg.train, objective=spec)
    params, lg = continue_train(seed_params, tcfg, data.train, data.held, cfg.model, cfg.classifier,
                                out_dir=out_dir)
    return _finish(cfg, data, name or spec.kind, params, lg, out_dir, probe)


def run_sequential(cfg: ExperimentConfig, data: Data, seed_params: ParamStore, l1: int, l2: int,
                   name="spk-enh-seq-adv", out_dir=None, probe=True,
                   stage1: RunResult | None = None) -> RunResult:
    """Enhancing then adversarial; pass the matching enhancing run as ``stage1`` to reuse it."""
    reuse = None if stage1 is None else (stage1.params, stage1.log)
    params, _, lg2 = sequential_enh_then_adv(seed_params, l1, l2, cfg.train, cfg.train, data.train,
                                             data.held, cfg.model, cfg.classifier, out_dir=out_dir,
                                             stage1_result=reuse)
    return _finish(cfg, data, name, params, lg2, out_dir, probe)


def _finish(cfg, data, name, params, lg, out_dir, probe):
    res = RunResult(name, params, lg, lg.evals[-1]["ler"])
    if probe:
        res.probe = probe_model(cfg, data, params, name)
    if out_dir is not None:
        save_config(cfg, os.path.join(out_dir, "config.ini"))
        if res.probe is not None:
            res.probe.save(os.path.join(out_dir, "probe.json"))
    return res


def probe_model(cfg: ExperimentConfig, data: Data, params: ParamStore, model_id="model") -> ProbeReport:
    return probe_all_blocks(params, data.probe_train, data.probe_held, cfg.model, cfg.probe,
                            cfg.corpus.num_speakers, model_id)


def smooth(x, window) -> np.ndarray:
    """Trailing-free moving average (``valid`` mode)."""
    window = max(1, min(int(window), len(x)))
    return np.convolve(x, np.ones(window) / window, mode="valid")


@dataclass
class StabilityCheck:
    early_lambda: float
    max_lambda: float
    threshold: float
    argmin_fraction: float
    final_minus_min: float

    @property
    def lambda_ok(self) -> bool:
        return self.early_lambda < self.threshold and self.early_lambda < self.max_lambda

    @property
    def loss_ok(self) -> bool:
        return self.argmin_fraction < 0.6 and self.final_minus_min > 0

    @property
    def passed(self) -> bool:
        return self.lambda_ok and self.loss_ok


def stability_check(lg: TrainLog, num_speakers: int, early_fraction=0.05,
                    smooth_fraction=0.05) -> StabilityCheck:
    """Shape of the adaptive-reversal training curves.

    The reversal scale should start near chance (below ``3 / S``) and rise
    later; the smoothed discriminator loss should bottom out before 60% of
    training and then climb back as the backbone fights it.
    """
    lam = lg.series("lambda_adapt")
    loss = lg.series("spk2")
    n = len(lam)
    early = float(lam[:max(1, int(early_fraction * n))].mean())
    sm = smooth(loss, smooth_fraction * n)
    return StabilityCheck(early, float(lam.max()), 3.0 / num_speakers,
                          float(np.argmin(sm)) / len(sm), float(sm[-1] - sm.min()))
