"""Command-line entry point.

Exit codes: 0 success, 1 user or configuration error, 2 numerical failure
(NaN abort or a failed verification check).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .config import ExperimentConfig, load_config, save_config
from .ctc import InfeasibleAlignmentError
from .data import generate_corpus, read_corpus, split, write_corpus
from .model import infer_backbone_config, init_backbone
from .objectives import KINDS, ConfigError, NumericalError
from .probe import ProbeError, probe_all_blocks
from .report import load_run, write_report
from .tensorio import CheckpointError, load_checkpoint
from .trainer import check_backbone, continue_train, decode_dataset, sequential_enh_then_adv, train

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
SEQUENTIAL = "spk-enh-seq-adv"


class UsageError(Exception):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.set or ())
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _corpus(args, cfg):
    if getattr(args, "corpus", None):
        return read_corpus(args.corpus)
    return generate_corpus(cfg.corpus)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    tensors = f"{args.out}.tensors"
    if os.path.exists(tensors) and not args.force:
        raise UsageError(f"{tensors} exists; pass --force to overwrite")
    corpus = generate_corpus(cfg.corpus)
    parent = os.path.dirname(os.path.abspath(tensors))
    os.makedirs(parent, exist_ok=True)
    write_corpus(args.out, corpus)
    save_config(cfg, f"{args.out}.config.ini")
    frames = sum(u.num_frames for u in corpus)
    print(f"S={cfg.corpus.num_speakers} V={cfg.corpus.content_vocab} utterances={len(corpus)} "
          f"frames={frames}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    kind = args.objective or cfg.objective.kind
    if kind not in KINDS + (SEQUENTIAL,):
        raise UsageError(f"unknown objective {kind!r}; expected one of {KINDS + (SEQUENTIAL,)}")
    if kind != SEQUENTIAL:
        cfg = cfg.with_objective(kind=kind)
    init = args.init or cfg.train.init_checkpoint
    if init:
        cfg = replace(cfg, train=replace(cfg.train, init_checkpoint=init))
    corpus = _corpus(args, cfg)
    train_set, held = split(corpus, cfg.experiment.eval_fraction, cfg.experiment.split_seed)
    os.makedirs(args.out, exist_ok=True)
    save_config(cfg, os.path.join(args.out, "config.ini"))
    seed_params = load_checkpoint(init) if init else None

    if kind == SEQUENTIAL:
        spec = cfg.objective
        if spec.l1 is None or spec.l2 is None:
            raise UsageError(f"{SEQUENTIAL} needs objective.l1 and objective.l2")
        if seed_params is None:
            seed_params = init_backbone(cfg.model, cfg.train.seed)
        _, lg1, lg2 = sequential_enh_then_adv(seed_params, spec.l1, spec.l2, cfg.train, cfg.train,
                                              train_set, held, cfg.model, cfg.classifier, out_dir=args.out)
        lg = lg2
    elif seed_params is not None:
        _, lg = continue_train(seed_params, cfg.train, train_set, held, cfg.model, cfg.classifier,
                               out_dir=args.out)
    else:
        _, lg = train(cfg.train, train_set, held, cfg.model, cfg.classifier, out_dir=args.out)
    if lg.evals:
        print(f"final eval label error rate {lg.evals[-1]['ler']:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _config(args)
    params = load_checkpoint(args.ckpt)
    check_backbone(params, cfg.model)
    corpus = _corpus(args, cfg)
    ptr, pev = split(corpus, cfg.probe.eval_fraction, cfg.probe.split_seed)
    report = probe_all_blocks(params, ptr, pev, cfg.model, cfg.probe, cfg.corpus.num_speakers,
                              model_id=args.model_id or os.path.basename(args.ckpt))
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    report.save(args.out)
    save_config(cfg, os.path.splitext(args.out)[0] + ".config.ini")
    for b in report.blocks:
        print(f"block {b.block}: eval {b.eval_acc:.3f} train {b.train_acc:.3f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    params = load_checkpoint(args.ckpt)
    try:
        model_cfg = infer_backbone_config(params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    corpus = read_corpus(args.corpus)
    if corpus and corpus[0].features.shape[1] != model_cfg.input_dim:
        raise ConfigError(f"corpus feature dim {corpus[0].features.shape[1]} != model input "
                          f"{model_cfg.input_dim}")
    hyps, ler = decode_dataset(params, corpus, model_cfg)
    if args.hyps:
        with open(args.hyps, "w") as fh:
            for u, h in zip(corpus, hyps):
                fh.write(f"{u.uid}\t{' '.join(map(str, h))}\n")
    print(f"label error rate {ler:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("all checks passed" if ok else "verification FAILED")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_report(args) -> int:
    runs = [load_run(d) for d in args.runs]
    table_path, plot_path = write_report(runs, args.out)
    with open(table_path) as fh:
        sys.stdout.write(fh.read())
    print(f"wrote {table_path} and {plot_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spkmtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="experiment config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key; repeatable")
        return p

    p = with_config(sub.add_parser("gen-data", help="generate a synthetic corpus"))
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = with_config(sub.add_parser("train", help="train or continue-train a model"))
    p.add_argument("--objective", help=f"one of {', '.join(KINDS + (SEQUENTIAL,))}")
    p.add_argument("--init", help="seed checkpoint to continue from")
    p.add_argument("--corpus", help="corpus prefix (generated from the config when omitted)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = with_config(sub.add_parser("probe", help="per-block speaker probes on a frozen model"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus")
    p.add_argument("--model-id")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("decode", help="greedy decoding and label error rate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--hyps", help="write uid<TAB>hypothesis lines here")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="comparison table and probe-curve plot")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, CheckpointError, ProbeError, InfeasibleAlignmentError,
            FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
