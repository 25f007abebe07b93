"""Batch entry points: cohort generation, training, evaluation, experiment
grids, and end-to-end gradient checking.

Everything is seeded and file-driven; rerunning any subcommand with the same
inputs and seed reproduces its outputs byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import read_cohort, split_folds
from .experiments import ExperimentConfig, gradcheck_suite, run_experiment
from .generator import GenConfig, cohort_stats, generate, save_rules
from .metrics import EvalReport
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig, train
from .experiments import evaluate_hf_fold, evaluate_sdp_fold


def _threads_from(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("MIME_THREADS")
    return max(1, int(env)) if env else 1


def _check_out_dir(path: Path) -> None:
    parent = path.parent
    if not parent.exists():
        raise FileNotFoundError(f"output directory {parent} does not exist")


def cmd_gen(args) -> int:
    cfg = GenConfig.from_json(args.config) if args.config else GenConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    out = Path(args.out)
    _check_out_dir(out)
    cohort, rules = generate(cfg)
    from .data import write_cohort

    write_cohort(cohort, out)
    rules_path = out.with_name(out.stem + "_rules.json")
    save_rules(rules, cohort.vocab, cfg, rules_path)
    stats = cohort_stats(cohort)
    print(f"wrote {out} and {rules_path}")
    print(f"# of patients: {stats['n_patients']}")
    print(f"# of visits: {stats['n_visits']}")
    print(f"Avg. # of visits per patient: {stats['avg_visits_per_patient']:.2f}")
    print(f"Avg. # of Dx per visit: {stats['avg_dx_per_visit']:.2f} "
          f"(Max: {stats['max_dx_per_visit']})")
    print(f"Avg. # of Tx per diagnosis: {stats['avg_tx_per_dx']:.2f} "
          f"(Max: {stats['max_tx_per_dx']})")
    print(f"Label prevalence: {stats['label_prevalence']:.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    cohort = read_cohort(args.cohort)
    if cfg.task == "hf":
        for p in cohort.patients:
            if p.hf_label is None:
                raise ValueError(f"hf task needs labels on every patient; "
                                 f"patient {p.id!r} has hf_label null")
    out = Path(args.out)
    _check_out_dir(out)
    folds = split_folds(cohort, cfg.seed)
    if not 0 <= args.fold < len(folds):
        raise ValueError(f"fold {args.fold} out of range (0..{len(folds) - 1})")
    tr, va, _ = folds[args.fold]
    params, meta, log = train(tr, va, cohort.vocab, cfg)
    save_checkpoint(out, params, meta)
    log_path = out.with_name(out.stem + "_trainlog.csv")
    log.to_csv(log_path)
    print(f"wrote {out} and {log_path}")
    print(f"best iteration: {log.best_iteration}")
    if log.records:
        print(f"final val loss: {log.records[-1][2]:.6f}")
    return 0


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.checkpoint)
    cohort = read_cohort(args.cohort)
    if meta.n_dx != cohort.vocab.n_dx or meta.n_tx != cohort.vocab.n_tx:
        raise ValueError(
            f"checkpoint was trained with |A|={meta.n_dx}, |B|={meta.n_tx} "
            f"but the cohort has |A|={cohort.vocab.n_dx}, |B|={cohort.vocab.n_tx}")
    out = Path(args.out)
    _check_out_dir(out)

    if args.split == "all":
        patients = cohort.patients
        train_split = cohort.patients
    else:
        folds = split_folds(cohort, args.seed)
        tr, va, te = folds[args.fold]
        patients = {"train": tr, "val": va, "test": te}[args.split]
        train_split = tr

    if meta.task == "hf":
        for p in patients:
            if p.hf_label is None:
                raise ValueError(f"hf evaluation needs labels; patient {p.id!r} "
                                 "has hf_label null")
        metrics = evaluate_hf_fold(params, meta, patients, cohort.vocab)
    else:
        eligible = [p for p in patients if len(p.visits) >= 2]
        metrics = evaluate_sdp_fold(params, meta, eligible, cohort.vocab, train_split)

    report = EvalReport(task=meta.task, fold_metrics=[metrics])
    report.to_json(out)
    report.to_csv(out.with_suffix(".csv"))
    print(f"wrote {out} and {out.with_suffix('.csv')}")
    for name, value in metrics.items():
        print(f"{name}: {'n/a' if value is None else f'{value:.4f}'}")
    return 0


def cmd_experiment(args) -> int:
    exp = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        exp.seed = args.seed
    results, ok = run_experiment(args.kind, exp, args.out, threads=_threads_from(args))
    n_ok = sum(1 for r in results if r.status == "ok")
    print(f"{n_ok}/{len(results)} cells completed; results in {args.out}")
    for r in results:
        if r.status != "ok":
            print(f"failed: {r.dataset}/{r.model}/fold{r.fold}: {r.message}",
                  file=sys.stderr)
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(seed=args.seed, z=args.z, lambda_aux=args.lambda_aux,
                             l2=args.l2, eps=args.eps)
    worst = 0.0
    for name in sorted(report):
        print(f"{name}: {report[name]:.3e}")
        worst = max(worst, report[name])
    print(f"max relative error: {worst:.3e} (tolerance {args.tol:.1e})")
    return 0 if worst < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mime-ehr",
                                     description="Multilevel EHR embedding pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic cohort")
    p.add_argument("--config", help="generator config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="cohort JSONL path")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train one model on one split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--fold", type=int, default=0, help="which random split to use")
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a cohort split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="split seed used at training time")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="run a full model x dataset x fold grid")
    p.add_argument("kind", choices=("complexity", "datasize", "sdp"))
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (or MIME_THREADS env var)")
    p.set_defaults(fn=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--z", type=int, default=4)
    p.add_argument("--lambda-aux", type=float, default=0.015, dest="lambda_aux")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
