"""Cohort-level evaluation and the benchmark experiment grids.

Three experiment kinds:

* ``complexity`` — slice one cohort into low/medium/high visit-complexity
  subpopulations (among patients with a short history) and compare models on
  heart-failure prediction in each slice.
* ``datasize`` — nested cohorts of growing maximum sequence length, the
  "hospital collecting records over time" setting.
* ``sdp`` — sequential disease prediction on the full cohort, scored by
  recall@k and frequency-grouped precision@5.

Every (dataset, model, fold) cell trains independently with its own derived
seed, so cells can run on worker threads and still produce byte-identical
CSVs in any order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Cohort, Patient, read_cohort, slice_by_complexity, slice_by_max_visits, split_folds
from .generator import GenConfig, generate
from .metrics import (EvalReport, FreqGroups, UndefinedMetricError, build_freq_groups,
                      precision_at_k_by_group, pr_auc, recall_at_k, roc_auc)
from .model import ModelMeta, build_params, make_batch, prepare_patients, predict_hf_scores, predict_sdp_dists
from .optim import child_seed
from .training import TrainConfig, TrainLog, make_loss_builder, train
from . import autodiff as ad

DEFAULT_MODELS = ("mime", "mime_aux", "raw", "linear", "tanh", "tanh_mlp")
COMPLEXITY_RANGES = ((0.0, 0.15), (0.15, 0.30), (0.30, 1.0))
TMAX_VALUES = (10, 20, 30, 150)
RECALL_KS = (5, 10, 20)


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_folds: int = 5
    models: list[str] = field(default_factory=lambda: list(DEFAULT_MODELS))
    gen: GenConfig | None = None
    cohort_path: str | None = None
    train: dict = field(default_factory=dict)
    complexity_ranges: list[tuple[float, float]] = field(
        default_factory=lambda: [list(r) for r in COMPLEXITY_RANGES])
    max_visits: int = 20
    tmax_values: list[int] = field(default_factory=lambda: list(TMAX_VALUES))

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        if "gen" in raw and raw["gen"] is not None:
            raw["gen"] = GenConfig(**raw["gen"])
        cfg = cls(**raw)
        if cfg.gen is None and cfg.cohort_path is None:
            raise ValueError("experiment config needs either gen or cohort_path")
        return cfg


def resolve_model_label(label: str, lambda_aux: float) -> tuple[str, float]:
    """Grid labels: ``mime`` trains without the auxiliary loss, ``mime_aux``
    with it; baseline labels are their own kinds."""
    if label == "mime":
        return "mime", 0.0
    if label == "mime_aux":
        return "mime", lambda_aux if lambda_aux > 0 else 0.015
    return label, 0.0


# ---------------------------------------------------------------------------
# fold evaluation

def evaluate_hf_fold(params, meta: ModelMeta, test_patients: list[Patient],
                     vocab) -> dict[str, float | None]:
    scores, test_loss = predict_hf_scores(params, meta, test_patients, vocab)
    labels = np.array([p.hf_label for p in test_patients], dtype=np.float64)
    out: dict[str, float | None] = {"test_loss": test_loss}
    try:
        out["roc_auc"] = roc_auc(scores, labels)
    except UndefinedMetricError:
        out["roc_auc"] = None
    try:
        out["pr_auc"] = pr_auc(scores, labels)
    except UndefinedMetricError:
        out["pr_auc"] = None
    return out


def evaluate_sdp_fold(params, meta: ModelMeta, test_patients: list[Patient],
                      vocab, train_patients: list[Patient],
                      ks=RECALL_KS, group_k: int = 5) -> dict[str, float | None]:
    dists, truths, test_loss = predict_sdp_dists(params, meta, test_patients, vocab)
    out: dict[str, float | None] = {"test_loss": test_loss}
    per_k: dict[int, list[float]] = {k: [] for k in ks}
    for dist_mat, true_list in zip(dists, truths):
        for j, true_codes in enumerate(true_list):
            for k in ks:
                per_k[k].append(recall_at_k(dist_mat[j], true_codes, k))
    for k in ks:
        out[f"recall@{k}"] = float(np.mean(per_k[k])) if per_k[k] else None
    groups = build_freq_groups(train_patients, vocab.n_dx)
    by_group = precision_at_k_by_group(dists, truths, groups, k=group_k)
    for label in groups.groups:
        out[f"p{group_k}_{label}"] = by_group.get(label)
    return out


def frequency_baseline_recall(train_patients: list[Patient],
                              test_patients: list[Patient], n_dx: int,
                              k: int = 5) -> float:
    """Recall@k of always predicting the k most frequent training Dx codes."""
    groups = build_freq_groups(train_patients, n_dx)
    scores = groups.prevalence  # constant prediction: prevalence as the score
    recalls = []
    for patient in test_patients:
        for j in range(len(patient.visits) - 1):
            true_codes = sorted(set(o.dx for o in patient.visits[j + 1].objects))
            recalls.append(recall_at_k(scores, true_codes, k))
    return float(np.mean(recalls)) if recalls else float("nan")


# ---------------------------------------------------------------------------
# experiment grids

def _make_train_config(exp: ExperimentConfig, label: str, task: str,
                       cell_seed: int) -> TrainConfig:
    overrides = dict(exp.train)
    base_lambda = overrides.pop("lambda_aux", 0.015)
    kind, lam = resolve_model_label(label, base_lambda)
    cfg = TrainConfig(**overrides, lambda_aux=lam, seed=cell_seed,
                      task=task, model_kind=kind)
    cfg.validate()
    return cfg


def _datasets_for(kind: str, cohort: Cohort, exp: ExperimentConfig) -> list[tuple[str, Cohort]]:
    if kind == "complexity":
        out = []
        for i, (lo, hi) in enumerate(exp.complexity_ranges):
            out.append((f"D{i + 1}", slice_by_complexity(cohort, float(lo), float(hi),
                                                         exp.max_visits)))
        return out
    if kind == "datasize":
        return [(f"E{i + 1}", slice_by_max_visits(cohort, int(t)))
                for i, t in enumerate(exp.tmax_values)]
    if kind == "sdp":
        return [("full", cohort)]
    raise ValueError(f"unknown experiment kind {kind!r}")


@dataclass
class CellResult:
    dataset: str
    model: str
    fold: int
    status: str  # "ok" or "failed"
    message: str = ""
    metrics: dict[str, float | None] = field(default_factory=dict)


def run_experiment(kind: str, exp: ExperimentConfig, out_dir,
                   threads: int = 1) -> tuple[list[CellResult], bool]:
    """Train the full grid and write results.csv / cells.csv under out_dir.

    Failures are captured per cell and the run continues; returns the cell
    results and whether every cell completed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if exp.cohort_path is not None:
        cohort = read_cohort(exp.cohort_path)
    else:
        cohort, _ = generate(exp.gen)
    task = "sdp" if kind == "sdp" else "hf"
    datasets = _datasets_for(kind, cohort, exp)

    folds_by_dataset = {}
    for di, (name, sub) in enumerate(datasets):
        folds_by_dataset[name] = split_folds(sub, exp.seed, exp.n_folds)

    cells = [(di, name, sub, mi, label, fold)
             for di, (name, sub) in enumerate(datasets)
             for mi, label in enumerate(exp.models)
             for fold in range(exp.n_folds)]

    def run_cell(cell) -> CellResult:
        di, ds_name, sub, mi, label, fold = cell
        try:
            tr, va, te = folds_by_dataset[ds_name][fold]
            cfg = _make_train_config(exp, label, task,
                                     child_seed(exp.seed, di, mi, fold))
            params, meta, _ = train(tr, va, sub.vocab, cfg)
            if task == "hf":
                metrics = evaluate_hf_fold(params, meta, te, sub.vocab)
            else:
                test_eval = [p for p in te if len(p.visits) >= 2]
                metrics = evaluate_sdp_fold(params, meta, test_eval, sub.vocab, tr)
            return CellResult(ds_name, label, fold, "ok", metrics=metrics)
        except Exception as exc:  # cell isolation: record and keep going
            return CellResult(ds_name, label, fold, "failed", message=str(exc))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]

    results.sort(key=lambda r: (r.dataset, r.model, r.fold))
    _write_cells_csv(results, out_dir / "cells.csv")
    _write_results_csv(results, out_dir / "results.csv")
    return results, all(r.status == "ok" for r in results)


def _write_cells_csv(results: list[CellResult], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,model,fold,status,message\n")
        for r in results:
            msg = r.message.replace("\n", " ").replace(",", ";")
            fh.write(f"{r.dataset},{r.model},{r.fold},{r.status},{msg}\n")


def _write_results_csv(results: list[CellResult], path: Path) -> None:
    by_cell: dict[tuple[str, str], list[CellResult]] = {}
    for r in results:
        by_cell.setdefault((r.dataset, r.model), []).append(r)
    lines = []
    for (dataset, model), cell_results in sorted(by_cell.items()):
        ok = [r for r in cell_results if r.status == "ok"]
        report = EvalReport(task="", fold_metrics=[r.metrics for r in ok])
        for metric, stats in sorted(report.aggregate().items()):
            if stats is None:
                lines.append(f"{dataset},{model},{metric},,")
            else:
                lines.append(f"{dataset},{model},{metric},{stats[0]:.4f},{stats[1]:.4f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dataset,model,metric,mean,std\n")
        for line in lines:
            fh.write(line + "\n")


def experiment_reports(results: list[CellResult]) -> dict[tuple[str, str], EvalReport]:
    """Aggregate cell results into one EvalReport per (dataset, model)."""
    grouped: dict[tuple[str, str], EvalReport] = {}
    for r in sorted(results, key=lambda r: (r.dataset, r.model, r.fold)):
        if r.status != "ok":
            continue
        grouped.setdefault((r.dataset, r.model), EvalReport(task="")).fold_metrics.append(r.metrics)
    return grouped


# ---------------------------------------------------------------------------
# end-to-end gradient checking

GRADCHECK_GEN = GenConfig(seed=11, n_patients=3, n_dx=12, n_tx=8, mean_visits=4.0,
                          mean_dx_per_visit=2.0, mean_tx_per_dx=0.8,
                          n_interaction_rules=2, interaction_weight=1.5,
                          base_rate=0.3)


def gradcheck_suite(seed: int = 11, z: int = 4, lambda_aux: float = 0.015,
                    l2: float = 1e-4, eps: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of the full model: multilevel encoder + GRU +
    both task heads + auxiliary and L2 terms, on a tiny synthetic batch.

    Returns the max relative error per parameter group.
    """
    gen = GenConfig(**{**GRADCHECK_GEN.__dict__, "seed": seed})
    cohort, _ = generate(gen)
    if not any(len(p.visits) >= 2 for p in cohort.patients):
        raise ValueError("gradcheck cohort has no multi-visit patient; pick another seed")
    meta = ModelMeta("mime", "both", cohort.vocab.n_dx, cohort.vocab.n_tx,
                     embed_dim=z, z=z, enc_dim=z, gru_hidden=z)
    params = build_params(meta, seed)
    prepared = prepare_patients(cohort.patients, cohort.vocab, "mime")
    batch = make_batch(prepared, cohort.vocab, "mime", need_labels=True, need_sdp=True)
    builder = make_loss_builder(batch, meta, lambda_aux, l2)
    return ad.grad_check_report(builder, params, eps)
