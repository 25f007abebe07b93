"""Classification and ranking metrics plus per-fold report aggregation.

ROC-AUC is the Mann-Whitney statistic (ties count half).  PR-AUC is average
precision — sum of precision times recall increments over descending score
thresholds, with no linear interpolation, which is the unbiased convention
for imbalanced problems.  recall@k and precision@k break score ties by
ascending code index so results are reproducible.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class UndefinedMetricError(ValueError):
    """The metric has no value on this input (e.g. single-class labels)."""


def _midranks(x: Array) -> Array:
    order = np.argsort(x, kind="stable")
    sx = x[order]
    ranks = np.empty(x.shape[0])
    i = 0
    n = x.shape[0]
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # mean of 1-based ranks
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    counting ties as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    neg = labels == 0
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("roc_auc needs at least one positive and one negative")
    ranks = _midranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision over all distinct score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("pr_auc needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = (labels[order] == 1).astype(np.float64)
    tp = np.cumsum(y)
    k = np.arange(1, s.shape[0] + 1)
    block_end = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    precision = tp[block_end] / k[block_end]
    recall = tp[block_end] / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * precision))


def top_k_indices(scores: Array, k: int) -> Array:
    """Indices of the k highest scores; boundary ties resolved by ascending
    index."""
    n = scores.shape[0]
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


def recall_at_k(scores: Array, true_codes, k: int) -> float:
    """|top-k ∩ true| / |true| for one prediction."""
    true_set = set(int(c) for c in true_codes)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not true_set:
        raise ValueError("true code set must be non-empty")
    top = top_k_indices(np.asarray(scores, dtype=np.float64), k)
    hits = sum(1 for c in top if int(c) in true_set)
    return hits / len(true_set)


GROUP_LABELS = ("pct20_40", "pct40_60", "pct60_80", "pct80_100")


@dataclass
class FreqGroups:
    """Percentile buckets of Dx codes by training-set visit prevalence.

    Buckets cover the 20th-40th, 40th-60th, 60th-80th, and 80th-100th
    percentiles of codes ranked by prevalence; the rarest fifth is not
    scored.
    """

    prevalence: Array
    groups: dict[str, Array]


def build_freq_groups(train_patients, n_dx: int) -> FreqGroups:
    """Prevalence = fraction of training visits containing each code."""
    visit_count = 0
    occur = np.zeros(n_dx)
    for patient in train_patients:
        for visit in patient.visits:
            visit_count += 1
            for dx in set(o.dx for o in visit.objects):
                occur[dx] += 1.0
    prevalence = occur / max(1, visit_count)
    order = np.lexsort((np.arange(n_dx), prevalence))  # ascending rarity rank
    edges = [int(round(q * n_dx)) for q in (0.2, 0.4, 0.6, 0.8, 1.0)]
    groups = {}
    for label, lo, hi in zip(GROUP_LABELS, edges[:-1], edges[1:]):
        groups[label] = np.sort(order[lo:hi])
    return FreqGroups(prevalence, groups)


def precision_at_k_by_group(dists: list[Array], truths: list[list[Array]],
                            groups: FreqGroups, k: int = 5) -> dict[str, float]:
    """Per-group precision@k for next-visit Dx prediction.

    For each group, over the timesteps whose true code set intersects the
    group, rank only the group's codes by predicted score; precision is the
    fraction of the top k that are truly present.  Groups with no scored
    timestep are omitted (with a notice).
    """
    out: dict[str, float] = {}
    for label, codes in groups.groups.items():
        if codes.shape[0] == 0:
            warnings.warn(f"frequency group {label} has no codes; omitted")
            continue
        precisions = []
        code_set = set(int(c) for c in codes)
        for dist_mat, true_list in zip(dists, truths):
            for j, true_codes in enumerate(true_list):
                true_set = set(int(c) for c in true_codes)
                if not (true_set & code_set):
                    continue
                sub_scores = dist_mat[j][codes]
                top_local = top_k_indices(sub_scores, min(k, codes.shape[0]))
                top_codes = codes[top_local]
                hits = sum(1 for c in top_codes if int(c) in true_set)
                precisions.append(hits / top_codes.shape[0])
        if precisions:
            out[label] = float(np.mean(precisions))
        else:
            warnings.warn(f"frequency group {label} never occurs in the "
                          "evaluated timesteps; omitted")
    return out


# ---------------------------------------------------------------------------
# fold aggregation

@dataclass
class EvalReport:
    """Per-fold metric dicts plus mean/std aggregation over folds."""

    task: str
    fold_metrics: list[dict[str, float | None]] = field(default_factory=list)

    @property
    def n_folds(self) -> int:
        return len(self.fold_metrics)

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for fold in self.fold_metrics:
            for key in fold:
                if key not in names:
                    names.append(key)
        return names

    def aggregate(self) -> dict[str, tuple[float, float] | None]:
        out = {}
        for name in self.metric_names():
            values = [fold[name] for fold in self.fold_metrics
                      if fold.get(name) is not None]
            if values:
                out[name] = (float(np.mean(values)), float(np.std(values)))
            else:
                out[name] = None
        return out

    def to_json(self, path) -> None:
        agg = {name: (None if stats is None else {"mean": stats[0], "std": stats[1]})
               for name, stats in self.aggregate().items()}
        doc = {"task": self.task, "n_folds": self.n_folds,
               "folds": self.fold_metrics, "aggregate": agg}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        def fmt(v):
            return "" if v is None else f"{v:.4f}"

        agg = self.aggregate()
        with open(path, "w", encoding="utf-8") as fh:
            fold_cols = ",".join(f"fold{i}" for i in range(self.n_folds))
            fh.write(f"metric,mean,std,{fold_cols}\n" if fold_cols else "metric,mean,std\n")
            for name in self.metric_names():
                stats = agg[name]
                mean, std = ("", "") if stats is None else (fmt(stats[0]), fmt(stats[1]))
                cells = ",".join(fmt(fold.get(name)) for fold in self.fold_metrics)
                row = f"{name},{mean},{std}"
                fh.write(row + ("," + cells if cells else "") + "\n")


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.4f} ({std:.4f})"
