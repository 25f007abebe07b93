"""Synthetic EHR cohort generator with structure-dependent labels.

Record statistics are configurable (visits per patient, Dx per visit,
treatments per Dx, Zipf-distributed code frequencies).  Labels are driven by
interaction rules that fire on a single diagnosis object only when the rule's
Dx code carries the required treatments and none of the excluded ones, so two
patients with identical flattened code sets can have different label odds.
That is the property a structure-aware encoder can exploit and a flattened
one cannot.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import CodeVocab, Cohort, DxObject, Patient, Visit, visit_complexity
from .optim import child_rng

# geometric visit counts are truncated here; slices at t_max=150 keep everyone
VISIT_CAP = 150

# each Dx code prefers a small pool of treatments
PREFERRED_TX_PER_DX = 5


@dataclass
class GenConfig:
    seed: int = 0
    n_patients: int = 2000
    n_dx: int = 50
    n_tx: int = 30
    mean_visits: float = 20.0
    mean_dx_per_visit: float = 1.93
    mean_tx_per_dx: float = 0.33
    n_interaction_rules: int = 3
    interaction_weight: float = 2.0
    base_rate: float = 0.1
    # 0 gives i.i.d. visits; near 1 makes next-visit Dx codes follow a fixed
    # successor map of the current visit's codes
    markov_strength: float = 0.0

    def validate(self) -> None:
        if min(self.n_patients, self.n_dx, self.n_tx) < 1:
            raise ValueError("n_patients, n_dx, n_tx must all be >= 1")
        if self.mean_visits < 1 or self.mean_dx_per_visit < 1:
            raise ValueError("mean_visits and mean_dx_per_visit must be >= 1")
        if self.mean_tx_per_dx < 0:
            raise ValueError("mean_tx_per_dx must be >= 0")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError("base_rate must lie in (0, 1)")
        if self.n_interaction_rules < 0:
            raise ValueError("n_interaction_rules must be >= 0")
        if not 0.0 <= self.markov_strength <= 1.0:
            raise ValueError("markov_strength must lie in [0, 1]")

    @classmethod
    def from_json(cls, path) -> "GenConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class InteractionRule:
    """Fires on a diagnosis object iff the Dx matches, every code in
    tx_present is attached to that object, and none in tx_absent is."""

    dx: int
    tx_present: frozenset[int]
    tx_absent: frozenset[int]
    weight: float

    def __post_init__(self):
        if self.tx_present & self.tx_absent:
            raise ValueError("tx_present and tx_absent overlap")

    def fires(self, obj: DxObject) -> bool:
        if obj.dx != self.dx:
            return False
        attached = set(obj.tx)
        return self.tx_present <= attached and not (self.tx_absent & attached)


def label_logit(visits: Sequence[Visit], rules: Sequence[InteractionRule],
                base_rate: float) -> float:
    """Log-odds of the positive label for one patient's record."""
    logit = float(np.log(base_rate / (1.0 - base_rate)))
    for visit in visits:
        for obj in visit.objects:
            for rule in rules:
                if rule.fires(obj):
                    logit += rule.weight
    return logit


def _zipf_probs(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1)
    return w / w.sum()


def generate(cfg: GenConfig) -> tuple[Cohort, list[InteractionRule]]:
    """Build a labeled cohort plus the ground-truth rules that labeled it.

    Patient records are generated from per-patient substreams of cfg.seed, so
    the output is deterministic and patients could be produced in parallel
    without changing it.
    """
    cfg.validate()
    vocab = CodeVocab([f"D{i:03d}" for i in range(cfg.n_dx)],
                      [f"T{i:03d}" for i in range(cfg.n_tx)])
    dx_probs = _zipf_probs(cfg.n_dx)

    struct_rng = child_rng(cfg.seed, 0)
    pref_codes = np.zeros((cfg.n_dx, PREFERRED_TX_PER_DX), dtype=np.intp)
    pref_probs = np.zeros((cfg.n_dx, PREFERRED_TX_PER_DX))
    n_pref = min(PREFERRED_TX_PER_DX, cfg.n_tx)
    for d in range(cfg.n_dx):
        codes = struct_rng.choice(cfg.n_tx, size=n_pref, replace=False)
        probs = struct_rng.dirichlet(np.ones(n_pref))
        pref_codes[d, :n_pref] = codes
        pref_probs[d, :n_pref] = probs
    successor = struct_rng.permutation(cfg.n_dx)

    rules: list[InteractionRule] = []
    if cfg.n_interaction_rules > 0:
        head = min(10, cfg.n_dx)
        rule_dx = struct_rng.choice(head, size=min(cfg.n_interaction_rules, head),
                                    replace=False)
        # cycle if more rules than distinct head codes were requested
        while len(rule_dx) < cfg.n_interaction_rules:
            rule_dx = np.concatenate([rule_dx, rule_dx[:cfg.n_interaction_rules - len(rule_dx)]])
        for d in rule_dx:
            order = np.argsort(-pref_probs[d, :n_pref], kind="stable")
            present = int(pref_codes[d, order[0]])
            absent = int(pref_codes[d, order[1]]) if n_pref > 1 else None
            rules.append(InteractionRule(
                dx=int(d),
                tx_present=frozenset({present}),
                tx_absent=frozenset() if absent is None else frozenset({absent}),
                weight=cfg.interaction_weight,
            ))

    p_geo = min(1.0, 1.0 / cfg.mean_visits)
    patients = []
    for i in range(cfg.n_patients):
        rng = child_rng(cfg.seed, 1, i)
        n_visits = min(int(rng.geometric(p_geo)), VISIT_CAP)
        visits = []
        prev_dx: list[int] = []
        for t in range(n_visits):
            n_obj = 1 + int(rng.poisson(cfg.mean_dx_per_visit - 1.0))
            objects = []
            cur_dx = []
            for _ in range(n_obj):
                if t > 0 and prev_dx and rng.random() < cfg.markov_strength:
                    src = prev_dx[int(rng.integers(len(prev_dx)))]
                    dx = int(successor[src])
                else:
                    dx = int(rng.choice(cfg.n_dx, p=dx_probs))
                cur_dx.append(dx)
                n_att = int(rng.poisson(cfg.mean_tx_per_dx))
                if n_att > 0 and n_pref > 0:
                    n_att = min(n_att, n_pref)
                    tx = rng.choice(pref_codes[dx, :n_pref], size=n_att,
                                    replace=False, p=pref_probs[dx, :n_pref])
                    tx = [int(v) for v in tx]
                else:
                    tx = []
                objects.append(DxObject(dx, tx))
            visits.append(Visit(objects))
            prev_dx = cur_dx
        logit = label_logit(visits, rules, cfg.base_rate)
        label = int(rng.random() < expit(logit))
        patients.append(Patient(f"P{i:06d}", visits, label))

    provenance = (f"synthetic seed={cfg.seed} n={cfg.n_patients} "
                  f"dx={cfg.n_dx} tx={cfg.n_tx} rules={len(rules)}")
    return Cohort(vocab, patients, provenance), rules


def complexity_profile(cohort: Cohort) -> np.ndarray:
    """10-bin histogram of per-patient visit complexity over [0, 1]."""
    values = [visit_complexity(p) for p in cohort.patients]
    counts, _ = np.histogram(values, bins=10, range=(0.0, 1.0))
    return counts


def cohort_stats(cohort: Cohort) -> dict:
    """Summary statistics in the shape usually reported for EHR cohorts."""
    n_visits = sum(len(p.visits) for p in cohort.patients)
    dx_counts = [len(v.objects) for p in cohort.patients for v in p.visits]
    tx_counts = [len(o.tx) for p in cohort.patients for v in p.visits for o in v.objects]
    labels = [p.hf_label for p in cohort.patients if p.hf_label is not None]
    return {
        "n_patients": len(cohort.patients),
        "n_visits": n_visits,
        "avg_visits_per_patient": n_visits / max(1, len(cohort.patients)),
        "avg_dx_per_visit": float(np.mean(dx_counts)) if dx_counts else 0.0,
        "max_dx_per_visit": int(np.max(dx_counts)) if dx_counts else 0,
        "avg_tx_per_dx": float(np.mean(tx_counts)) if tx_counts else 0.0,
        "max_tx_per_dx": int(np.max(tx_counts)) if tx_counts else 0,
        "label_prevalence": float(np.mean(labels)) if labels else float("nan"),
    }


def save_rules(rules: Sequence[InteractionRule], vocab: CodeVocab, cfg: GenConfig,
               path) -> None:
    payload = {
        "base_rate": cfg.base_rate,
        "rules": [{
            "dx": vocab.dx_codes[r.dx],
            "tx_present": sorted(vocab.tx_codes[t] for t in r.tx_present),
            "tx_absent": sorted(vocab.tx_codes[t] for t in r.tx_absent),
            "weight": r.weight,
        } for r in rules],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_rules(path, vocab: CodeVocab) -> tuple[list[InteractionRule], float]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    rules = [InteractionRule(
        dx=vocab.dx_index[r["dx"]],
        tx_present=frozenset(vocab.tx_index[c] for c in r["tx_present"]),
        tx_absent=frozenset(vocab.tx_index[c] for c in r["tx_absent"]),
        weight=float(r["weight"]),
    ) for r in payload["rules"]]
    return rules, float(payload["base_rate"])
