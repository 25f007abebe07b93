"""Joint loss assembly, the minibatch training loop, and parameter matching.

The objective is mean-over-batch task cross-entropy, plus the auxiliary
code-prediction loss (scaled by lambda_aux, active only for the multilevel
model), plus an L2 penalty on weight matrices.  Training runs a fixed number
of Adam steps over reshuffled minibatches; every ``eval_every`` iterations
the full validation task loss is computed and the parameters with the lowest
validation loss seen so far are retained — patience-free early stopping by
best-checkpoint retention.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .baselines import count_params_baseline
from .data import CodeVocab, Patient, Visit
from .mime import VisitEncoding, count_params
from .model import (Batch, ModelMeta, PreparedPatient, aux_loss_node, build_params,
                    encode_batch, hf_loss_node, l2_penalty, make_batch,
                    prepare_patients, run_sequence, sdp_loss_node)
from .optim import adam_init, adam_step, child_rng

Array = np.ndarray

TASKS = ("hf", "sdp")


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries iteration and parameter norms."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 20
    max_iterations: int = 20000
    eval_every: int = 100
    l2: float = 1e-4
    lambda_aux: float = 0.015
    embed_dim: int = 128
    seed: int = 0
    task: str = "hf"
    model_kind: str = "mime"

    def validate(self) -> None:
        if self.lr <= 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("lr, batch_size, eval_every must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if self.l2 < 0 or self.lambda_aux < 0:
            raise ValueError("l2 and lambda_aux must be >= 0")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        from .model import MODEL_KINDS
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model_kind {self.model_kind!r}")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class TrainLog:
    """(iteration, mean train loss since last eval, validation loss) records."""

    records: list[tuple[int, float, float]] = field(default_factory=list)
    best_iteration: int = 0
    wall_time_s: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iteration,train_loss,val_loss\n")
            for it, tr, va in self.records:
                fh.write(f"{it},{float(tr)!r},{float(va)!r}\n")


def match_param_count(baseline_count: int, n_dx: int, n_tx: int) -> int:
    """Largest encoder width z whose parameter count stays within the
    baseline's; parameter-matched comparisons use this z."""
    if count_params(1, n_dx, n_tx) > baseline_count:
        raise ValueError(
            f"baseline count {baseline_count} is below the smallest encoder "
            f"({count_params(1, n_dx, n_tx)} parameters at z=1)")
    z = 1
    while count_params(z + 1, n_dx, n_tx) <= baseline_count:
        z += 1
    return z


def resolve_meta(cfg: TrainConfig, n_dx: int, n_tx: int, task: str | None = None,
                 z_override: int | None = None) -> ModelMeta:
    """Derive model dimensions from config and vocab sizes.

    The multilevel encoder width z is matched against the single-layer
    baseline's parameter count at the configured embedding width, and its GRU
    is sized to its own visit vectors; baselines use the configured width.
    """
    task = task or cfg.task
    if cfg.model_kind == "mime":
        if z_override is not None:
            z = z_override
        else:
            target = count_params_baseline("linear", cfg.embed_dim, n_dx, n_tx)
            z = match_param_count(target, n_dx, n_tx)
        enc_dim, hidden = z, z
    elif cfg.model_kind == "raw":
        z, enc_dim, hidden = None, n_dx + n_tx, cfg.embed_dim
    else:
        z, enc_dim, hidden = None, cfg.embed_dim, cfg.embed_dim
    return ModelMeta(cfg.model_kind, task, n_dx, n_tx, cfg.embed_dim, z, enc_dim, hidden)


# ---------------------------------------------------------------------------
# loss assembly

def aux_loss(encodings: list[VisitEncoding], visits: list[Visit], lambda_aux: float,
             n_dx: int, n_tx: int) -> Node:
    """Auxiliary loss for one patient's visit encodings (sum over visits and
    objects of Dx softmax CE plus all-treatment sigmoid CE, times lambda)."""
    if len(encodings) != len(visits):
        raise ValueError("one encoding per visit required")
    total = None
    for enc, visit in zip(encodings, visits):
        for obj, dx_logits, tx_logits in zip(visit.objects, enc.aux_dx_logits,
                                             enc.aux_tx_logits):
            onehot = np.zeros(n_dx)
            onehot[obj.dx] = 1.0
            multihot = np.zeros(n_tx)
            multihot[sorted(set(obj.tx))] = 1.0
            term = ad.add(ad.softmax_ce(dx_logits, onehot),
                          ad.reduce_sum(ad.sigmoid_ce(tx_logits, multihot)))
            total = term if total is None else ad.add(total, term)
    if total is None:
        raise ValueError("no objects to score")
    return ad.scale_shift(total, lambda_aux)


def batch_loss_node(tape: Tape, leaves: dict[str, Node], batch: Batch,
                    meta: ModelMeta, lambda_aux: float, l2: float,
                    l2_on_embeddings: bool = False) -> tuple[Node, dict[str, float]]:
    """Total training loss for one prepared batch, with a parts breakdown."""
    visits_node, o_nodes = encode_batch(tape, leaves, batch, meta)
    h_last, hidden = run_sequence(tape, leaves, visits_node, batch, meta)

    parts: dict[str, float] = {}
    loss = None
    if meta.task in ("hf", "both"):
        hf, _ = hf_loss_node(leaves, h_last, batch)
        parts["hf"] = float(hf.value)
        loss = hf
    if meta.task in ("sdp", "both"):
        sdp = sdp_loss_node(tape, leaves, hidden, batch)
        if sdp is not None:
            parts["sdp"] = float(sdp.value)
            loss = sdp if loss is None else ad.add(loss, sdp)
    if loss is None:
        raise ValueError("batch produced no task loss (sdp task needs >=2 visits)")
    if meta.model_kind == "mime" and lambda_aux > 0.0:
        aux = aux_loss_node(leaves, o_nodes, batch, meta, lambda_aux)
        parts["aux"] = float(aux.value)
        loss = ad.add(loss, aux)
    pen = l2_penalty(leaves, l2, l2_on_embeddings)
    if pen is not None:
        parts["l2"] = float(pen.value)
        loss = ad.add(loss, pen)
    parts["total"] = float(loss.value)
    return loss, parts


def total_loss(patients: list[Patient], params: dict[str, Array], meta: ModelMeta,
               vocab: CodeVocab, lambda_aux: float, l2: float) -> float:
    """Scalar training objective on a batch of patients (convenience wrapper)."""
    prepared = prepare_patients(patients, vocab, meta.model_kind)
    batch = make_batch(prepared, vocab, meta.model_kind,
                       need_labels=meta.task in ("hf", "both"),
                       need_sdp=meta.task in ("sdp", "both"))
    tape = Tape()
    leaves = {name: tape.leaf(val, name) for name, val in params.items()}
    loss, _ = batch_loss_node(tape, leaves, batch, meta, lambda_aux, l2)
    return float(loss.value)


def make_loss_builder(batch: Batch, meta: ModelMeta, lambda_aux: float, l2: float):
    """Loss builder over named parameter leaves, e.g. for gradient checking."""

    def build(tape: Tape, leaves: dict[str, Node]) -> Node:
        loss, _ = batch_loss_node(tape, leaves, batch, meta, lambda_aux, l2)
        return loss

    return build


def dataset_task_loss(params: dict[str, Array], meta: ModelMeta,
                      prepared: list[PreparedPatient], vocab: CodeVocab,
                      chunk: int = 256) -> float:
    """Mean task loss over a dataset (no auxiliary or L2 terms): the
    early-stopping criterion and the reported test loss."""
    if meta.task == "hf":
        total, n = 0.0, 0
        for start in range(0, len(prepared), chunk):
            part = prepared[start:start + chunk]
            batch = make_batch(part, vocab, meta.model_kind, True, False)
            tape = Tape()
            leaves = {name: tape.leaf(val, name) for name, val in params.items()}
            visits_node, _ = encode_batch(tape, leaves, batch, meta)
            h_last, _ = run_sequence(tape, leaves, visits_node, batch, meta)
            loss, _ = hf_loss_node(leaves, h_last, batch)
            total += float(loss.value) * len(part)
            n += len(part)
        return total / max(1, n)
    total, n = 0.0, 0
    for start in range(0, len(prepared), chunk):
        part = prepared[start:start + chunk]
        batch = make_batch(part, vocab, meta.model_kind, False, True)
        tape = Tape()
        leaves = {name: tape.leaf(val, name) for name, val in params.items()}
        visits_node, _ = encode_batch(tape, leaves, batch, meta)
        _, hidden = run_sequence(tape, leaves, visits_node, batch, meta)
        loss = sdp_loss_node(tape, leaves, hidden, batch)
        if loss is not None:
            total += float(loss.value) * batch.n_sdp_patients
            n += batch.n_sdp_patients
    return total / n if n else float("nan")


def _norm_report(params: dict[str, Array]) -> str:
    return ", ".join(f"{k}={float(np.linalg.norm(v)):.3e}" for k, v in sorted(params.items()))


def train(train_patients: list[Patient], val_patients: list[Patient],
          vocab: CodeVocab, cfg: TrainConfig,
          ) -> tuple[dict[str, Array], ModelMeta, TrainLog]:
    """Train one model; returns the best-validation-loss parameters.

    Deterministic under cfg.seed: initialization, minibatch order, and the
    returned log depend only on the seed and inputs.
    """
    cfg.validate()
    if not train_patients or not val_patients:
        raise ValueError("train and validation sets must be non-empty")
    meta = resolve_meta(cfg, vocab.n_dx, vocab.n_tx)

    if cfg.task == "sdp":
        train_patients = [p for p in train_patients if len(p.visits) >= 2]
        val_patients = [p for p in val_patients if len(p.visits) >= 2]
        if not train_patients or not val_patients:
            raise ValueError("sdp task needs patients with at least 2 visits")

    started = time.perf_counter()
    prepared_train = prepare_patients(train_patients, vocab, meta.model_kind)
    prepared_val = prepare_patients(val_patients, vocab, meta.model_kind)
    need_labels = cfg.task == "hf"
    need_sdp = cfg.task == "sdp"

    params = build_params(meta, cfg.seed)
    state = adam_init(params, lr=cfg.lr)
    shuffle_rng = child_rng(cfg.seed, 3)

    best_val = dataset_task_loss(params, meta, prepared_val, vocab)
    best_params = {k: v.copy() for k, v in params.items()}
    best_iteration = 0

    log = TrainLog()
    window: list[float] = []
    iteration = 0
    n_train = len(prepared_train)

    def evaluate(it: int) -> None:
        nonlocal best_val, best_params, best_iteration
        val_loss = dataset_task_loss(params, meta, prepared_val, vocab)
        train_loss = float(np.mean(window)) if window else float("nan")
        window.clear()
        log.records.append((it, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = {k: v.copy() for k, v in params.items()}
            best_iteration = it

    while iteration < cfg.max_iterations:
        order = shuffle_rng.permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            if iteration >= cfg.max_iterations:
                break
            chosen = [prepared_train[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(chosen, vocab, meta.model_kind, need_labels, need_sdp)
            tape = Tape()
            leaves = {name: tape.leaf(val, name) for name, val in params.items()}
            loss, _ = batch_loss_node(tape, leaves, batch, meta, cfg.lambda_aux, cfg.l2)
            iteration += 1
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {iteration}; "
                    f"parameter norms: {_norm_report(params)}")
            tape.backward(loss)
            grads = tape.gradients(params.keys())
            params = adam_step(state, params, grads)
            window.append(float(loss.value))
            if iteration % cfg.eval_every == 0:
                evaluate(iteration)

    if cfg.max_iterations > 0 and cfg.max_iterations % cfg.eval_every != 0:
        evaluate(iteration)

    log.best_iteration = best_iteration
    log.wall_time_s = time.perf_counter() - started
    return best_params, meta, log
