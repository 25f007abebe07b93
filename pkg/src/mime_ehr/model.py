"""Full prediction models: visit encoder + GRU + task heads, batched.

The per-visit encoders in :mod:`mime` and :mod:`baselines` are the reference
implementations; this module runs the same math over a whole minibatch of
patients at once using index arrays and segment sums, which is what makes
training affordable.  The two routes agree exactly (tested), because batched
sums visit objects and treatments in the same canonical order.

A checkpoint is one JSON document: model metadata plus every parameter as
shape + row-major float list.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Node, Tape
from .baselines import (baseline_output_dim, encode_matrix_baseline,
                        init_baseline_params)
from .data import CodeVocab, Patient, flatten_visit
from .mime import init_mime_params
from .optim import child_rng
from .sequence import (gru_cell, hf_logit, init_gru_params, init_hf_head,
                       init_sdp_head, sdp_logits)

Array = np.ndarray

MODEL_KINDS = ("mime", "raw", "linear", "sigmoid", "tanh", "relu",
               "sigmoid_mlp", "tanh_mlp", "relu_mlp")


@dataclass
class ModelMeta:
    """Shape/record of one assembled model; everything a checkpoint needs."""

    model_kind: str
    task: str  # hf | sdp | both
    n_dx: int
    n_tx: int
    embed_dim: int       # baseline embedding width b (matching target for mime)
    z: int | None        # mime embedding width, None for baselines
    enc_dim: int         # visit-vector width fed to the GRU
    gru_hidden: int

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.task not in ("hf", "sdp", "both"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.model_kind == "mime" and (self.z is None or self.z < 1):
            raise ValueError("mime model needs z >= 1")


def build_params(meta: ModelMeta, seed: int) -> dict[str, Array]:
    """Initialize every trainable array for this model, deterministically."""
    meta.validate()
    rng = child_rng(seed, 2)
    if meta.model_kind == "mime":
        params = init_mime_params(meta.n_dx, meta.n_tx, meta.z, rng)
    else:
        params = init_baseline_params(meta.model_kind, meta.embed_dim,
                                      meta.n_dx, meta.n_tx, rng)
    params.update(init_gru_params(meta.enc_dim, meta.gru_hidden, rng))
    if meta.task in ("hf", "both"):
        params.update(init_hf_head(meta.gru_hidden, rng))
    if meta.task in ("sdp", "both"):
        params.update(init_sdp_head(meta.n_dx, meta.gru_hidden, rng))
    return params


def l2_param_names(params: dict[str, Array], include_embeddings: bool = False) -> list[str]:
    """Weight matrices subject to L2; biases and (by default) embedding
    tables stay out of the penalty."""
    names = []
    for k in params:
        if k in ("emb_dx", "emb_tx") and not include_embeddings:
            continue
        if k.startswith("b_") or k == "hf_b":
            continue
        names.append(k)
    return sorted(names)


def l2_penalty(leaves: dict[str, Node], coeff: float,
               include_embeddings: bool = False) -> Node | None:
    if coeff <= 0.0:
        return None
    total = None
    for name in l2_param_names({k: v.value for k, v in leaves.items()}, include_embeddings):
        w = leaves[name]
        term = ad.reduce_sum(ad.mul(w, w))
        total = term if total is None else ad.add(total, term)
    return None if total is None else ad.scale_shift(total, coeff)


# ---------------------------------------------------------------------------
# batch preparation

@dataclass
class PreparedPatient:
    """Index-array view of one patient, ready to concatenate into batches."""

    patient: Patient
    n_visits: int
    dx_idx: Array        # (n_obj,) Dx code per object, canonical order per visit
    obj_visit: Array     # (n_obj,) local visit index per object
    tx_idx: Array        # (n_tx_total,) treatment codes
    tx_owner: Array      # (n_tx_total,) local object index per treatment
    visit_dx_sets: list[Array]  # unique Dx codes per visit (for SDP targets)
    x_matrix: Array | None      # (n_visits, n_dx+n_tx) flattened visits


def prepare_patient(patient: Patient, vocab: CodeVocab, model_kind: str) -> PreparedPatient:
    dx_idx, obj_visit, tx_idx, tx_owner = [], [], [], []
    visit_dx_sets = []
    obj_counter = 0
    for t, visit in enumerate(patient.visits):
        ordered = sorted(visit.objects, key=lambda o: (o.dx, tuple(sorted(o.tx))))
        for obj in ordered:
            dx_idx.append(obj.dx)
            obj_visit.append(t)
            for tx in sorted(obj.tx):
                tx_idx.append(tx)
                tx_owner.append(obj_counter)
            obj_counter += 1
        visit_dx_sets.append(np.unique([o.dx for o in visit.objects]))
    x_matrix = None
    if model_kind != "mime":
        x_matrix = np.stack([flatten_visit(v, vocab) for v in patient.visits])
    return PreparedPatient(
        patient=patient,
        n_visits=len(patient.visits),
        dx_idx=np.asarray(dx_idx, dtype=np.intp),
        obj_visit=np.asarray(obj_visit, dtype=np.intp),
        tx_idx=np.asarray(tx_idx, dtype=np.intp),
        tx_owner=np.asarray(tx_owner, dtype=np.intp),
        visit_dx_sets=visit_dx_sets,
        x_matrix=x_matrix,
    )


def prepare_patients(patients: list[Patient], vocab: CodeVocab,
                     model_kind: str) -> list[PreparedPatient]:
    return [prepare_patient(p, vocab, model_kind) for p in patients]


@dataclass
class Batch:
    n_patients: int
    n_visits: int
    t_max: int
    seq_index: Array         # (B, t_max) row into stacked visits, n_visits pads
    seq_mask: Array          # (B, t_max) 1.0 while the sequence is alive
    labels: Array | None     # (B,) HF labels
    # mime fields
    dx_idx: Array | None
    obj_visit: Array | None
    tx_idx: Array | None
    tx_owner: Array | None
    n_obj: int
    # baseline field
    x_matrix: Array | None
    # sdp fields
    sdp_weights: Array | None   # (B, t_max-1): mask / (T_p - 1)
    sdp_targets: list[Array] | None  # per step (B, n_dx) distributions
    n_sdp_patients: int


def make_batch(prepared: list[PreparedPatient], vocab: CodeVocab, model_kind: str,
               need_labels: bool, need_sdp: bool) -> Batch:
    b = len(prepared)
    lengths = np.array([p.n_visits for p in prepared])
    t_max = int(lengths.max())
    n_visits = int(lengths.sum())

    seq_index = np.full((b, t_max), n_visits, dtype=np.intp)
    seq_mask = np.zeros((b, t_max))
    visit_offset = 0
    for i, p in enumerate(prepared):
        seq_index[i, :p.n_visits] = np.arange(visit_offset, visit_offset + p.n_visits)
        seq_mask[i, :p.n_visits] = 1.0
        visit_offset += p.n_visits

    labels = None
    if need_labels:
        raw = [p.patient.hf_label for p in prepared]
        for p, lab in zip(prepared, raw):
            if lab is None:
                raise ValueError(f"patient {p.patient.id!r} has no hf_label; "
                                 "cannot train/evaluate the hf task on it")
        labels = np.asarray(raw, dtype=np.float64)

    dx_idx = obj_visit = tx_idx = tx_owner = None
    x_matrix = None
    n_obj = 0
    if model_kind == "mime":
        dx_parts, ov_parts, tx_parts, town_parts = [], [], [], []
        visit_offset = 0
        obj_offset = 0
        for p in prepared:
            dx_parts.append(p.dx_idx)
            ov_parts.append(p.obj_visit + visit_offset)
            tx_parts.append(p.tx_idx)
            town_parts.append(p.tx_owner + obj_offset)
            visit_offset += p.n_visits
            obj_offset += p.dx_idx.shape[0]
        dx_idx = np.concatenate(dx_parts)
        obj_visit = np.concatenate(ov_parts)
        tx_idx = np.concatenate(tx_parts) if tx_parts else np.zeros(0, dtype=np.intp)
        tx_owner = np.concatenate(town_parts) if town_parts else np.zeros(0, dtype=np.intp)
        n_obj = int(obj_offset)
    else:
        x_matrix = np.concatenate([p.x_matrix for p in prepared], axis=0)

    sdp_weights = sdp_targets = None
    n_sdp = 0
    if need_sdp:
        n_dx = vocab.n_dx
        sdp_weights = np.zeros((b, max(t_max - 1, 0)))
        sdp_targets = [np.zeros((b, n_dx)) for _ in range(max(t_max - 1, 0))]
        for i, p in enumerate(prepared):
            if p.n_visits < 2:
                continue
            n_sdp += 1
            w = 1.0 / (p.n_visits - 1)
            for j in range(p.n_visits - 1):
                sdp_weights[i, j] = w
                codes = p.visit_dx_sets[j + 1]
                sdp_targets[j][i, codes] = 1.0 / codes.shape[0]

    return Batch(
        n_patients=b, n_visits=n_visits, t_max=t_max,
        seq_index=seq_index, seq_mask=seq_mask, labels=labels,
        dx_idx=dx_idx, obj_visit=obj_visit, tx_idx=tx_idx, tx_owner=tx_owner,
        n_obj=n_obj, x_matrix=x_matrix,
        sdp_weights=sdp_weights, sdp_targets=sdp_targets, n_sdp_patients=n_sdp,
    )


def tx_multihot(batch: Batch, n_tx: int) -> Array:
    """(n_obj, n_tx) 0/1 targets for the treatment auxiliary task."""
    out = np.zeros((batch.n_obj, n_tx))
    if batch.tx_idx.shape[0]:
        out[batch.tx_owner, batch.tx_idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# batched forward

def encode_batch(tape: Tape, leaves: dict[str, Node], batch: Batch,
                 meta: ModelMeta) -> tuple[Node, Node | None]:
    """Visit embeddings (n_visits, enc_dim); for mime also the per-object
    embeddings the auxiliary heads read."""
    if meta.model_kind != "mime":
        x = tape.constant(batch.x_matrix, "x_visits")
        return encode_matrix_baseline(leaves, meta.model_kind, x), None

    r_d = ad.gather_rows(leaves["emb_dx"], batch.dx_idx)
    gate = ad.relu(ad.linear(r_d, leaves["W_m"]))
    if batch.tx_idx.shape[0]:
        r_m = ad.gather_rows(leaves["emb_tx"], batch.tx_idx)
        g = ad.mul(ad.gather_rows(gate, batch.tx_owner), r_m)
        g_sum = ad.segment_sum(g, batch.tx_owner, batch.n_obj)
    else:
        g_sum = tape.constant(np.zeros((batch.n_obj, meta.z)), "g_zero")
    big_g = ad.add(r_d, g_sum)
    o = ad.add(ad.relu(ad.linear(big_g, leaves["W_o"], leaves["b_o"])), big_g)
    f = ad.segment_sum(o, batch.obj_visit, batch.n_visits)
    v = ad.add(ad.sigmoid(ad.linear(f, leaves["W_v"], leaves["b_v"])), f)
    return v, o


def run_sequence(tape: Tape, leaves: dict[str, Node], visits_node: Node,
                 batch: Batch, meta: ModelMeta) -> tuple[Node, list[Node]]:
    """Masked GRU over padded visit sequences.

    Returns the final hidden state per patient (frozen once a sequence ends)
    and the hidden state after every step.
    """
    v_pad = ad.pad_zero_row(visits_node)
    h = tape.constant(np.zeros((batch.n_patients, meta.gru_hidden)), "h0")
    hidden = []
    for t in range(batch.t_max):
        x_t = ad.gather_rows(v_pad, batch.seq_index[:, t])
        h_new = gru_cell(leaves, x_t, h)
        mask = tape.constant(batch.seq_mask[:, t][:, None])
        h = ad.add(h, ad.mul(mask, ad.sub(h_new, h)))
        hidden.append(h)
    return h, hidden


def hf_loss_node(leaves: dict[str, Node], h_last: Node, batch: Batch) -> tuple[Node, Node]:
    """(mean binary cross-entropy, raw logits) for the HF head."""
    logits = hf_logit(leaves, h_last)
    ce = ad.sigmoid_ce(logits, batch.labels)
    return ad.reduce_mean(ce), logits


def sdp_loss_node(tape: Tape, leaves: dict[str, Node], hidden: list[Node],
                  batch: Batch) -> Node | None:
    """Mean over patients of the per-step-averaged next-visit cross-entropy.

    Patients with a single visit have nothing to predict and drop out of the
    mean; returns None when nobody in the batch has two visits.
    """
    if batch.n_sdp_patients == 0:
        return None
    total = None
    for j in range(batch.t_max - 1):
        w = batch.sdp_weights[:, j]
        if not w.any():
            continue
        ce = ad.softmax_ce(sdp_logits(leaves, hidden[j]), batch.sdp_targets[j])
        term = ad.reduce_sum(ad.mul(ce, tape.constant(w)))
        total = term if total is None else ad.add(total, term)
    return ad.scale_shift(total, 1.0 / batch.n_sdp_patients)


def aux_loss_node(leaves: dict[str, Node], o_nodes: Node, batch: Batch,
                  meta: ModelMeta, lambda_aux: float) -> Node:
    """Auxiliary code-prediction loss, averaged over the batch's patients.

    Per object: softmax cross-entropy against its own Dx code plus multi-hot
    sigmoid cross-entropy over all treatment codes (objects without
    treatments still pay the all-negative term).
    """
    dx_logits = ad.linear(o_nodes, leaves["U_d"], leaves["b_d"])
    tx_logits = ad.linear(o_nodes, leaves["U_m"], leaves["b_m"])
    dx_ce = ad.softmax_ce(dx_logits, ad.onehot(batch.dx_idx, meta.n_dx))
    tx_ce = ad.sigmoid_ce(tx_logits, tx_multihot(batch, meta.n_tx))
    total = ad.add(ad.reduce_sum(dx_ce), ad.reduce_sum(tx_ce))
    return ad.scale_shift(total, lambda_aux / batch.n_patients)


# ---------------------------------------------------------------------------
# inference helpers (tape values only, no backward)

def _forward_chunk(params: dict[str, Array], meta: ModelMeta,
                   prepared: list[PreparedPatient], vocab: CodeVocab,
                   need_labels: bool, need_sdp: bool):
    tape = Tape()
    leaves = {name: tape.leaf(val, name) for name, val in params.items()}
    batch = make_batch(prepared, vocab, meta.model_kind, need_labels, need_sdp)
    visits_node, _ = encode_batch(tape, leaves, batch, meta)
    h_last, hidden = run_sequence(tape, leaves, visits_node, batch, meta)
    return tape, leaves, batch, h_last, hidden


def predict_hf_scores(params: dict[str, Array], meta: ModelMeta,
                      patients: list[Patient], vocab: CodeVocab,
                      chunk: int = 128) -> tuple[Array, float]:
    """HF probabilities for every patient plus the mean test cross-entropy."""
    prepared = prepare_patients(patients, vocab, meta.model_kind)
    scores = np.zeros(len(patients))
    loss_sum = 0.0
    for start in range(0, len(prepared), chunk):
        part = prepared[start:start + chunk]
        _, leaves, batch, h_last, _ = _forward_chunk(params, meta, part, vocab,
                                                     need_labels=True, need_sdp=False)
        loss, logits = hf_loss_node(leaves, h_last, batch)
        scores[start:start + len(part)] = expit(logits.value)
        loss_sum += float(loss.value) * len(part)
    return scores, loss_sum / max(1, len(patients))


def predict_sdp_dists(params: dict[str, Array], meta: ModelMeta,
                      patients: list[Patient], vocab: CodeVocab,
                      chunk: int = 64) -> tuple[list[Array], list[list[Array]], float]:
    """Per patient: (T-1, n_dx) next-visit distributions, the matching true
    Dx-code sets, and the mean sequential-prediction loss."""
    prepared = prepare_patients(patients, vocab, meta.model_kind)
    dists: list[Array] = []
    truths: list[list[Array]] = []
    loss_sum = 0.0
    n_sdp_total = 0
    for start in range(0, len(prepared), chunk):
        part = prepared[start:start + chunk]
        tape, leaves, batch, _, hidden = _forward_chunk(params, meta, part, vocab,
                                                        need_labels=False, need_sdp=True)
        step_probs = [ad.softmax(sdp_logits(leaves, hidden[j]).value, axis=1)
                      for j in range(batch.t_max - 1)]
        loss = sdp_loss_node(tape, leaves, hidden, batch)
        if loss is not None:
            loss_sum += float(loss.value) * batch.n_sdp_patients
            n_sdp_total += batch.n_sdp_patients
        for i, p in enumerate(part):
            t = p.n_visits
            if t < 2:
                dists.append(np.zeros((0, meta.n_dx)))
                truths.append([])
                continue
            dists.append(np.stack([step_probs[j][i] for j in range(t - 1)]))
            truths.append([p.visit_dx_sets[j + 1] for j in range(t - 1)])
    mean_loss = loss_sum / n_sdp_total if n_sdp_total else float("nan")
    return dists, truths, mean_loss


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: dict[str, Array], meta: ModelMeta) -> None:
    doc = {
        "meta": asdict(meta),
        "params": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                   for name, arr in sorted(params.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, Array], ModelMeta]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    meta = ModelMeta(**doc["meta"])
    meta.validate()
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return params, meta
