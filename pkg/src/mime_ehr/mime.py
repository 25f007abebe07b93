"""Multilevel visit encoder: treatments gate diagnoses, diagnoses sum to visits.

Three levels, bottom up:

* interaction   g(d, m) = relu(W_m r(d)) * r(m)      (Hadamard gating)
* Dx object     o = relu(W_o G + b_o) + G,   G = r(d) + sum_j g(d, m_j)
* visit         v = sigmoid(W_v F + b_v) + F, F = sum_i o_i

The inner activations are ReLU; the visit-level one is sigmoid, whose bounded
output regularizes the representation.  F and G ride skip connections, so
with zeroed weights the encoder degenerates to plain sums of embeddings.
W_m carries no bias: that keeps r(d)=0 implying g=0 exactly.

Each Dx object also emits auxiliary logits predicting its own Dx code
(softmax over all Dx codes) and its attached treatments (independent sigmoid
per treatment code); training on those targets needs no external labels.

Sums over objects and over treatments are evaluated in a canonical order
(sorted by code indices), which makes visit embeddings exactly invariant,
bit for bit, under any permutation of the input lists.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Node, Tape
from .data import DxObject, Visit
from .optim import embedding_uniform, glorot_uniform

Array = np.ndarray


def init_mime_params(n_dx: int, n_tx: int, z: int, rng: np.random.Generator) -> dict[str, Array]:
    if z < 1:
        raise ValueError("embedding size z must be >= 1")
    return {
        "emb_dx": embedding_uniform(rng, n_dx, z),
        "emb_tx": embedding_uniform(rng, n_tx, z),
        "W_m": glorot_uniform(rng, z, z),
        "W_o": glorot_uniform(rng, z, z),
        "b_o": np.zeros(z),
        "W_v": glorot_uniform(rng, z, z),
        "b_v": np.zeros(z),
        "U_d": glorot_uniform(rng, n_dx, z),
        "b_d": np.zeros(n_dx),
        "U_m": glorot_uniform(rng, n_tx, z),
        "b_m": np.zeros(n_tx),
    }


def count_params(z: int, n_dx: int, n_tx: int) -> int:
    """Exact number of trainable scalars in the visit encoder (sequence model
    excluded)."""
    emb = n_dx * z + n_tx * z
    gate = z * z
    obj_layer = z * z + z
    visit_layer = z * z + z
    aux_dx = n_dx * z + n_dx
    aux_tx = n_tx * z + n_tx
    return emb + gate + obj_layer + visit_layer + aux_dx + aux_tx


def _canonical_objects(visit: Visit) -> list[DxObject]:
    return sorted(visit.objects, key=lambda o: (o.dx, tuple(sorted(o.tx))))


def interact(tape_leaves: dict[str, Node], dx: int, tx: int) -> Node:
    """Interaction embedding of one (Dx, treatment) pair."""
    emb_dx, emb_tx = tape_leaves["emb_dx"], tape_leaves["emb_tx"]
    r_d = ad.gather_rows(emb_dx, np.array([dx]))
    r_m = ad.gather_rows(emb_tx, np.array([tx]))
    gate = ad.relu(ad.linear(r_d, tape_leaves["W_m"]))
    return ad.reduce_sum(ad.mul(gate, r_m), axis=0)


def encode_object(tape_leaves: dict[str, Node], obj: DxObject) -> Node:
    """Dx object embedding: gated treatment sum plus skip-connected ReLU layer."""
    emb_dx = tape_leaves["emb_dx"]
    r_d = ad.reduce_sum(ad.gather_rows(emb_dx, np.array([obj.dx])), axis=0)
    if obj.tx:
        g_total = None
        for t in sorted(obj.tx):
            g = interact(tape_leaves, obj.dx, t)
            g_total = g if g_total is None else ad.add(g_total, g)
        big_g = ad.add(r_d, g_total)
    else:
        big_g = ad.add(r_d, ad.scale_shift(r_d, 0.0))
    hidden = ad.relu(ad.linear(big_g, tape_leaves["W_o"], tape_leaves["b_o"]))
    return ad.add(hidden, big_g)


@dataclass
class VisitEncoding:
    v: Node
    o_list: list[Node]
    aux_dx_logits: list[Node]
    aux_tx_logits: list[Node]


def encode_visit(tape_leaves: dict[str, Node], visit: Visit) -> VisitEncoding:
    """Visit embedding plus per-object auxiliary logits.

    o_list follows the input object order; the sum over objects runs in
    canonical order so v does not depend on how the visit was listed.
    """
    o_nodes = {id(obj): encode_object(tape_leaves, obj) for obj in visit.objects}
    f_total = None
    for obj in _canonical_objects(visit):
        o = o_nodes[id(obj)]
        f_total = o if f_total is None else ad.add(f_total, o)
    hidden = ad.sigmoid(ad.linear(f_total, tape_leaves["W_v"], tape_leaves["b_v"]))
    v = ad.add(hidden, f_total)

    o_list = [o_nodes[id(obj)] for obj in visit.objects]
    aux_dx = [ad.linear(o, tape_leaves["U_d"], tape_leaves["b_d"]) for o in o_list]
    aux_tx = [ad.linear(o, tape_leaves["U_m"], tape_leaves["b_m"]) for o in o_list]
    return VisitEncoding(v, o_list, aux_dx, aux_tx)


def aux_predictions(enc: VisitEncoding) -> tuple[list[Array], list[Array]]:
    """Per-object probabilities: softmax over Dx codes, independent sigmoid
    per treatment code."""
    dx_probs = [ad.softmax(node.value) for node in enc.aux_dx_logits]
    tx_probs = [expit(node.value) for node in enc.aux_tx_logits]
    return dx_probs, tx_probs


def leaves_for(tape: Tape, params: dict[str, Array]) -> dict[str, Node]:
    """Register every parameter as a named leaf on a fresh tape."""
    return {name: tape.leaf(val, name) for name, val in params.items()}
