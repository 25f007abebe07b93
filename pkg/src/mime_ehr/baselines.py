"""Flattened-visit embedders: every visit becomes a multi-hot code vector.

Eight kinds: ``raw`` feeds the binary vector straight to the sequence model;
``linear`` projects it; ``sigmoid``/``tanh``/``relu`` add a nonlinearity; the
``*_mlp`` variants stack a second square layer.  All of them are blind to
which treatment was ordered for which diagnosis — restructuring a visit
without changing its code set cannot change their output.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .data import CodeVocab, Visit, flatten_visit
from .optim import glorot_uniform

Array = np.ndarray

BASELINE_KINDS = ("raw", "linear", "sigmoid", "tanh", "relu",
                  "sigmoid_mlp", "tanh_mlp", "relu_mlp")


def _check_kind(kind: str) -> None:
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")


def baseline_output_dim(kind: str, b: int, n_dx: int, n_tx: int) -> int:
    _check_kind(kind)
    return n_dx + n_tx if kind == "raw" else b


def init_baseline_params(kind: str, b: int, n_dx: int, n_tx: int,
                         rng: np.random.Generator) -> dict[str, Array]:
    _check_kind(kind)
    if kind == "raw":
        return {}
    params = {"W_x1": glorot_uniform(rng, b, n_dx + n_tx), "b_x1": np.zeros(b)}
    if kind.endswith("_mlp"):
        params["W_x2"] = glorot_uniform(rng, b, b)
        params["b_x2"] = np.zeros(b)
    return params


def count_params_baseline(kind: str, b: int, n_dx: int, n_tx: int) -> int:
    _check_kind(kind)
    if kind == "raw":
        return 0
    count = b * (n_dx + n_tx) + b
    if kind.endswith("_mlp"):
        count += b * b + b
    return count


def encode_visit_baseline(tape, tape_leaves: dict[str, Node], kind: str, visit: Visit,
                          vocab: CodeVocab) -> Node:
    """Embed one visit from its flattened binary vector."""
    _check_kind(kind)
    x = flatten_visit(visit, vocab)
    if kind == "raw":
        return tape.constant(x, "x_raw")
    h = ad.linear(tape.constant(x, "x"), tape_leaves["W_x1"], tape_leaves["b_x1"])
    act = kind.split("_")[0]
    if act != "linear":
        h = ad.activation(act, h)
    if kind.endswith("_mlp"):
        h = ad.activation(act, ad.linear(h, tape_leaves["W_x2"], tape_leaves["b_x2"]))
    return h


def encode_matrix_baseline(tape_leaves: dict[str, Node], kind: str, x_matrix: Node) -> Node:
    """Batched form of encode_visit_baseline over stacked flattened visits."""
    _check_kind(kind)
    if kind == "raw":
        return x_matrix
    h = ad.linear(x_matrix, tape_leaves["W_x1"], tape_leaves["b_x1"])
    act = kind.split("_")[0]
    if act != "linear":
        h = ad.activation(act, h)
    if kind.endswith("_mlp"):
        h = ad.activation(act, ad.linear(h, tape_leaves["W_x2"], tape_leaves["b_x2"]))
    return h
