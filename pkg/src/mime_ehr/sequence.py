"""GRU over visit embeddings plus the task heads that read its hidden state.

Standard gate equations with h_0 = 0:

    z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
    r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
    h~  = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
    h_t = (1 - z_t) * h_{t-1} + z_t * h~

The cell is shape-agnostic: a (d_in,) vector steps a single sequence, a
(B, d_in) matrix steps a whole minibatch.

Heads: a logistic unit on the final hidden state scores heart-failure risk; a
softmax layer on every intermediate hidden state predicts the Dx codes of the
next visit (sequential disease prediction).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Node, Tape
from .optim import ConfigurationError, glorot_uniform

Array = np.ndarray


def init_gru_params(d_in: int, d_h: int, rng: np.random.Generator) -> dict[str, Array]:
    params = {}
    for gate in ("z", "r", "h"):
        params[f"W_{gate}"] = glorot_uniform(rng, d_h, d_in)
        params[f"U_{gate}"] = glorot_uniform(rng, d_h, d_h)
        params[f"b_{gate}"] = np.zeros(d_h)
    return params


def count_params_gru(d_in: int, d_h: int) -> int:
    return 3 * (d_h * d_in + d_h * d_h + d_h)


def gru_cell(leaves: dict[str, Node], x: Node, h_prev: Node) -> Node:
    z = ad.sigmoid(ad.add(ad.linear(x, leaves["W_z"]),
                          ad.linear(h_prev, leaves["U_z"], leaves["b_z"])))
    r = ad.sigmoid(ad.add(ad.linear(x, leaves["W_r"]),
                          ad.linear(h_prev, leaves["U_r"], leaves["b_r"])))
    h_cand = ad.tanh(ad.add(ad.linear(x, leaves["W_h"]),
                            ad.linear(ad.mul(r, h_prev), leaves["U_h"], leaves["b_h"])))
    # h = h_prev + z * (h_cand - h_prev)  ==  (1 - z) h_prev + z h_cand
    return ad.add(h_prev, ad.mul(z, ad.sub(h_cand, h_prev)))


def gru_forward(tape: Tape, leaves: dict[str, Node], seq) -> list[Node]:
    """Run the GRU over a sequence of (d_in,) vectors; returns h_1..h_T."""
    if len(seq) == 0:
        raise ConfigurationError("gru_forward needs a non-empty sequence")
    d_in = leaves["W_z"].value.shape[1]
    d_h = leaves["W_z"].value.shape[0]
    hidden = []
    h = tape.constant(np.zeros(d_h), "h0")
    for x in seq:
        x_node = x if isinstance(x, Node) else tape.constant(x, "x_t")
        if x_node.value.shape[-1] != d_in:
            raise ConfigurationError(
                f"GRU input dim {x_node.value.shape[-1]} != configured {d_in}")
        h = gru_cell(leaves, x_node, h)
        hidden.append(h)
    return hidden


def init_hf_head(d_h: int, rng: np.random.Generator) -> dict[str, Array]:
    return {"hf_w": glorot_uniform(rng, 1, d_h)[0], "hf_b": np.zeros(())}


def hf_logit(leaves: dict[str, Node], h: Node) -> Node:
    """Raw score of the heart-failure head; works on (d_h,) or (B, d_h)."""
    return ad.add(ad.matmul(h, leaves["hf_w"]), leaves["hf_b"])


def predict_hf(leaves: dict[str, Node], h: Node) -> Array:
    """Probability of HF onset from the final hidden state."""
    return expit(hf_logit(leaves, h).value)


def init_sdp_head(n_dx: int, d_h: int, rng: np.random.Generator) -> dict[str, Array]:
    return {"U_s": glorot_uniform(rng, n_dx, d_h), "b_s": np.zeros(n_dx)}


def sdp_logits(leaves: dict[str, Node], h: Node) -> Node:
    return ad.linear(h, leaves["U_s"], leaves["b_s"])


def predict_sdp(leaves: dict[str, Node], hidden: list[Node]) -> list[Array]:
    """Next-visit Dx distributions from hidden states h_1..h_{T-1}.

    The caller passes all T hidden states; the last one has no next visit to
    predict, so a length-1 sequence yields an empty list.
    """
    return [ad.softmax(sdp_logits(leaves, h).value) for h in hidden[:-1]]
