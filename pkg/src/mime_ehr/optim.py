"""Adam optimizer, seeded random streams, and parameter initializers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

Array = np.ndarray


class ConfigurationError(ValueError):
    """Shapes or settings inconsistent with the model being optimized."""


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream: same seed, same draws, every run."""
    return np.random.default_rng(seed)


def child_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent substream derived from (seed, *key); reproducible and
    safe to hand to parallel workers."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key)))


def child_seed(seed: int, *key: int) -> int:
    """64-bit integer seed derived from (seed, *key)."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int) -> Array:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def embedding_uniform(rng: np.random.Generator, n_rows: int, dim: int,
                      scale: float = 0.05) -> Array:
    return rng.uniform(-scale, scale, size=(n_rows, dim))


@dataclass
class AdamState:
    """First/second moment accumulators for one named parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)


def adam_init(params: Mapping[str, Array], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = {k: np.zeros_like(p) for k, p in params.items()}
    state.v = {k: np.zeros_like(p) for k, p in params.items()}
    return state


def adam_step(state: AdamState, params: Mapping[str, Array],
              grads: Mapping[str, Array]) -> dict[str, Array]:
    """One bias-corrected Adam update; returns the new parameter dict.

    ``grads`` must cover exactly the parameters in ``params`` with matching
    shapes; anything else is a configuration error, not a recoverable one.
    """
    if set(params.keys()) != set(state.m.keys()):
        raise ConfigurationError("parameter names do not match optimizer state")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    out = {}
    for name, p in params.items():
        try:
            g = grads[name]
        except KeyError:
            raise ConfigurationError(f"missing gradient for parameter {name!r}") from None
        if g.shape != p.shape:
            raise ConfigurationError(
                f"gradient shape {g.shape} does not match parameter {name!r} shape {p.shape}")
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        out[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out
