"""Bias-corrected Adam over named parameter dicts, plus global-norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(t=0,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One update; mutates params/state in place and returns them.

    p -= lr * m_hat / (sqrt(v_hat) + eps) with the standard bias correction
    m_hat = m / (1 - beta1^t), v_hat = v / (1 - beta2^t).
    """
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return params, state


def global_norm(grads) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_global_norm(grads, cap: float) -> float:
    """Scale all gradients so their joint L2 norm is at most cap."""
    norm = global_norm(grads)
    if norm > cap:
        scale = cap / norm
        for g in grads.values():
            g *= scale
    return norm
