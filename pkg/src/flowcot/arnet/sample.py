"""Deterministic next-token selection."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def sample_next(logit_row: np.ndarray, temperature: float,
                rng_seed: int = 0) -> int:
    """Greedy argmax at temperature 0 (ties to the lowest index), otherwise
    a softmax draw from a counter-based generator keyed by rng_seed."""
    if temperature < 0:
        raise ConfigError("temperature must be >= 0")
    row = np.asarray(logit_row, dtype=np.float64)
    if temperature == 0:
        return int(np.argmax(row))
    z = row / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    u = np.random.Generator(
        np.random.Philox(key=rng_seed & ((1 << 64) - 1))).random()
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, u, side="right"), row.size - 1))
