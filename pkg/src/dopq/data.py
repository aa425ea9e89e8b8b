"""Seeded synthetic corpora: softmax rows, post-LayerNorm channels, token sequences."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .toyvit import softmax


def softmax_rows(rows: int, n: int, sigma: float = 3.0, seed: int = 0) -> np.ndarray:
    """``rows`` softmax vectors of length ``n`` over N(0, sigma^2) logits."""
    if rows < 1 or n < 1:
        raise ConfigError("rows", "rows and n must be positive")
    if sigma < 0:
        raise ConfigError("sigma", "sigma must be non-negative")
    rng = np.random.default_rng(seed)
    return softmax(rng.normal(0.0, 1.0, (rows, n)) * sigma)


def postln_channels(tokens: int, channels: int, seed: int = 0, scale_sigma: float = 0.5,
                    outliers: int = 2, outlier_factor: float = 50.0) -> np.ndarray:
    """Gaussian channels with log-normal per-channel scales; a few channels scaled by ``outlier_factor``."""
    if tokens < 1 or channels < 1:
        raise ConfigError("tokens", "tokens and channels must be positive")
    if not 0 <= outliers <= channels:
        raise ConfigError("outliers", f"outlier count must lie in [0, {channels}]")
    rng = np.random.default_rng(seed)
    scales = rng.lognormal(0.0, scale_sigma, channels)
    scales[rng.choice(channels, outliers, replace=False)] *= outlier_factor
    return rng.normal(0.0, 1.0, (tokens, channels)) * scales


def token_sequences(count: int, n: int, d: int, seed: int = 0) -> np.ndarray:
    """``count`` sequences of ``n`` tokens with ``d`` standard-normal features."""
    if count < 1 or n < 1 or d < 1:
        raise ConfigError("count", "count, n and d must be positive")
    return np.random.default_rng(seed).normal(0.0, 1.0, (count, n, d))
