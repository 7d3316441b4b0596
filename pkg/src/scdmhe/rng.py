"""Deterministic random numbers for reproducible experiments.

The generator is pinned by name so independent implementations can reproduce
the exact noise streams from a config file:

* bit source: Philox (4x64, counter-based), keyed with a 64-bit seed;
* per-trial seeds: ``(base_seed + index * GOLDEN_GAMMA) mod 2**64``;
* uniforms: 53-bit mantissa mapping ``u = (x >> 11) * 2**-53`` from raw
  64-bit words (``u1`` shifted into (0, 1] for the logarithm);
* Gaussians: Box-Muller pairs, consumed per vector draw with the unused
  second element of an odd draw discarded (no state carried across calls);
* multivariate draws: lower Cholesky factor times an iid standard block.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ScdMheError

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_TWO64 = 1 << 64
_INV_2_53 = 2.0 ** -53


def mix_seed(base_seed, trial_index):
    """Per-trial seed: fixed golden-ratio increment, wrapping at 2^64."""
    return (int(base_seed) + int(trial_index) * GOLDEN_GAMMA) % _TWO64


class GaussianStream:
    """Box-Muller Gaussians over a Philox bit stream."""

    def __init__(self, seed):
        self._gen = np.random.Generator(np.random.Philox(key=int(seed) % _TWO64))

    def _uniform_words(self, count):
        return self._gen.integers(0, _TWO64, size=count, dtype=np.uint64,
                                  endpoint=False)

    def standard_normal(self, size):
        """iid N(0, 1) draws; consumes ceil(size / 2) Box-Muller pairs."""
        pairs = (size + 1) // 2
        words = self._uniform_words(2 * pairs)
        u1 = ((words[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (words[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:size]

    def multivariate_normal(self, cov_factor):
        """One draw of L @ z with z iid standard normal; ``cov_factor`` is a
        lower-triangular factor of the covariance (zero matrix allowed)."""
        n = cov_factor.shape[0]
        return cov_factor @ self.standard_normal(n)


def covariance_factor(cov):
    """Lower Cholesky factor, with an all-zero covariance mapped to the zero
    factor so noise-free simulations work."""
    cov = np.asarray(cov, dtype=float)
    if not np.any(cov):
        return np.zeros_like(cov)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ScdMheError(
            "covariance is not positive semidefinite; cannot draw noise"
        ) from None
