"""Spatially correlated integer fields for training and tests.

Each channel is a separable first-order Gauss-Markov field: unit-variance
AR(1) along rows, then along columns, so horizontally and vertically adjacent
cells have correlation ``rho``. The field is scaled by ``sigma`` and rounded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .grid import TokenGrid


def gauss_markov_field(shape, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance field with shape (..., h, w), stationary from the first cell."""
    *lead, h, w = shape
    x = rng.standard_normal(shape)
    innov = np.sqrt(1.0 - rho * rho)
    for axis in (-1, -2):
        x = np.moveaxis(x, axis, -1)
        first = x[..., :1]
        rest = lfilter([innov], [1.0, -rho], x[..., 1:], axis=-1, zi=rho * first * np.ones(1))[0]
        x = np.moveaxis(np.concatenate([first, rest], axis=-1), -1, axis)
    return x


@dataclass
class GaussMarkovSource:
    c: int = 2
    w_T: int = 16
    rho: float = 0.9
    sigma: float = 3.0
    # per-channel scale multipliers; channel k gets sigma * decay**k
    decay: float = 0.7

    def field(self, n: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
        f = gauss_markov_field((n, self.c, h, w), self.rho, rng)
        scale = self.sigma * self.decay ** np.arange(self.c)
        return np.rint(f * scale[None, :, None, None]).astype(np.int64).transpose(0, 2, 3, 1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` tiles of shape (w_T, w_T, c)."""
        return self.field(n, self.w_T, self.w_T, rng)

    def grid(self, h: int, w: int, rng: np.random.Generator) -> TokenGrid:
        return TokenGrid(self.field(1, h, w, rng)[0])
