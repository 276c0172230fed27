"""Gaussian-mixture likelihoods binned to integer PMFs, with a Laplace tail.

P(y) = (1 - eps) * [G(y + 1/2) - G(y - 1/2)] + eps * [L(y + 1/2) - L(y - 1/2)]

where G is the mixture CDF and L the CDF of a unit-scale Laplace centred on
the mixture's weighted mean. The numpy functions drive entropy coding; the
``*_torch`` variants are the differentiable training path and must agree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import ndtr

TAIL_EPS = 1e-3
SIGMA_MIN = 0.01
SIGMA_MAX = 256.0
N_MIXTURES = 3


@dataclass(frozen=True)
class GmmParams:
    """Mixture parameters with shape (..., c, N_M) per field."""

    means: np.ndarray
    scales: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        for name in ("means", "scales", "weights"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.means.shape == self.scales.shape == self.weights.shape):
            raise ValueError("means, scales and weights must share a shape")

    @classmethod
    def single(cls, mu: float = 0.0, sigma: float = 1.0, n_mixtures: int = N_MIXTURES) -> "GmmParams":
        """One active component (weight 1) at (mu, sigma) for a single channel."""
        w = np.zeros(n_mixtures)
        w[0] = 1.0
        return cls(np.full(n_mixtures, float(mu)), np.full(n_mixtures, float(sigma)), w)

    @property
    def n_mixtures(self) -> int:
        return self.means.shape[-1]

    def validate(self, sigma_min: float = SIGMA_MIN) -> None:
        if np.any(self.scales < sigma_min * (1 - 1e-9)):
            raise ValueError(f"scales below sigma_min={sigma_min}")
        if np.any(self.weights < 0) or np.any(np.abs(self.weights.sum(-1) - 1) > 1e-6):
            raise ValueError("weights must lie on the simplex")

    def __getitem__(self, idx) -> "GmmParams":
        return GmmParams(self.means[idx], self.scales[idx], self.weights[idx])

    def mean(self) -> np.ndarray:
        return (self.weights * self.means).sum(-1)


def gmm_cdf(params: GmmParams, x) -> np.ndarray:
    """Mixture CDF at x; x broadcasts against the leading (non-mixture) dims."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    return (params.weights * ndtr((x - params.means) / params.scales)).sum(-1)


def laplace_cdf(x, loc, scale: float = 1.0) -> np.ndarray:
    z = (np.asarray(x, dtype=np.float64) - loc) / scale
    return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))


def _bin_masses(z: np.ndarray, tail: np.ndarray) -> np.ndarray:
    """Bin masses from standardized edges z (..., K+1) given tail(z) = P(Z > |z|).

    Bins entirely above the centre use survival differences so that the upper
    tail keeps its relative precision (mirroring what the CDF does below).
    """
    cdf = np.where(z < 0, tail, 1.0 - tail)
    return np.where(z[..., :-1] > 0, tail[..., :-1] - tail[..., 1:], cdf[..., 1:] - cdf[..., :-1])


def _gauss_tail(z):
    return ndtr(-np.abs(z))


def _laplace_tail(z):
    return 0.5 * np.exp(-np.abs(z))


def _binned(params: GmmParams, edges: np.ndarray, eps: float) -> np.ndarray:
    """P over consecutive bins [edges[j], edges[j+1]); edges (..., K+1) broadcast with params[..., :]."""
    z = (edges[..., None] - params.means[..., None, :]) / params.scales[..., None, :]
    comp = _bin_masses(np.moveaxis(z, -1, -2), _gauss_tail(np.moveaxis(z, -1, -2)))
    gmm = (params.weights[..., :, None] * comp).sum(-2)
    t = edges - params.mean()[..., None]
    lap = _bin_masses(t, _laplace_tail(t))
    return (1.0 - eps) * gmm + eps * lap


def bin_pmf(params: GmmParams, y, eps: float = TAIL_EPS) -> np.ndarray:
    """P(y): mixture mass on [y - 1/2, y + 1/2] blended with a unit Laplace tail."""
    y = np.asarray(y, dtype=np.float64)
    edges = np.stack([y - 0.5, y + 0.5], axis=-1)
    return _binned(params, edges, eps)[..., 0]


def pmf_table(params: GmmParams, lo: int, hi: int, eps: float = TAIL_EPS) -> np.ndarray:
    """P(y) for y = lo..hi; output shape (..., hi - lo + 1)."""
    edges = np.arange(lo, hi + 2, dtype=np.float64) - 0.5
    return _binned(params, np.broadcast_to(edges, params.means.shape[:-1] + edges.shape), eps)


@dataclass(frozen=True)
class BinnedPmf:
    lo: int
    hi: int
    probs: np.ndarray
    tail_eps: float = TAIL_EPS

    @classmethod
    def from_params(cls, params: GmmParams, lo: int, hi: int, eps: float = TAIL_EPS) -> "BinnedPmf":
        return cls(lo, hi, pmf_table(params, lo, hi, eps), eps)


def quantize_pmf(pmf, precision: int = 16) -> np.ndarray:
    """Integer frequencies (>= 1, summing to 2**precision) by largest remainder.

    Accepts a BinnedPmf or an array of probabilities; batched over leading
    dims. One count per symbol is reserved up front, the rest is apportioned
    from the normalized probabilities, ties going to the lower symbol.
    """
    probs = pmf.probs if isinstance(pmf, BinnedPmf) else pmf
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ValueError("empty support")
    if not 8 <= precision <= 16:
        raise ValueError(f"precision must be in [8, 16], got {precision}")
    n = p.shape[-1]
    total = 1 << precision
    if n > total:
        raise ValueError(f"support of {n} symbols exceeds 2**{precision}")
    p = np.where(np.isfinite(p) & (p > 0), p, 0.0)
    mass = p.sum(-1, keepdims=True)
    p = np.where(mass > 0, p / np.where(mass > 0, mass, 1.0), 1.0 / n)
    budget = total - n
    scaled = p * budget
    base = np.floor(scaled)
    frac = scaled - base
    left = budget - base.sum(-1, keepdims=True).astype(np.int64)
    rank = np.argsort(np.argsort(-frac, axis=-1, kind="stable"), axis=-1, kind="stable")
    freq = base.astype(np.int64) + 1 + (rank < left)
    return freq


def token_entropy(params: GmmParams, support: tuple[int, int], eps: float = TAIL_EPS) -> np.ndarray:
    """Entropy in bits of each token (summed over its channels) under the binned PMF.

    ``params`` has shape (..., c, N_M); the result has shape (...).
    """
    lo, hi = support
    p = pmf_table(params, lo, hi, eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(p > 0, -p * np.log2(p), 0.0)
    return h.sum(-1).sum(-1)


# -- differentiable path -----------------------------------------------------

def _std_normal_cdf_torch(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def laplace_cdf_torch(x: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    z = x - loc
    return torch.where(z < 0, 0.5 * torch.exp(torch.clamp(z, max=0.0)), 1.0 - 0.5 * torch.exp(-torch.clamp(z, min=0.0)))


def bin_pmf_torch(means, scales, weights, y, eps: float = TAIL_EPS) -> torch.Tensor:
    """Torch twin of ``bin_pmf``; params (..., N_M), y (...)."""
    yy = y.unsqueeze(-1)
    hi = (yy + 0.5 - means) / scales
    lo = (yy - 0.5 - means) / scales
    upper_tail = lo > 0
    comp = torch.where(
        upper_tail,
        _std_normal_cdf_torch(-lo) - _std_normal_cdf_torch(-hi),
        _std_normal_cdf_torch(hi) - _std_normal_cdf_torch(lo),
    )
    gmm = (weights * comp).sum(-1)
    loc = (weights * means).sum(-1)
    lap = laplace_cdf_torch(y + 0.5, loc) - laplace_cdf_torch(y - 0.5, loc)
    return (1.0 - eps) * gmm + eps * lap
