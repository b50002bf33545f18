"""Goodness of fit of candidate distributions to tensor magnitudes.

The residual sum of squares (RSS) compares the density-normalized histogram
of ``|t|`` (nonzero entries) against each fitted density evaluated at the bin
centers.  Parameters are maximum-likelihood estimates on the same magnitudes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ._validation import nonzero_magnitudes
from .errors import DegenerateTensor

DISTRIBUTIONS = ("normal", "exponential", "pareto", "uniform")
DEFAULT_BINS = 100


class StartTensor(str, enum.Enum):
    ACTIVATIONS = "activations"
    WEIGHTS = "weights"


@dataclass(frozen=True)
class HistogramFit:
    bin_edges: np.ndarray
    density: np.ndarray
    fitted: dict  # name -> (params dict, rss)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])

    def rss(self, dist: str) -> float:
        return self.fitted[dist][1]

    def ranking(self) -> list[str]:
        """Distribution names sorted by ascending RSS (ties keep canonical order)."""
        return sorted(self.fitted, key=lambda d: (self.fitted[d][1], DISTRIBUTIONS.index(d)))

    @property
    def best(self) -> str:
        return self.ranking()[0]


def _magnitudes(t) -> np.ndarray:
    mags = nonzero_magnitudes(t)
    if np.unique(mags).size < 2:
        raise DegenerateTensor("need at least two distinct nonzero magnitudes")
    return mags


def mle_params(mags: np.ndarray, dist: str) -> dict:
    if dist == "exponential":
        return {"rate": 1.0 / float(mags.mean())}
    if dist == "normal":
        return {"mean": float(mags.mean()), "std": float(mags.std())}
    if dist == "uniform":
        return {"low": float(mags.min()), "high": float(mags.max())}
    if dist == "pareto":
        xm = float(mags.min())
        return {"xm": xm, "shape": mags.size / float(np.log(mags / xm).sum())}
    raise ValueError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")


def density(dist: str, params: dict, x: np.ndarray) -> np.ndarray:
    if dist == "exponential":
        return stats.expon.pdf(x, scale=1.0 / params["rate"])
    if dist == "normal":
        return stats.norm.pdf(x, loc=params["mean"], scale=params["std"])
    if dist == "uniform":
        return stats.uniform.pdf(x, loc=params["low"], scale=params["high"] - params["low"])
    if dist == "pareto":
        return stats.pareto.pdf(x, params["shape"], scale=params["xm"])
    raise ValueError(f"unknown distribution {dist!r}; expected one of {DISTRIBUTIONS}")


def histogram(mags: np.ndarray, bins: int = DEFAULT_BINS) -> tuple[np.ndarray, np.ndarray]:
    if bins < 1:
        raise ValueError("bins must be positive")
    dens, edges = np.histogram(mags, bins=bins, range=(mags.min(), mags.max()), density=True)
    return edges, dens


def fit_rss(t, dist: str, bins: int = DEFAULT_BINS) -> tuple[dict, float]:
    mags = _magnitudes(t)
    edges, dens = histogram(mags, bins)
    params = mle_params(mags, dist)
    centers = 0.5 * (edges[1:] + edges[:-1])
    rss = float(np.sum((dens - density(dist, params, centers)) ** 2))
    return params, rss


def fit_histogram(t, bins: int = DEFAULT_BINS, dists=DISTRIBUTIONS) -> HistogramFit:
    mags = _magnitudes(t)
    edges, dens = histogram(mags, bins)
    centers = 0.5 * (edges[1:] + edges[:-1])
    fitted = {}
    for d in dists:
        params = mle_params(mags, d)
        fitted[d] = (params, float(np.sum((dens - density(d, params, centers)) ** 2)))
    return HistogramFit(edges, dens, fitted)


def choose_start(rss_activations: float, rss_weights: float) -> StartTensor:
    if rss_weights < rss_activations:
        return StartTensor.WEIGHTS
    return StartTensor.ACTIVATIONS


def select_start_tensor(acts, weights, bins: int = DEFAULT_BINS) -> StartTensor:
    """Pick the tensor whose magnitudes are closer to an exponential law."""
    _, rss_a = fit_rss(acts, "exponential", bins)
    _, rss_w = fit_rss(weights, "exponential", bins)
    return choose_start(rss_a, rss_w)
