"""Label-free accuracy estimators used for comparison.

* ATC: threshold a per-node confidence score (max probability ``MC`` or
  negative entropy ``NE``) at the value that reproduces the validation error
  rate; the accuracy estimate is the share of target nodes at or above it.
  The ``-c`` variants divide logits by a temperature fitted on validation.
* Threshold: share of nodes whose max softmax probability exceeds ``tau``.
* AutoEval-G: linear regression of accuracy on the MMD between training-graph
  and meta-graph embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import log_softmax, softmax

SCORES = ("MC", "NE")
TEMPERATURE_GRID = np.logspace(np.log10(0.05), np.log10(10.0), 200)


def probabilities(logits, temperature: float = 1.0) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1)


def confidence_scores(logits, score: str, temperature: float = 1.0) -> np.ndarray:
    p = probabilities(logits, temperature)
    if score == "MC":
        return p.max(axis=1)
    if score == "NE":
        # 0 * log 0 := 0
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
        return plogp.sum(axis=1)
    raise ValueError(f"unknown score {score!r}; expected one of {SCORES}")


@dataclass(frozen=True)
class ATCThreshold:
    value: float
    score: str
    temperature: float = 1.0


def atc_fit_threshold(logits, labels, score: str, temperature: float = 1.0) -> ATCThreshold:
    """Threshold ``t`` with ``#{s < t} / n`` as close as possible to the val error rate.

    Candidates are every distinct val score plus one value just above the
    maximum.  Without ties the result is the ``(k+1)``-th smallest score,
    with ``k`` the number of val errors.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[0] == 0:
        raise ValueError("empty validation set")
    s = np.sort(confidence_scores(logits, score, temperature))
    k = int(np.count_nonzero(logits.argmax(axis=1) != labels))
    candidates = np.append(np.unique(s), np.nextafter(s[-1], np.inf))
    below = np.searchsorted(s, candidates, side="left")
    t = candidates[int(np.argmin(np.abs(below - k)))]
    return ATCThreshold(float(t), score, temperature)


def atc_estimate(logits, t, score: str, temperature: float | None = None) -> float:
    """Share of nodes whose score is at least ``t``."""
    if isinstance(t, ATCThreshold):
        if t.score != score:
            raise ValueError(f"threshold was fit with score {t.score}, asked for {score}")
        if temperature is None:
            temperature = t.temperature
        t = t.value
    s = confidence_scores(logits, score, 1.0 if temperature is None else temperature)
    return int(np.count_nonzero(s >= t)) / s.size


def nll(logits, labels, temperature: float) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64) / temperature, axis=1)
    return float(-logp[np.arange(len(labels)), labels].mean())


def temperature_calibrate(logits, labels, grid=None) -> float:
    """Grid-search temperature minimizing validation NLL (smallest T on ties)."""
    grid = TEMPERATURE_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    labels = np.asarray(labels)
    losses = np.array([nll(logits, labels, T) for T in grid])
    best = np.flatnonzero(losses == losses.min())
    return float(np.min(grid[best]))


def threshold_estimate(logits, tau: float) -> float:
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    conf = probabilities(logits).max(axis=1)
    return int(np.count_nonzero(conf > tau)) / conf.size


def mmd(za, zb, kernel: str = "linear") -> float:
    """Squared MMD between two embedding samples.

    ``linear``: ``||mean(za) - mean(zb)||^2``.  ``rbf``: biased estimate with
    a Gaussian kernel whose bandwidth is the median pairwise distance of the
    pooled sample.
    """
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if za.shape[1] != zb.shape[1]:
        raise ValueError(f"embedding widths differ: {za.shape[1]} vs {zb.shape[1]}")
    if kernel == "linear":
        diff = za.mean(axis=0) - zb.mean(axis=0)
        return float(diff @ diff)
    if kernel == "rbf":
        pooled = np.vstack([za, zb])
        bw = np.median(pdist(pooled)) if len(pooled) > 1 else 1.0
        bw = bw if bw > 0 else 1.0

        def k(a, b):
            return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bw * bw)).mean()

        return float(max(k(za, za) + k(zb, zb) - 2.0 * k(za, zb), 0.0))
    raise ValueError(f"unknown kernel {kernel!r}")


@dataclass(frozen=True)
class AutoEvalGModel:
    w1: float
    w0: float
    kernel: str = "linear"


def autoeval_g_fit(features, labels, kernel: str = "linear") -> AutoEvalGModel:
    """Ordinary least squares ``label ~ w1 * feature + w0``."""
    x = np.asarray(features, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ValueError("need at least two (feature, label) pairs of equal length")
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx == 0:
        raise ValueError("features have zero variance; regression is degenerate")
    w1 = float(xc @ (y - y.mean()) / sxx)
    w0 = float(y.mean() - w1 * x.mean())
    if not np.isfinite([w1, w0]).all():
        raise FloatingPointError("non-finite regression coefficients")
    return AutoEvalGModel(w1, w0, kernel)


def autoeval_g_estimate(m: AutoEvalGModel, feature: float, clamp: bool = True) -> float:
    raw = m.w1 * float(feature) + m.w0
    return min(max(raw, 0.0), 1.0) if clamp else raw
