"""Post-hoc policy-shape diagnostics.

These quantify how far a trained policy has moved from its Gaussian base:
a location/scale-free KL against a standard-normal reference, mode counting
via the gap statistic, third/fourth standardized moments, and terminal-state
occupancy histograms.  Everything is pure given an explicit generator, so
analysis never perturbs training randomness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sacnf.autodiff import ConfigurationError

_VAR_FLOOR = 1e-12


class DegenerateSampleError(RuntimeError):
    """Sample variance too small to standardize (collapsed policy)."""


def standardized_kl(samples: np.ndarray, log_probs: np.ndarray) -> float:
    """MC estimate of KL(standardized sample distribution || N(0, I)).

    Samples are shifted/scaled per dimension to zero mean and unit variance;
    the density values are corrected by the change-of-variables term, so the
    result depends only on distribution shape, not location or scale.
    Standardizing with in-sample statistics leaves an O(d/n) negative bias
    for an exactly Gaussian sample.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    log_probs = np.asarray(log_probs, dtype=np.float64).reshape(-1)
    n, d = samples.shape
    if n < 2:
        raise ConfigurationError("need at least 2 samples")
    if log_probs.size != n:
        raise ConfigurationError("log_probs length does not match samples")
    mean = samples.mean(axis=0)
    var = samples.var(axis=0)
    if np.any(var < _VAR_FLOOR):
        raise DegenerateSampleError(f"sample variance below {_VAR_FLOOR}")
    std = np.sqrt(var)
    st = (samples - mean) / std
    log_probs_std = log_probs + np.sum(np.log(std))
    log_ref = -0.5 * d * np.log(2.0 * np.pi) - 0.5 * np.sum(st * st, axis=1)
    return float(np.mean(log_probs_std - log_ref))


def shape_kl(policy, states, n_actions: int, rng: np.random.Generator) -> float:
    """Average standardized KL over states; actions are drawn fresh per state."""
    if n_actions < 50:
        raise ConfigurationError("shape_kl needs n_actions >= 50")
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    total = 0.0
    for s in states:
        tiled = np.tile(s[None, :], (n_actions, 1))
        samp = policy.sample_np(tiled, rng)
        total += standardized_kl(samp.action, samp.log_prob)
    return total / states.shape[0]


# -- gap statistic -----------------------------------------------------------


def _kmeans_once(X: np.ndarray, k: int, rng: np.random.Generator, max_iter: int):
    n = X.shape[0]
    # k-means++ seeding
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j] = X[rng.integers(n)]
        else:
            centers[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((X - centers[j]) ** 2, axis=1))

    labels = None
    converged = False
    for _ in range(max_iter):
        dists = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        for j in range(k):
            mask = labels == j
            if mask.any():
                centers[j] = X[mask].mean(axis=0)
    inertia = float(np.sum((X - centers[labels]) ** 2))
    return labels, centers, inertia, converged


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, n_restarts: int = 10,
           max_iter: int = 300):
    """Best-of-n-restarts k-means++; returns (labels, centers, inertia, converged)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if k < 1 or k > X.shape[0]:
        raise ConfigurationError(f"k = {k} out of range for {X.shape[0]} samples")
    if k == 1:
        center = X.mean(axis=0, keepdims=True)
        inertia = float(np.sum((X - center) ** 2))
        return np.zeros(X.shape[0], dtype=np.int64), center, inertia, True
    best = None
    for _ in range(n_restarts):
        out = _kmeans_once(X, k, rng, max_iter)
        if best is None or out[2] < best[2]:
            best = out
    return best


@dataclass
class GapResult:
    gaps: np.ndarray  # gap(k) for k = 1..k_max
    errors: np.ndarray  # s_k of the reference dispersion
    converged: bool  # False if any retained k-means hit the iteration cap


def gap_statistic(samples: np.ndarray, k_max: int, n_refs: int,
                  rng: np.random.Generator) -> GapResult:
    """Gap(k) = E_ref[log W_k] - log W_k with a uniform bounding-box reference.

    W_k is the within-cluster dispersion of the best k-means fit (k-means++
    seeding, 10 restarts, 300 iteration cap).
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = X.shape[0]
    if k_max < 1:
        raise ConfigurationError("k_max must be >= 1")
    if n < 2 * k_max:
        raise ConfigurationError(f"need at least 2*k_max = {2 * k_max} samples, got {n}")
    if n_refs < 2:
        raise ConfigurationError("need n_refs >= 2 reference sets")
    lo = X.min(axis=0)
    hi = X.max(axis=0)

    converged = True
    log_w = np.empty(k_max)
    for k in range(1, k_max + 1):
        _, _, inertia, conv = kmeans(X, k, rng)
        log_w[k - 1] = np.log(max(inertia, 1e-300))
        converged = converged and conv

    log_w_ref = np.empty((n_refs, k_max))
    for b in range(n_refs):
        ref = rng.uniform(lo, hi, size=X.shape)
        for k in range(1, k_max + 1):
            _, _, inertia, conv = kmeans(ref, k, rng)
            log_w_ref[b, k - 1] = np.log(max(inertia, 1e-300))
            converged = converged and conv

    gaps = log_w_ref.mean(axis=0) - log_w
    sd = log_w_ref.std(axis=0)
    errors = sd * np.sqrt(1.0 + 1.0 / n_refs)
    return GapResult(gaps=gaps, errors=errors, converged=converged)


def select_num_modes(result: GapResult) -> int:
    """Smallest k with gap(k) >= gap(k+1) - s_{k+1} (the standard decision rule)."""
    gaps, errors = result.gaps, result.errors
    for k in range(len(gaps) - 1):
        if gaps[k] >= gaps[k + 1] - errors[k + 1]:
            return k + 1
    return len(gaps)


# -- moments -----------------------------------------------------------------


def moments(samples: np.ndarray):
    """(skewness, excess kurtosis) from biased central-moment estimators."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < 4:
        raise ConfigurationError("need at least 4 samples for moments")
    centered = x - x.mean()
    m2 = float(np.mean(centered**2))
    if m2 <= 0.0:
        raise DegenerateSampleError("zero variance sample")
    m3 = float(np.mean(centered**3))
    m4 = float(np.mean(centered**4))
    return m3 / m2**1.5, m4 / m2**2 - 3.0


# -- occupancy histogram ------------------------------------------------------


def terminal_histogram(positions, bounds=(-6.0, 6.0), resolution: int = 12) -> np.ndarray:
    """Normalized 2-D occupancy counts; out-of-grid points clip to the edge cells.

    Returned array is indexed [ix, iy] over equal-width cells spanning
    [bounds[0], bounds[1]] in both coordinates.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if positions.shape[0] == 0:
        raise ConfigurationError("positions must be non-empty")
    if positions.shape[1] != 2:
        raise ConfigurationError("positions must be 2-D points")
    lo, hi = bounds
    if not hi > lo:
        raise ConfigurationError("bounds must satisfy hi > lo")
    scaled = (positions - lo) / (hi - lo) * resolution
    idx = np.clip(np.floor(scaled).astype(np.int64), 0, resolution - 1)
    hist = np.zeros((resolution, resolution))
    np.add.at(hist, (idx[:, 0], idx[:, 1]), 1.0)
    return hist / positions.shape[0]
