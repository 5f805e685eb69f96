"""Spearman's rho, Fisher-z averaging, and relative L2 distance."""

from __future__ import annotations

from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value for the given inputs."""


def fractional_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with tied values sharing the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    # group boundaries of equal runs in the sorted array
    starts = np.flatnonzero(np.r_[True, sorted_x[1:] != sorted_x[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = 0.5 * (lo + 1 + hi)
    return ranks


def spearman(predictions: Sequence[float], labels: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    q = np.asarray(labels, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"need two equal-length 1-d sequences, got {p.shape} and {q.shape}")
    if len(p) < 2:
        raise UndefinedMetricError("Spearman correlation needs at least 2 samples")
    rp = fractional_ranks(p) - (len(p) + 1) / 2
    rq = fractional_ranks(q) - (len(q) + 1) / 2
    denom = np.sqrt(np.sum(rp * rp) * np.sum(rq * rq))
    if denom == 0:
        raise UndefinedMetricError("Spearman correlation undefined: a ranking has zero variance")
    return float(np.clip(np.sum(rp * rq) / denom, -1.0, 1.0))


def fisher_z_average(rhos: Sequence[float]) -> float:
    """tanh of the mean of atanh over per-action correlations."""
    r = np.asarray(rhos, dtype=np.float64)
    if r.size == 0:
        raise ValueError("no correlations to average")
    if np.any(np.abs(r) >= 1):
        raise ValueError("Fisher z is infinite for |rho| = 1; clamp inputs first")
    return float(np.tanh(np.mean(np.arctanh(r))))


def relative_l2(predictions: Sequence[float], labels: Sequence[float], y_max: float, y_min: float) -> float:
    """Mean squared error after dividing by the score range ``y_max - y_min``."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ValueError(f"need two equal-length nonempty sequences, got {p.shape} and {y.shape}")
    if not y_max > y_min:
        raise ValueError(f"score range is empty: y_max={y_max}, y_min={y_min}")
    return float(np.mean((np.abs(y - p) / (y_max - y_min)) ** 2))
