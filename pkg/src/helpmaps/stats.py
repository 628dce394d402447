"""Rank correlation and two-sample z-test."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .core import DegenerateStatisticError, InsufficientDataError


class VarianceMode(str, Enum):
    POOLED = "pooled"
    UNPOOLED = "unpooled"


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    degenerate: bool = False


@dataclass(frozen=True)
class ZTestResult:
    t_stat: float
    p_value: float
    n1: int
    n2: int
    mean1: float
    mean2: float
    variance_mode: VarianceMode = VarianceMode.POOLED


def average_ranks(a: np.ndarray) -> np.ndarray:
    """Rank along the last axis (1-based), averaging the ranks of ties.

    Works on any leading batch shape.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[-1]
    order = np.argsort(a, axis=-1, kind="stable")
    s = np.take_along_axis(a, order, axis=-1)
    pos = np.broadcast_to(np.arange(n), s.shape)

    starts_group = np.ones(s.shape, dtype=bool)
    starts_group[..., 1:] = s[..., 1:] != s[..., :-1]
    ends_group = np.ones(s.shape, dtype=bool)
    ends_group[..., :-1] = starts_group[..., 1:]

    first = np.maximum.accumulate(np.where(starts_group, pos, 0), axis=-1)
    last = np.flip(np.minimum.accumulate(np.flip(np.where(ends_group, pos, n), -1), axis=-1), -1)

    ranks = np.empty_like(s)
    np.put_along_axis(ranks, order, (first + last) / 2.0 + 1.0, axis=-1)
    return ranks


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.shape[-1] < 2:
        raise ValueError("rank correlation needs at least 2 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite input to rank correlation")
    return x, y


def spearman_batch(x, y) -> tuple[np.ndarray, np.ndarray]:
    """Spearman's rho along the last axis with broadcasting.

    Returns ``(rho, degenerate)``; rows where either side is constant get
    ``rho = 0`` and ``degenerate = True``.
    """
    x, y = _check_pair(x, y)
    rx = average_ranks(x)
    ry = average_ranks(y)
    rx = rx - rx.mean(axis=-1, keepdims=True)
    ry = ry - ry.mean(axis=-1, keepdims=True)
    sxx = np.einsum("...i,...i->...", rx, rx)
    syy = np.einsum("...i,...i->...", ry, ry)
    sxy = np.einsum("...i,...i->...", *np.broadcast_arrays(rx, ry))
    sxx, syy = np.broadcast_arrays(sxx, syy)
    degenerate = (sxx == 0) | (syy == 0)
    denom = np.sqrt(np.where(degenerate, 1.0, sxx * syy))
    rho = np.where(degenerate, 0.0, sxy / denom)
    return np.clip(rho, -1.0, 1.0), degenerate


def spearman(x, y) -> CorrelationResult:
    """Spearman rank correlation of two equal-length vectors."""
    x, y = _check_pair(x, y)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("spearman expects 1-D inputs; use spearman_batch")
    rho, deg = spearman_batch(x, y)
    return CorrelationResult(float(rho), bool(deg))


def normal_sf2(z: float) -> float:
    """Two-sided normal tail probability ``2 * (1 - Phi(|z|))``."""
    return math.erfc(abs(z) / math.sqrt(2.0))


def ztest_two_sample(a, b, variance_mode: VarianceMode | str = VarianceMode.POOLED) -> ZTestResult:
    """Two-sample z-test for a difference in means.

    ``t_stat = (mean(a) - mean(b)) / SE`` with sample variances using ``n - 1``.
    Pooled mode uses the pooled variance ``s_p^2``; unpooled uses the Welch
    standard error. The p-value is two-sided under the standard normal.
    """
    mode = VarianceMode(variance_mode)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        raise InsufficientDataError(f"z-test needs at least 2 values per sample, got {n1} and {n2}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input to z-test")
    m1, m2 = float(a.mean()), float(b.mean())
    v1, v2 = float(a.var(ddof=1)), float(b.var(ddof=1))
    if mode is VarianceMode.POOLED:
        sp2 = ((n1 - 1) * v1 + (n2 - 1) * v2) / (n1 + n2 - 2)
        se = math.sqrt(sp2) * math.sqrt(1.0 / n1 + 1.0 / n2)
    else:
        se = math.sqrt(v1 / n1 + v2 / n2)
    if se == 0.0:
        raise DegenerateStatisticError("z-test undefined: zero standard error (both samples constant)")
    t = (m1 - m2) / se
    return ZTestResult(t, normal_sf2(t), n1, n2, m1, m2, mode)
