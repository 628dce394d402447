"""Simulated users that judge model correctness from heatmap relevance.

A simulated user is a noisy threshold rule: attention that matches human
attention reads as "the model will be right", an error map that matches the
evidence (or the attended region) reads as "the model will be wrong". Verdicts
flip with probability ``epsilon``, drawn from a hash of ``(seed, record id)``
so every prediction is a pure function of the user and the record.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable

import numpy as np

from .core import DegenerateStatisticError, InsufficientDataError, Record, sorted_by_id
from .metrics import Mode, help_from_relevances, relevance
from .stats import VarianceMode, spearman


class UserMode(str, Enum):
    ATTENTION_ONLY = "attention_only"
    ERROR_ONLY = "error_only"
    JOINT = "joint"


USER_MODE_FOR = {Mode.ATTENTION: UserMode.ATTENTION_ONLY, Mode.ERROR: UserMode.ERROR_ONLY,
                 Mode.JOINT: UserMode.JOINT}


@dataclass(frozen=True)
class SimUser:
    tau_att: float = 0.5
    tau_err: float = 0.5
    epsilon: float = 0.0
    mode: UserMode = UserMode.ATTENTION_ONLY
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", UserMode(self.mode))
        for name in ("tau_att", "tau_err"):
            if not -1.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1], got {getattr(self, name)}")
        if not 0.0 <= self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in [0, 0.5), got {self.epsilon}")


def _unit_hash(seed: int, record_id: str) -> float:
    digest = hashlib.blake2b(f"{seed}\x00{record_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2.0 ** 64


def flips(user: SimUser, record_id: str) -> bool:
    return user.epsilon > 0 and _unit_hash(user.seed, record_id) < user.epsilon


def _needed_modes(mode: UserMode) -> tuple[Mode, ...]:
    if mode is UserMode.ATTENTION_ONLY:
        return (Mode.ATTENTION,)
    if mode is UserMode.ERROR_ONLY:
        return (Mode.ERROR,)
    return (Mode.JOINT, Mode.ATTENTION)


def _verdict(user: SimUser, rel: dict[Mode, float], record_id: str) -> bool:
    if user.mode is UserMode.ATTENTION_ONLY:
        says_correct = rel[Mode.ATTENTION] >= user.tau_att
    elif user.mode is UserMode.ERROR_ONLY:
        says_correct = not rel[Mode.ERROR] >= user.tau_err
    elif rel[Mode.JOINT] >= user.tau_err:
        says_correct = False
    else:
        says_correct = rel[Mode.ATTENTION] >= user.tau_att
    return says_correct != flips(user, record_id)


def predict(user: SimUser, r: Record) -> bool:
    """True when the simulated user expects the model to be correct on ``r``."""
    rel = {m: relevance(r, m)[0] for m in _needed_modes(user.mode)}
    return _verdict(user, rel, r.id)


def accuracy(user: SimUser, records: Iterable[Record]) -> float:
    records = list(records)
    if not records:
        raise InsufficientDataError("accuracy of an empty record set")
    return sum(predict(user, r) == r.correct for r in records) / len(records)


def default_user(records: Iterable[Record], mode: UserMode | str = UserMode.ATTENTION_ONLY,
                 epsilon: float = 0.0, seed: int = 0) -> SimUser:
    """User whose thresholds are the median relevances over ``records``."""
    records = list(records)
    mode = UserMode(mode)

    def median(m: Mode) -> float:
        return float(np.median([relevance(r, m)[0] for r in records]))

    taus = {}
    if mode is not UserMode.ERROR_ONLY:
        taus["tau_att"] = median(Mode.ATTENTION)
    if mode is not UserMode.ATTENTION_ONLY:
        taus["tau_err"] = median(Mode.ERROR if mode is UserMode.ERROR_ONLY else Mode.JOINT)
    return SimUser(mode=mode, epsilon=epsilon, seed=seed, **taus)


def relevance_correctness_curve(records: Iterable[Record], n_bins: int, user: SimUser | None = None,
                                population: int = 25, jitter: float = 0.1,
                                seed: int = 0) -> list[tuple[float, float]]:
    """Mean REL^A per relevance-quantile bin vs. the share predicted correct.

    Predictions come from a population of attention-only users whose
    thresholds are ``user.tau_att`` plus Gaussian jitter. The default
    population centres on ``SimUser().tau_att`` so the curve does not adapt
    to the data (a random-signal set then gives a flat curve).
    """
    records = sorted_by_id(records)
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if len(records) < n_bins:
        raise InsufficientDataError(f"{len(records)} records cannot fill {n_bins} bins")
    rel = np.array([relevance(r, Mode.ATTENTION)[0] for r in records])
    if user is None:
        user = SimUser()
    rng = np.random.default_rng(seed)
    taus = np.clip(user.tau_att + jitter * rng.standard_normal(population), -1.0, 1.0)
    users = [replace(user, mode=UserMode.ATTENTION_ONLY, tau_att=float(t), seed=user.seed + k)
             for k, t in enumerate(taus)]
    said_correct = np.array([[_verdict(u, {Mode.ATTENTION: rel[i]}, r.id) for u in users]
                             for i, r in enumerate(records)], dtype=float)
    order = np.lexsort((np.arange(len(records)), rel))
    return [(float(rel[b].mean()), float(said_correct[b].mean()))
            for b in np.array_split(order, n_bins)]


@dataclass(frozen=True)
class ValidationCurve:
    """HELP_Z vs. simulated accuracy over sampled subsets.

    ``pearson_r`` / ``spearman_rho`` correlate the raw subset points; the
    ``binned_*`` fields correlate the binned curve (bin centre vs mean accuracy).
    """

    bins: list[tuple[float, float, int]]  # (help_z bin centre, mean simulated accuracy, n subsets)
    pearson_r: float
    spearman_rho: float
    binned_pearson_r: float = 0.0
    binned_spearman_rho: float = 0.0
    points: list[tuple[float, float, float]] = field(default_factory=list)  # (help_z, accuracy, intuitive share)
    degenerate: bool = False
    n_skipped: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_center", "mean_accuracy", "n"])
        for c, a, n in self.bins:
            w.writerow([repr(c), repr(a), n])
        return buf.getvalue()

    def is_monotone(self) -> bool:
        accs = [a for _, a, _ in self.bins]
        return all(b >= a for a, b in zip(accs, accs[1:]))


def _intuitive(mode: Mode, rel: float, correct: bool, user: SimUser) -> bool:
    if mode is Mode.ATTENTION:
        return (rel >= user.tau_att) == correct
    return (rel >= user.tau_err) != correct


def validate_metric(ds: Iterable[Record], user: SimUser, mode: Mode | str, n_subsets: int,
                    subset_size: int, seed: int, n_bins: int = 8, n_levels: int = 11,
                    q_range: tuple[float, float] = (0.1, 0.9),
                    variance_mode=VarianceMode.POOLED) -> ValidationCurve:
    """Does HELP_Z of ``mode`` track simulated-user accuracy across subsets?

    Each subset holds ``subset_size // 2`` correct and as many wrong records.
    Within each class a share ``q`` is drawn from records whose explanation
    agrees with the outcome (for ``user``'s thresholds) and ``1 - q`` from
    records where it misleads. ``q`` steps across ``q_range`` over
    ``n_levels`` evenly spaced levels, subsets spread evenly across levels.
    The default range stops short of pure subsets: with noise-free maps a
    pure class can have (near) zero relevance variance, which sends HELP_Z
    off to infinity. Subsets are binned by HELP_Z into ``n_bins`` equal-width
    bins.
    """
    mode = Mode(mode)
    if n_subsets < 2:
        raise ValueError("n_subsets must be >= 2")
    q_lo, q_hi = q_range
    if not 0.0 <= q_lo <= q_hi <= 1.0:
        raise ValueError(f"q_range must satisfy 0 <= lo <= hi <= 1, got {q_range}")
    records = sorted_by_id(ds)
    needed = set(_needed_modes(user.mode)) | {mode}
    rel = {m: np.array([relevance(r, m)[0] for r in records]) for m in needed}
    degenerate = np.array([relevance(r, mode)[1] for r in records])
    correct = np.array([r.correct for r in records])
    said_correct = np.array([_verdict(user, {m: rel[m][i] for m in needed}, r.id)
                             for i, r in enumerate(records)])
    hit = said_correct == correct
    intuitive = np.array([_intuitive(mode, rel[mode][i], correct[i], user) for i in range(len(records))])

    half = subset_size // 2
    pools = {}
    for cls in (True, False):
        base = (correct == cls) & ~degenerate
        pools[cls] = (np.flatnonzero(base & intuitive), np.flatnonzero(base & ~intuitive))
        for name, pool in zip(("agreeing", "misleading"), pools[cls]):
            if pool.size < half:
                label = "correct" if cls else "wrong"
                raise InsufficientDataError(
                    f"only {pool.size} {name} {label} records for {mode.value}; subsets need {half}")

    rng = np.random.default_rng(seed)
    points, skipped = [], 0
    levels = max(2, min(n_levels, n_subsets))
    for k in range(n_subsets):
        q = q_lo + (q_hi - q_lo) * (k * levels // n_subsets) / (levels - 1)
        n_agree = int(round(q * half))
        members = {}
        for cls in (True, False):
            agree, mislead = pools[cls]
            members[cls] = np.concatenate([rng.choice(agree, n_agree, replace=False),
                                           rng.choice(mislead, half - n_agree, replace=False)])
        try:
            rep = help_from_relevances(rel[mode][members[True]], rel[mode][members[False]], mode, variance_mode)
        except DegenerateStatisticError:
            skipped += 1
            continue
        idx = np.concatenate([members[True], members[False]])
        points.append((rep.help_z, float(hit[idx].mean()), q))

    z = np.array([p[0] for p in points])
    acc = np.array([p[1] for p in points])
    bins = _bin(z, acc, n_bins)
    centers = np.array([b[0] for b in bins])
    means = np.array([b[1] for b in bins])
    return ValidationCurve(bins, *_correlations(z, acc), *_correlations(centers, means), points=points,
                           degenerate=len(points) < 3, n_skipped=skipped)


def _correlations(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0, 0.0
    pearson = float(np.clip(np.corrcoef(x, y)[0, 1], -1.0, 1.0))
    return pearson, spearman(x, y).rho


def _bin(z: np.ndarray, acc: np.ndarray, n_bins: int) -> list[tuple[float, float, int]]:
    if z.size == 0:
        return []
    lo, hi = float(z.min()), float(z.max())
    if hi == lo:
        return [(lo, float(acc.mean()), int(z.size))]
    edges = np.linspace(lo, hi, n_bins + 1)
    which = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = which == b
        if sel.any():
            out.append((float((edges[b] + edges[b + 1]) / 2), float(acc[sel].mean()), int(sel.sum())))
    return out

