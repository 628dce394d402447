"""Relevance of heatmaps and the HELP_Z helpfulness scores built on it.

Relevance is the Spearman correlation between two flattened maps:

* ``attention``: model attention vs human attention,
* ``error``: error map vs human attention,
* ``joint``: error map vs model attention.

HELP_Z is the z statistic comparing relevance on records the model got right
against records it got wrong. Error and joint scores are negated so that a
larger value always means a more helpful explanation.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .core import InsufficientDataError, MissingMapError, Record, sorted_by_id
from .stats import VarianceMode, spearman, ztest_two_sample


class Mode(str, Enum):
    ATTENTION = "attention"
    ERROR = "error"
    JOINT = "joint"


# (explanation field, reference field, sign applied to the z statistic)
_MODE_SPEC = {
    Mode.ATTENTION: ("attention_map", "human_attention", 1.0),
    Mode.ERROR: ("error_map", "human_attention", -1.0),
    Mode.JOINT: ("error_map", "attention_map", -1.0),
}


@dataclass(frozen=True)
class RelevanceTriple:
    rel_a: float | None = None
    rel_err: float | None = None
    rel_ea: float | None = None
    degenerate_a: bool = False
    degenerate_err: bool = False
    degenerate_ea: bool = False


@dataclass(frozen=True)
class HelpReport:
    mode: Mode
    mean_rel_correct: float
    mean_rel_wrong: float
    help_z: float
    p_value: float
    n_correct: int
    n_wrong: int
    n_excluded_correct: int = 0
    n_excluded_wrong: int = 0
    variance_mode: VarianceMode = VarianceMode.POOLED

    @property
    def n_excluded(self) -> int:
        return self.n_excluded_correct + self.n_excluded_wrong

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["variance_mode"] = self.variance_mode.value
        d["n_excluded"] = self.n_excluded
        return d


def relevance(r: Record, which: Mode | str = Mode.ATTENTION) -> tuple[float, bool]:
    """Spearman correlation of the two maps ``which`` compares on ``r``.

    Returns ``(rho, degenerate)``; degenerate means one of the maps is constant.
    """
    mode = Mode(which)
    a_name, b_name, _ = _MODE_SPEC[mode]
    a, b = getattr(r, a_name), getattr(r, b_name)
    if a is None or b is None:
        missing = a_name if a is None else b_name
        raise MissingMapError(f"record {r.id!r}: {mode.value} relevance needs {missing}")
    res = spearman(a, b)
    return res.rho, res.degenerate


def relevance_triple(r: Record) -> RelevanceTriple:
    vals = {}
    for mode, key in ((Mode.ATTENTION, "a"), (Mode.ERROR, "err"), (Mode.JOINT, "ea")):
        try:
            rho, deg = relevance(r, mode)
        except MissingMapError:
            continue
        vals[f"rel_{key}"] = rho
        vals[f"degenerate_{key}"] = deg
    return RelevanceTriple(**vals)


def help_from_relevances(rel_correct, rel_wrong, mode: Mode | str = Mode.ATTENTION,
                         variance_mode: VarianceMode | str = VarianceMode.POOLED,
                         n_excluded_correct: int = 0, n_excluded_wrong: int = 0) -> HelpReport:
    """HELP_Z from already-computed relevance values of each class."""
    mode = Mode(mode)
    sign = _MODE_SPEC[mode][2]
    rel_correct = np.asarray(rel_correct, dtype=np.float64)
    rel_wrong = np.asarray(rel_wrong, dtype=np.float64)
    if rel_correct.size < 2 or rel_wrong.size < 2:
        raise InsufficientDataError(
            f"{mode.value} helpfulness needs >= 2 correct and >= 2 wrong records with "
            f"non-degenerate relevance, got {rel_correct.size} and {rel_wrong.size}")
    z = ztest_two_sample(rel_correct, rel_wrong, variance_mode)
    help_z = sign * z.t_stat if z.t_stat != 0 else 0.0
    return HelpReport(mode, z.mean1, z.mean2, help_z, z.p_value, z.n1, z.n2,
                      n_excluded_correct, n_excluded_wrong, z.variance_mode)


def help_score(records: Iterable[Record], mode: Mode | str,
               variance_mode: VarianceMode | str = VarianceMode.POOLED) -> HelpReport:
    """HELP_Z of ``mode`` over ``records``.

    Records are folded in id order, so the result does not depend on the
    order of ``records``. Records with a constant map are excluded and counted.
    """
    mode = Mode(mode)
    rel = {True: [], False: []}
    excluded = {True: 0, False: 0}
    for r in sorted_by_id(records):
        rho, degenerate = relevance(r, mode)
        if degenerate:
            excluded[r.correct] += 1
        else:
            rel[r.correct].append(rho)
    return help_from_relevances(rel[True], rel[False], mode, variance_mode,
                                excluded[True], excluded[False])


def help_attention(records: Iterable[Record], variance_mode=VarianceMode.POOLED) -> HelpReport:
    return help_score(records, Mode.ATTENTION, variance_mode)


def help_error(records: Iterable[Record], variance_mode=VarianceMode.POOLED) -> HelpReport:
    return help_score(records, Mode.ERROR, variance_mode)


def help_joint(records: Iterable[Record], variance_mode=VarianceMode.POOLED) -> HelpReport:
    return help_score(records, Mode.JOINT, variance_mode)
