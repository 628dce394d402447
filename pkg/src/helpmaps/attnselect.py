"""Turning transformer attention stacks into displayable maps.

A head's map over the image tokens is the column mean of its attention
weights over *all* source tokens. Candidate maps are scored by HELP^A_Z on a
held-out split; the best one is written back onto every record.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .core import (AttentionStack, Dataset, DegenerateStatisticError, InsufficientDataError,
                   MissingMapError, Record, sorted_by_id)
from .metrics import help_from_relevances
from .stats import VarianceMode, spearman_batch


class Strategy(str, Enum):
    BASELINE = "baseline_last_layer"
    BEST_SINGLE = "best_single"
    BEST_HEAD = "best_head"
    BEST_LAYER = "best_layer"


# None in a key position means "averaged over that axis".
Candidate = tuple[int | None, int | None]


def candidate_label(c: Candidate) -> str:
    l, h = c
    return f"{'*' if l is None else l}.{'*' if h is None else h}"


@dataclass(frozen=True)
class SelectionResult:
    strategy: Strategy
    chosen_layer: int | None
    chosen_head: int | None
    val_help_z: float
    per_candidate_scores: dict[Candidate, float] = field(default_factory=dict)

    @property
    def candidate(self) -> Candidate:
        return (self.chosen_layer, self.chosen_head)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "chosen_layer": self.chosen_layer,
            "chosen_head": self.chosen_head,
            "val_help_z": self.val_help_z,
            "per_candidate_scores": {candidate_label(c): s for c, s in self.per_candidate_scores.items()},
        }


def _check_indices(stack: AttentionStack, layer: int, head: int) -> None:
    if not 0 <= layer < stack.n_layers:
        raise IndexError(f"layer {layer} out of range [0, {stack.n_layers})")
    if not 0 <= head < stack.n_heads:
        raise IndexError(f"head {head} out of range [0, {stack.n_heads})")


def all_head_maps(stack: AttentionStack) -> np.ndarray:
    """Maps for every (layer, head): array of shape ``(L, H, image_token_count)``."""
    k = stack.image_token_count
    return stack.weights[:, :, :, :k].mean(axis=2, dtype=np.float64)


def extract_head_map(stack: AttentionStack, layer: int, head: int) -> np.ndarray:
    """Mean attention each image token receives from all d source tokens."""
    _check_indices(stack, layer, head)
    k = stack.image_token_count
    return stack.weights[layer, head, :, :k].mean(axis=0, dtype=np.float64)


def extract_baseline(stack: AttentionStack) -> np.ndarray:
    """Head-averaged map of the last layer (the conventional display)."""
    return all_head_maps(stack)[-1].mean(axis=0)


def head_map_array(r: Record) -> np.ndarray:
    """``(L, H, 49)`` candidate maps from a record's stack or per-head maps."""
    if r.attention_stack is not None:
        return all_head_maps(r.attention_stack)
    if r.per_head_maps:
        keys = list(r.per_head_maps)
        n_l = max(l for l, _ in keys) + 1
        n_h = max(h for _, h in keys) + 1
        if len(keys) != n_l * n_h:
            raise MissingMapError(f"record {r.id!r}: per_head_maps incomplete ({len(keys)} of {n_l * n_h})")
        n_cells = next(iter(r.per_head_maps.values())).size
        out = np.empty((n_l, n_h, n_cells))
        for (l, h), m in r.per_head_maps.items():
            out[l, h] = m
        return out
    raise MissingMapError(f"record {r.id!r} has neither an attention stack nor per-head maps")


def candidate_maps(maps: np.ndarray, strategy: Strategy) -> dict[Candidate, np.ndarray]:
    """Candidate maps for ``strategy`` from an ``(L, H, cells)`` array.

    Keys are ordered by (layer, head) so the first maximum wins ties.
    """
    n_l, n_h = maps.shape[:2]
    if strategy is Strategy.BEST_SINGLE:
        return {(l, h): maps[l, h] for l in range(n_l) for h in range(n_h)}
    if strategy is Strategy.BEST_HEAD:
        avg = maps.mean(axis=0)
        return {(None, h): avg[h] for h in range(n_h)}
    if strategy is Strategy.BEST_LAYER:
        avg = maps.mean(axis=1)
        return {(l, None): avg[l] for l in range(n_l)}
    return {(n_l - 1, None): maps[-1].mean(axis=0)}


def _candidate_stack(records: Sequence[Record], strategy: Strategy) -> tuple[list[Candidate], np.ndarray]:
    keys: list[Candidate] | None = None
    rows = []
    for r in records:
        cands = candidate_maps(head_map_array(r), strategy)
        if keys is None:
            keys = list(cands)
        elif list(cands) != keys:
            raise ValueError(f"record {r.id!r}: attention stack shape differs from the rest of the split")
        rows.append(np.stack(list(cands.values())))
    return keys or [], np.stack(rows)  # (n_records, n_candidates, cells)


def score_candidates(records: Sequence[Record], strategy: Strategy,
                     variance_mode=VarianceMode.POOLED) -> dict[Candidate, float]:
    """HELP^A_Z of every candidate map of ``strategy`` over ``records``.

    Candidates whose statistic is undefined score ``nan``.
    """
    records = sorted_by_id(records)
    keys, maps = _candidate_stack(records, strategy)
    human = np.stack([r.human_attention for r in records])[:, None, :]
    rho, degenerate = spearman_batch(maps, human)
    correct = np.array([r.correct for r in records])
    scores: dict[Candidate, float] = {}
    for j, key in enumerate(keys):
        ok = ~degenerate[:, j]
        try:
            rep = help_from_relevances(rho[ok & correct, j], rho[ok & ~correct, j],
                                       variance_mode=variance_mode)
            scores[key] = rep.help_z
        except (InsufficientDataError, DegenerateStatisticError):
            scores[key] = float("nan")
    return scores


def select_best(ds: Dataset, strategy: Strategy | str = Strategy.BEST_SINGLE, split: str = "val",
                variance_mode=VarianceMode.POOLED) -> tuple[SelectionResult, Dataset]:
    """Pick the display map on ``split`` and write it onto every record.

    Only records of ``split`` are scored, so labels of other splits are never
    read. Ties go to the lowest layer, then the lowest head.
    """
    strategy = Strategy(strategy)
    records = ds.split(split)
    n_c = sum(r.correct for r in records)
    if n_c < 2 or len(records) - n_c < 2:
        raise InsufficientDataError(
            f"split {split!r} needs >= 2 correct and >= 2 wrong records, got {n_c} and {len(records) - n_c}")
    scores = score_candidates(records, strategy, variance_mode)
    finite = {k: v for k, v in scores.items() if np.isfinite(v)}
    if not finite:
        raise InsufficientDataError("no candidate map has a defined helpfulness score")
    best_key = max(finite, key=lambda k: finite[k])  # first max in (layer, head) order
    result = SelectionResult(strategy, best_key[0], best_key[1], finite[best_key], scores)
    return result, apply_selection(ds, result)


def map_for_candidate(r: Record, strategy: Strategy, key: Candidate) -> np.ndarray:
    return candidate_maps(head_map_array(r), strategy)[key]


def apply_selection(ds: Dataset, result: SelectionResult) -> Dataset:
    """Write the chosen candidate's map onto every record's ``attention_map``."""
    return ds.map_records(
        lambda r: r.replace(attention_map=map_for_candidate(r, result.strategy, result.candidate)))


def apply_baseline(ds: Dataset, split: str | None = "val",
                   variance_mode=VarianceMode.POOLED) -> tuple[SelectionResult, Dataset]:
    """No search: use the last layer's head-averaged map everywhere.

    The score on ``split`` is reported when it is defined, ``nan`` otherwise.
    """
    first = next(iter(ds), None)
    if first is None:
        raise InsufficientDataError("empty dataset")
    n_l = head_map_array(first).shape[0]
    key: Candidate = (n_l - 1, None)
    score = float("nan")
    if split is not None and ds.split(split):
        score = score_candidates(ds.split(split), Strategy.BASELINE, variance_mode)[key]
    result = SelectionResult(Strategy.BASELINE, n_l - 1, None, score, {key: score})
    return result, apply_selection(ds, result)


def map_summary(maps: np.ndarray) -> np.ndarray:
    """Fixed-length statistics of a set of maps, shape ``(..., cells) -> (2 * n_maps,)``.

    Per map: peak share of total mass and the coefficient of variation. Used
    as the compact attention conditioning input of the justifier.
    """
    maps = np.asarray(maps, dtype=np.float64).reshape(-1, np.shape(maps)[-1])
    total = maps.sum(axis=1)
    mean = maps.mean(axis=1)
    safe_total = np.where(total > 0, total, 1.0)
    safe_mean = np.where(mean > 0, mean, 1.0)
    peak = np.where(total > 0, maps.max(axis=1) / safe_total, 0.0)
    cv = np.where(mean > 0, maps.std(axis=1) / safe_mean, 0.0)
    return np.stack([peak, cv], axis=1).reshape(-1)
