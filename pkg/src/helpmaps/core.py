"""Domain types shared by every part of the toolkit.

Heatmaps are plain 1-D ``float64`` arrays of length 49 (a row-major 7x7 grid).
They are kept unnormalized; every metric downstream works on ranks.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Mapping

import numpy as np

GRID_SIDE = 7
N_CELLS = GRID_SIDE * GRID_SIDE
SPLITS = ("train", "val", "test")


class HelpmapsError(Exception):
    """Base class for all toolkit errors."""


class MissingMapError(HelpmapsError, ValueError):
    """A record lacks a map required by the requested computation."""


class InsufficientDataError(HelpmapsError, ValueError):
    """Too few records (or too few per class) for a statistic."""


class DegenerateStatisticError(HelpmapsError, ArithmeticError):
    """A statistic is undefined, e.g. a z-test with zero standard error."""


class FormatError(HelpmapsError, ValueError):
    """Malformed file contents."""


class NumericalError(HelpmapsError, ArithmeticError):
    """A computation produced a non-finite value."""


class HeatmapKind(str, Enum):
    ATTENTION = "attention"
    ERROR = "error"
    HUMAN = "human"


def as_heatmap(values, *, dtype=np.float64) -> np.ndarray:
    """Flatten ``values`` into a contiguous 1-D array (no validation)."""
    return np.ascontiguousarray(np.asarray(values, dtype=dtype).reshape(-1))


def is_constant(values: np.ndarray) -> bool:
    """True when every entry is equal, i.e. the map carries no ranking."""
    values = np.asarray(values)
    return values.size == 0 or bool(np.all(values == values.flat[0]))


def heatmap_violations(values, name: str, n_cells: int = N_CELLS) -> list[str]:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size != n_cells:
        return [f"{name}: expected {n_cells} values, got {arr.size}"]
    out = []
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        out.append(f"{name}: non-finite value at index {int(bad[0])}")
    neg = np.flatnonzero(arr < 0)
    if neg.size:
        out.append(f"{name}: negative value at index {int(neg[0])}")
    return out


@dataclass(frozen=True)
class AttentionStack:
    """Transformer attention weights of shape ``(layers, heads, d, d)``.

    The first ``image_token_count`` tokens are image tokens laid out on a
    square grid. Storage keeps the incoming dtype (32-bit stacks stay 32-bit
    in memory); every reduction over the weights is carried out in float64.
    """

    weights: np.ndarray
    image_token_count: int = N_CELLS

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.weights.shape)  # type: ignore[return-value]

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.weights.shape[2]

    def violations(self) -> list[str]:
        w = np.asarray(self.weights)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            return [f"attention_stack: expected shape L x H x d x d, got {w.shape}"]
        out = []
        k = self.image_token_count
        if k > w.shape[2]:
            out.append(f"attention_stack: image_token_count {k} exceeds token count {w.shape[2]}")
        if k < 1 or math.isqrt(k) ** 2 != k:
            out.append(f"attention_stack: image_token_count {k} is not a perfect square")
        if not np.all(np.isfinite(w)):
            out.append("attention_stack: non-finite weight")
        elif np.any(w < 0):
            out.append("attention_stack: negative weight")
        return out


@dataclass(frozen=True)
class Record:
    """One image-question example.

    ``per_head_maps`` maps ``(layer, head)`` to a 49-cell map; ``aux_features``
    holds the justifier conditioning vectors (``question``,
    ``attention_summary``, ``logits``).
    """

    id: str
    correct: bool
    human_attention: np.ndarray
    split: str = "test"
    attention_stack: AttentionStack | None = None
    per_head_maps: Mapping[tuple[int, int], np.ndarray] | None = None
    attention_map: np.ndarray | None = None
    error_map: np.ndarray | None = None
    feature_grid: np.ndarray | None = None
    aux_features: Mapping[str, np.ndarray] | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "correct", bool(self.correct))
        set_(self, "human_attention", as_heatmap(self.human_attention))
        for name in ("attention_map", "error_map"):
            v = getattr(self, name)
            if v is not None:
                set_(self, name, as_heatmap(v))
        if self.feature_grid is not None:
            set_(self, "feature_grid", np.asarray(self.feature_grid, dtype=np.float64))
        if self.per_head_maps is not None:
            maps = {(int(l), int(h)): as_heatmap(m) for (l, h), m in self.per_head_maps.items()}
            set_(self, "per_head_maps", dict(sorted(maps.items())))
        if self.aux_features is not None:
            set_(self, "aux_features",
                 {k: as_heatmap(v) for k, v in sorted(self.aux_features.items())})

    def replace(self, **changes) -> "Record":
        return dataclasses.replace(self, **changes)


def validate_record(r: Record) -> list[str]:
    """Return every invariant violation of ``r`` (empty list when valid)."""
    out: list[str] = []
    if not isinstance(r.id, str) or not r.id:
        out.append("id: must be a non-empty string")
    if r.split not in SPLITS:
        out.append(f"split: expected one of {SPLITS}, got {r.split!r}")
    out += heatmap_violations(r.human_attention, "human_attention")
    for name in ("attention_map", "error_map"):
        v = getattr(r, name)
        if v is not None:
            out += heatmap_violations(v, name)
    if r.per_head_maps is not None:
        for (l, h), m in r.per_head_maps.items():
            if l < 0 or h < 0:
                out.append(f"per_head_maps: negative index {l}.{h}")
            out += heatmap_violations(m, f"per_head_maps[{l}.{h}]")
    if r.attention_stack is not None:
        out += r.attention_stack.violations()
    if r.feature_grid is not None:
        g = r.feature_grid
        if g.ndim != 3 or g.shape[:2] != (GRID_SIDE, GRID_SIDE):
            out.append(f"feature_grid: expected shape 7 x 7 x C, got {g.shape}")
        elif not np.all(np.isfinite(g)):
            out.append("feature_grid: non-finite value")
    if r.aux_features is not None:
        for k, v in r.aux_features.items():
            if not np.all(np.isfinite(v)):
                out.append(f"aux[{k}]: non-finite value")
    return out


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of records."""

    records: tuple[Record, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def __getitem__(self, i: int) -> Record:
        return self.records[i]

    @property
    def split_index(self) -> dict[str, list[int]]:
        idx: dict[str, list[int]] = {s: [] for s in SPLITS}
        for i, r in enumerate(self.records):
            idx.setdefault(r.split, []).append(i)
        return idx

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def violations(self) -> list[str]:
        out = []
        seen: set[str] = set()
        for r in self.records:
            if r.id in seen:
                out.append(f"{r.id}: id: duplicate id")
            seen.add(r.id)
            out += [f"{r.id}: {v}" for v in validate_record(r)]
        return out

    def map_records(self, fn, split: str | None = None) -> "Dataset":
        """Return a new dataset with ``fn`` applied to records (of ``split`` only, if given)."""
        return Dataset(tuple(fn(r) if split is None or r.split == split else r
                             for r in self.records))


def make_splits(ds: Dataset, val_fraction: float, seed: int,
                train_fraction: float = 0.0) -> Dataset:
    """Assign train/val/test splits by a seeded shuffle.

    ``round(n * train_fraction)`` records go to train, ``round(n * val_fraction)``
    to val and the remainder to test. Split sizes depend only on ``n``.
    """
    n = len(ds)
    if n == 0:
        raise InsufficientDataError("cannot split an empty dataset")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if not 0.0 <= train_fraction < 1.0 or train_fraction + val_fraction >= 1.0:
        raise ValueError("train_fraction must lie in [0, 1) with train + val < 1")
    n_train = int(round(n * train_fraction))
    n_val = int(round(n * val_fraction))
    order = np.random.default_rng(seed).permutation(n)
    labels = np.full(n, "test", dtype=object)
    labels[order[:n_train]] = "train"
    labels[order[n_train:n_train + n_val]] = "val"
    return Dataset(tuple(r.replace(split=str(s)) for r, s in zip(ds.records, labels)))


def sorted_by_id(records: Iterable[Record]) -> list[Record]:
    return sorted(records, key=lambda r: r.id)


def grid(values: np.ndarray) -> np.ndarray:
    """Reshape a flat square map to 2-D."""
    values = np.asarray(values)
    side = math.isqrt(values.size)
    return values.reshape(side, side)


__all__ = [
    "AttentionStack", "Dataset", "DegenerateStatisticError", "FormatError",
    "GRID_SIDE", "HeatmapKind", "HelpmapsError", "InsufficientDataError",
    "MissingMapError", "N_CELLS", "NumericalError", "Record", "SPLITS", "as_heatmap", "grid",
    "heatmap_violations", "is_constant", "make_splits", "sorted_by_id",
    "validate_record",
]

