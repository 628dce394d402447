"""Gameable attention baselines and a seeded synthetic dataset generator."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .attnselect import all_head_maps, map_summary
from .core import GRID_SIDE, N_CELLS, AttentionStack, Dataset, Record, make_splits

DEFAULT_SIGMA = 1.5
MAP_FLOOR = 0.05  # generated maps live in [0.05, ~1.05] so monotone transforms keep every rank
QUESTION_DIM = 8
LOGITS_DIM = 8


class AttentionSignal(str, Enum):
    RELEVANT_WHEN_CORRECT = "relevant_when_correct"
    ALWAYS_RELEVANT = "always_relevant"
    RANDOM = "random"


class ErrorSignal(str, Enum):
    RELEVANT_WHEN_WRONG = "relevant_when_wrong"
    RANDOM = "random"
    NONE = "none"


def _cell_coords() -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.divmod(np.arange(N_CELLS), GRID_SIDE)
    return ii.astype(np.float64), jj.astype(np.float64)


def gaussian_blob(center: tuple[float, float], sigma: float) -> np.ndarray:
    ii, jj = _cell_coords()
    return np.exp(-((ii - center[0]) ** 2 + (jj - center[1]) ** 2) / (2.0 * sigma ** 2))


def centered_gaussian(sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Gaussian bump on the grid centre, max-normalized so the centre cell is 1."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    m = gaussian_blob((3.0, 3.0), sigma)
    return m / m.max()


def record_rng(seed: int, key: int | str) -> np.random.Generator:
    """Generator derived from ``seed`` and a record index or id (order independent)."""
    if isinstance(key, str):
        key = zlib.crc32(key.encode("utf-8"))
    return np.random.default_rng([int(seed), int(key)])


def random_map(rng: np.random.Generator) -> np.ndarray:
    return MAP_FLOOR + rng.random(N_CELLS)


def with_attention(ds: Dataset, make_map: Callable[[Record], np.ndarray]) -> Dataset:
    return ds.map_records(lambda r: r.replace(attention_map=make_map(r)))


def centered_everywhere(ds: Dataset, sigma: float = DEFAULT_SIGMA) -> Dataset:
    g = centered_gaussian(sigma)
    return with_attention(ds, lambda r: g.copy())


def uniform_random(ds: Dataset, seed: int) -> Dataset:
    return with_attention(ds, lambda r: random_map(record_rng(seed, r.id)))


def oracle_gated(predictor: Callable[[Record], bool], sigma: float, seed: int, ds: Dataset) -> Dataset:
    """Centered Gaussian where ``predictor`` says correct, i.i.d. uniform noise elsewhere."""
    g = centered_gaussian(sigma)
    return with_attention(
        ds, lambda r: g.copy() if predictor(r) else random_map(record_rng(seed, r.id)))


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic generator.

    ``contrary_fraction`` is the share of records whose planted explanation
    relation is inverted (attention relevant on a wrong answer, error map
    pointing at the evidence of a correct one). ``stack_shape`` ``(L, H, d)``
    switches from a direct ``attention_map`` to full attention stacks with the
    signal planted in ``planted_head``.
    """

    n_records: int = 400
    grid_channels: int = 4
    p_correct: float = 0.5
    attention_signal: AttentionSignal = AttentionSignal.RELEVANT_WHEN_CORRECT
    error_signal: ErrorSignal = ErrorSignal.NONE
    noise_sigma: float = 0.0
    seed: int = 0
    contrary_fraction: float = 0.0
    centered_human_when_correct: bool = False
    stack_shape: tuple[int, int, int] | None = None
    planted_head: tuple[int, int] | None = None
    val_fraction: float = 0.0
    train_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "attention_signal", AttentionSignal(self.attention_signal))
        object.__setattr__(self, "error_signal", ErrorSignal(self.error_signal))
        if self.n_records < 8:
            raise ValueError(f"n_records must be >= 8, got {self.n_records}")
        if not 0.0 < self.p_correct < 1.0:
            raise ValueError(f"p_correct must lie in (0, 1), got {self.p_correct}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.contrary_fraction <= 1.0:
            raise ValueError("contrary_fraction must lie in [0, 1]")
        if self.grid_channels < 1:
            raise ValueError("grid_channels must be >= 1")
        if self.stack_shape is not None:
            n_l, n_h, d = self.stack_shape
            if min(n_l, n_h) < 1 or d < N_CELLS:
                raise ValueError(f"stack_shape needs L, H >= 1 and d >= {N_CELLS}, got {self.stack_shape}")
            if self.planted_head is not None:
                l, h = self.planted_head
                if not (0 <= l < n_l and 0 <= h < n_h):
                    raise ValueError(f"planted_head {self.planted_head} outside stack {self.stack_shape}")

    @property
    def head(self) -> tuple[int, int]:
        if self.planted_head is not None:
            return self.planted_head
        n_l, n_h, _ = self.stack_shape  # type: ignore[misc]
        return (n_l - 1, n_h - 1)


def _ranks01(values: np.ndarray) -> np.ndarray:
    r = np.empty(values.size)
    r[np.argsort(values, kind="stable")] = np.arange(values.size)
    return r / (values.size - 1)


def _relevant_like(ref: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    """A map whose ranks follow ``ref`` (exactly when ``noise`` is 0)."""
    v = _ranks01(ref) + noise * rng.standard_normal(ref.size)
    v = v - v.min()
    if v.max() > 0:
        v = v / v.max()
    temperature = rng.uniform(0.5, 2.0)
    return MAP_FLOOR + v ** temperature


def _blend(a: np.ndarray, b: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Map rank-correlated (about 0.7) with both ``a`` and ``b``."""
    return _relevant_like(_ranks01(a) + _ranks01(b), noise, rng)


def _plant_stack(signal: np.ndarray, shape: tuple[int, int, int], head: tuple[int, int],
                 rng: np.random.Generator) -> AttentionStack:
    n_l, n_h, d = shape
    w = rng.random((n_l, n_h, d, d), dtype=np.float32)
    l, h = head
    row_scale = rng.uniform(0.5, 1.5, size=(d, 1)).astype(np.float32)
    w[l, h, :, :N_CELLS] = signal.astype(np.float32)[None, :] * row_scale
    w[l, h, :, N_CELLS:] *= np.float32(0.1)
    w /= w.sum(axis=-1, keepdims=True)
    return AttentionStack(w, N_CELLS)


def _feature_grid(correct: bool, center: tuple[int, int], channels: int,
                  rng: np.random.Generator) -> np.ndarray:
    g = 0.5 * rng.standard_normal((GRID_SIDE, GRID_SIDE, channels))
    ch0 = 0.3 * rng.standard_normal(N_CELLS)
    if not correct:
        ch0 += 1.5 * gaussian_blob(center, 1.0)
    # failure <=> mean of channel 0 > 0, with a fixed margin
    ch0 += (0.25 if not correct else -0.25) - ch0.mean()
    g[:, :, 0] = ch0.reshape(GRID_SIDE, GRID_SIDE)
    return g


def generate_record(cfg: SynthConfig, index: int) -> Record:
    rng = record_rng(cfg.seed, index)
    correct = bool(rng.random() < cfg.p_correct)
    contrary = bool(rng.random() < cfg.contrary_fraction)
    if cfg.centered_human_when_correct and correct:
        center = (3, 3)
    else:
        center = (int(rng.integers(GRID_SIDE)), int(rng.integers(GRID_SIDE)))
    human = MAP_FLOOR + gaussian_blob(center, 1.2) + 1e-3 * rng.random(N_CELLS)

    sig = cfg.attention_signal
    if sig is AttentionSignal.RANDOM:
        att_relevant = None
    elif sig is AttentionSignal.ALWAYS_RELEVANT:
        att_relevant = not contrary
    else:
        att_relevant = correct != contrary
    if att_relevant:
        attention = _relevant_like(human, cfg.noise_sigma, rng)
    else:
        attention = random_map(rng)

    error = None
    if cfg.error_signal is ErrorSignal.RELEVANT_WHEN_WRONG:
        if (not correct) != contrary:
            error = _blend(human, attention, cfg.noise_sigma, rng)
        else:
            error = random_map(rng)
    elif cfg.error_signal is ErrorSignal.RANDOM:
        error = random_map(rng)

    stack = None
    if cfg.stack_shape is not None:
        stack = _plant_stack(attention, cfg.stack_shape, cfg.head, rng)
        summary = map_summary(all_head_maps(stack))
        attention_map = None
    else:
        summary = map_summary(attention)
        attention_map = attention

    aux = {
        "question": rng.standard_normal(QUESTION_DIM),
        "attention_summary": summary,
        "logits": rng.standard_normal(LOGITS_DIM),
    }
    return Record(
        id=f"synth-{cfg.seed}-{index:06d}",
        correct=correct,
        human_attention=human,
        attention_stack=stack,
        attention_map=attention_map,
        error_map=error,
        feature_grid=_feature_grid(correct, center, cfg.grid_channels, rng),
        aux_features=aux,
    )


def generate(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset; every record is drawn from its own seeded stream."""
    ds = Dataset(tuple(generate_record(cfg, i) for i in range(cfg.n_records)))
    if cfg.val_fraction > 0:
        ds = make_splits(ds, cfg.val_fraction, cfg.seed, cfg.train_fraction)
    return ds
