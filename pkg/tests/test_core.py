import numpy as np
import pytest

from helpmaps.core import (AttentionStack, Dataset, InsufficientDataError, Record, grid, is_constant,
                           make_splits, validate_record)
from conftest import make_record


def test_valid_record_has_no_violations():
    assert validate_record(make_record("a", True)) == []


def test_short_human_attention():
    r = make_record("a", True, human=np.ones(48))
    assert validate_record(r) == ["human_attention: expected 49 values, got 48"]


def test_negative_human_attention():
    h = np.ones(49)
    h[17] = -0.1
    assert validate_record(make_record("a", True, human=h)) == ["human_attention: negative value at index 17"]


def test_non_finite_and_bad_split():
    h = np.ones(49)
    h[3] = np.inf
    v = validate_record(make_record("a", True, human=h, split="holdout"))
    assert any("split" in m for m in v)
    assert "human_attention: non-finite value at index 3" in v


def test_constant_map_detected_not_rejected():
    r = make_record("a", True, human=np.full(49, 0.2))
    assert validate_record(r) == []
    assert is_constant(r.human_attention)


def test_attention_stack_violations():
    ok = AttentionStack(np.full((1, 2, 60, 60), 1 / 60, dtype=np.float32))
    assert ok.violations() == []
    assert ok.weights.dtype == np.float32
    assert "perfect square" in AttentionStack(np.ones((1, 1, 60, 60)), 50).violations()[0]
    assert "exceeds" in AttentionStack(np.ones((1, 1, 40, 40)), 49).violations()[0]
    neg = np.ones((1, 1, 49, 49))
    neg[0, 0, 0, 0] = -1
    assert AttentionStack(neg).violations() == ["attention_stack: negative weight"]
    assert "shape" in AttentionStack(np.ones((2, 49, 49))).violations()[0]


def test_feature_grid_shape_checked():
    r = make_record("a", True, feature_grid=np.zeros((6, 7, 2)))
    assert validate_record(r) == ["feature_grid: expected shape 7 x 7 x C, got (6, 7, 2)"]


def test_dataset_duplicate_ids():
    ds = Dataset((make_record("a", True), make_record("a", False)))
    assert ds.violations() == ["a: id: duplicate id"]


def test_record_is_immutable_and_replace_copies():
    r = make_record("a", True)
    with pytest.raises(Exception):
        r.correct = False  # type: ignore[misc]
    r2 = r.replace(correct=False)
    assert r.correct and not r2.correct and r2.id == "a"


def _ds(n):
    return Dataset(tuple(make_record(f"r{i:04d}", i % 2 == 0) for i in range(n)))


def test_make_splits_small_deterministic():
    ds = _ds(10)
    a = make_splits(ds, 0.3, seed=7)
    b = make_splits(ds, 0.3, seed=7)
    assert [r.split for r in a] == [r.split for r in b]
    assert len(a.split("val")) == 3 and len(a.split("test")) == 7


def test_make_splits_paper_sizes():
    ds = _ds(4120)
    s = make_splits(ds, 1000 / 4120, seed=0)
    assert len(s.split("val")) == 1000 and len(s.split("test")) == 3120


def test_make_splits_sizes_seed_independent():
    ds = _ds(50)
    a, b = make_splits(ds, 0.4, seed=1), make_splits(ds, 0.4, seed=2)
    assert len(a.split("val")) == len(b.split("val")) == 20
    assert {r.id for r in a.split("val")} != {r.id for r in b.split("val")}


def test_make_splits_partition_with_train():
    s = make_splits(_ds(100), 0.2, seed=3, train_fraction=0.5)
    idx = s.split_index
    assert [len(idx[k]) for k in ("train", "val", "test")] == [50, 20, 30]
    assert sorted(sum(idx.values(), [])) == list(range(100))


def test_make_splits_errors():
    with pytest.raises(ValueError):
        make_splits(_ds(10), 1.0, seed=0)
    with pytest.raises(ValueError):
        make_splits(_ds(10), 0.5, seed=0, train_fraction=0.5)
    with pytest.raises(InsufficientDataError):
        make_splits(Dataset(()), 0.5, seed=0)


def test_grid_reshape():
    assert grid(np.arange(49)).shape == (7, 7)
    assert grid(np.arange(49))[1, 0] == 7


def test_record_coerces_inputs():
    r = Record("x", 1, [0.5] * 49, per_head_maps={(1, 0): [1.0] * 49, (0, 2): [2.0] * 49})
    assert r.correct is True
    assert r.human_attention.dtype == np.float64
    assert list(r.per_head_maps) == [(0, 2), (1, 0)]
