import numpy as np
import pytest

from helpmaps.core import InsufficientDataError, MissingMapError, N_CELLS
from helpmaps.metrics import (Mode, help_attention, help_error, help_from_relevances, help_joint,
                              help_score, relevance, relevance_triple)
from conftest import make_record
from oracles import pooled_z, spearman_oracle


def _human(seed):
    return np.random.default_rng(seed).random(N_CELLS) + 0.01


def test_relevance_identity_and_reversal():
    h = _human(0)
    assert relevance(make_record("a", True, h, attention=h))[0] == pytest.approx(1.0)
    rev = h.max() + h.min() - h
    assert relevance(make_record("a", True, h, attention=rev))[0] == pytest.approx(-1.0)


def test_relevance_matches_oracle(rng):
    h, a, e = rng.random(N_CELLS), rng.random(N_CELLS), rng.random(N_CELLS)
    r = make_record("a", False, h, attention=a, error=e)
    assert relevance(r, "attention")[0] == pytest.approx(spearman_oracle(a, h), abs=1e-12)
    assert relevance(r, "error")[0] == pytest.approx(spearman_oracle(e, h), abs=1e-12)
    assert relevance(r, "joint")[0] == pytest.approx(spearman_oracle(e, a), abs=1e-12)
    t = relevance_triple(r)
    assert -1 <= t.rel_a <= 1 and t.rel_err is not None and t.rel_ea is not None


def test_relevance_missing_map():
    with pytest.raises(MissingMapError):
        relevance(make_record("a", True), Mode.ERROR)
    t = relevance_triple(make_record("a", True))
    assert t.rel_a is None and t.rel_err is None


def test_help_prescribed_attention_relevances():
    c, w = [0.8, 0.81, 0.79], [0.2, 0.21, 0.19]
    rep = help_from_relevances(c, w, Mode.ATTENTION)
    assert rep.help_z > 10
    assert rep.help_z == pytest.approx(pooled_z(c, w), rel=1e-12)
    assert rep.mean_rel_correct == pytest.approx(0.8)


def test_help_error_sign_flipped():
    c, w = [0.1, 0.12, 0.09, 0.11], [0.8, 0.79, 0.82, 0.8]
    rep = help_from_relevances(c, w, Mode.ERROR)
    assert rep.help_z > 10
    assert rep.help_z == pytest.approx(-pooled_z(c, w), rel=1e-12)


def test_help_identical_classes_zero():
    vals = [0.1, 0.4, 0.3]
    for mode in Mode:
        rep = help_from_relevances(vals, vals, mode)
        assert rep.help_z == 0.0 and str(rep.help_z) == "0.0"


def _mapped_records(n, rel_correct_fn, rel_wrong_fn, field="attention_map"):
    out = []
    for i in range(n):
        h = _human(i)
        correct = i % 2 == 0
        m = (rel_correct_fn if correct else rel_wrong_fn)(h, i)
        out.append(make_record(f"r{i:03d}", correct, h, **{field.replace("_map", ""): m}))
    return out


def test_help_attention_on_records():
    recs = _mapped_records(40, lambda h, i: h + 0.1 * _human(100 + i), lambda h, i: _human(200 + i))
    rep = help_attention(recs)
    assert rep.help_z > 5
    assert rep.n_correct == rep.n_wrong == 20


def test_help_error_label_swap_negates():
    recs = _mapped_records(40, lambda h, i: _human(300 + i), lambda h, i: h + 0.1 * _human(i + 50),
                           field="error_map")
    rep = help_error(recs)
    swapped = help_error([r.replace(correct=not r.correct) for r in recs])
    assert rep.help_z > 5
    assert swapped.help_z == -rep.help_z


def test_help_joint_reversal_construction(rng):
    recs = []
    for i in range(20):
        h, a = _human(i), _human(500 + i)
        correct = i % 2 == 0
        err = (a.max() + a.min() - a) if correct else a + 1e-3 * rng.random(N_CELLS)
        recs.append(make_record(f"r{i:03d}", correct, h, attention=a, error=err))
    rep = help_joint(recs)
    assert rep.mean_rel_correct == pytest.approx(-1.0)
    assert rep.mean_rel_wrong > 0.99
    assert rep.help_z > 10


def test_degenerate_records_excluded_and_counted():
    recs = _mapped_records(20, lambda h, i: h + 0.2 * _human(i + 9), lambda h, i: _human(i + 70))
    recs.append(make_record("z-flat", False, _human(999), attention=np.full(N_CELLS, 0.3)))
    rep = help_attention(recs)
    assert rep.n_excluded_wrong == 1 and rep.n_excluded == 1
    assert rep.n_correct + rep.n_wrong == len(recs) - 1


def test_order_independent(rng):
    recs = _mapped_records(30, lambda h, i: h + 0.5 * _human(i + 9), lambda h, i: _human(i + 70))
    shuffled = [recs[i] for i in rng.permutation(len(recs))]
    assert help_attention(recs).help_z == help_attention(shuffled).help_z


def test_insufficient_classes():
    recs = _mapped_records(6, lambda h, i: h, lambda h, i: _human(i + 1))
    with pytest.raises(InsufficientDataError):
        help_attention([r for r in recs if r.correct] + [r for r in recs if not r.correct][:1])


def test_unpooled_mode_and_report_dict():
    recs = _mapped_records(30, lambda h, i: h + 0.5 * _human(i + 9), lambda h, i: _human(i + 70))
    rep = help_score(recs, "attention", "unpooled")
    d = rep.to_dict()
    assert d["variance_mode"] == "unpooled" and d["mode"] == "attention"
    assert set(d) >= {"mean_rel_correct", "mean_rel_wrong", "help_z", "p_value", "n_correct",
                      "n_wrong", "n_excluded"}
