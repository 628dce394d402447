import numpy as np
import pytest

from helpmaps import justifier as J
from helpmaps.baselines import SynthConfig, generate
from helpmaps.core import FormatError, N_CELLS, validate_record
from conftest import make_record
from oracles import central_difference, justifier_forward_loop, max_relative_error

DIMS = J.JustifierDims(channels=2, question_dim=3, summary_dim=4, logits_dim=3, conv_channels=2, hidden=4)


def _record(rng, dims=DIMS, rid="j0", correct=False):
    aux = {"question": rng.standard_normal(dims.question_dim),
           "attention_summary": rng.standard_normal(dims.summary_dim),
           "logits": rng.standard_normal(dims.logits_dim)}
    return make_record(rid, correct, feature_grid=rng.standard_normal((7, 7, dims.channels)),
                       aux_features=aux)


def _perturbed_params(dims, seed):
    rng = np.random.default_rng(seed)
    p = J.JustifierParams.init(dims, seed)
    for k in p.weights:
        p.weights[k] = p.weights[k] + 0.1 * rng.standard_normal(p.weights[k].shape)
    return p


def test_default_latent_width():
    dims = J.JustifierDims(4, 8, 8, 8)
    assert dims.latent == 384
    p = J.JustifierParams.init(dims, 0)
    assert all(np.all(np.isfinite(w)) for w in p.weights.values())
    assert p["fail_w"].shape == (384,)


def test_zero_params_give_half(rng):
    fp, jatt, _ = J.forward(J.JustifierParams.zeros(DIMS), _record(rng))
    assert fp == 0.5
    np.testing.assert_array_equal(jatt, np.full(N_CELLS, 0.5))


def test_negating_failure_head_flips_probability(rng):
    p = _perturbed_params(DIMS, 1)
    r = _record(rng)
    fp = J.forward(p, r)[0]
    q = p.copy()
    q.weights["fail_w"] *= -1
    q.weights["fail_b"] *= -1
    assert J.forward(q, r)[0] == pytest.approx(1 - fp, abs=1e-14)


def test_forward_matches_loop_oracle(rng):
    for seed in range(3):
        p = _perturbed_params(DIMS, seed)
        r = _record(rng)
        fp, jatt, _ = J.forward(p, r)
        aux = [r.aux_features[k] for k in J.AUX_KEYS]
        ofp, ojatt = justifier_forward_loop(p.weights, DIMS, r.feature_grid, aux)
        assert fp == pytest.approx(ofp, rel=1e-12)
        np.testing.assert_allclose(jatt, ojatt, rtol=1e-12)


def _batch(rng, dims, n=3):
    return J.Batch(rng.standard_normal((n, 7, 7, dims.channels)),
                   tuple(rng.standard_normal((n, d)) for d in (dims.question_dim, dims.summary_dim,
                                                                dims.logits_dim)))


def test_parameter_gradients_match_finite_differences(rng):
    p = _perturbed_params(DIMS, 7)
    b = _batch(rng, DIMS)
    failed = np.array([1.0, 0.0, 1.0])
    target = rng.random((3, N_CELLS))
    _, _, _, grads = J.loss_and_grads(p, b, failed, target, 0.7)
    for name, w in p.weights.items():
        num = central_difference(lambda: J.loss_and_grads(p, b, failed, target, 0.7, False)[0], w)
        assert max_relative_error(grads[name], num) < 1e-4, name


def test_input_gradient_matches_finite_differences(rng):
    p = _perturbed_params(DIMS, 3)
    r = _record(rng)
    grad, _ = J.input_gradient(p, r)
    x = r.feature_grid.copy()
    b = J.Batch(x[None], tuple(r.aux_features[k][None] for k in J.AUX_KEYS))
    num = central_difference(lambda: float(J.forward_batch(p, b).fail_logit[0]), x)
    assert max_relative_error(grad, num) < 1e-4


def _center_detector():
    """Failure logit is a monotone function of feature_grid[3, 3, 0] alone."""
    dims = J.JustifierDims(2, 1, 1, 1, conv_channels=1, hidden=1)
    p = J.JustifierParams.zeros(dims)
    p.weights["conv_w"][1, 1, 0, 0] = 0.5  # centre tap, channel 0
    p.weights["img_w"][3 * 7 + 3, 0] = 1.0  # conv output at cell (3, 3)
    p.weights["fail_w"][0] = 3.0
    return dims, p


def test_gradcam_hand_constructed_center(rng):
    dims, p = _center_detector()
    g = 0.1 * rng.standard_normal((7, 7, 2))
    g[3, 3, 0] = 2.0
    r = make_record("c", False, feature_grid=g,
                    aux_features={"question": [0.0], "attention_summary": [0.0], "logits": [0.0]})
    grad, _ = J.input_gradient(p, r)
    assert np.count_nonzero(grad) == 1 and grad[3, 3, 0] > 0
    for variant in ("gradcam", "grad_x_input"):
        m = J.gradcam_error_map(p, r, variant).map
        assert np.argmax(m) == 3 * 7 + 3
        assert m.max() == 1.0 and m.min() >= 0


def test_gradcam_zero_grid_gives_zero_map(rng):
    p = _perturbed_params(DIMS, 2)
    r = _record(rng).replace(feature_grid=np.zeros((7, 7, 2)))
    res = J.gradcam_error_map(p, r)
    np.testing.assert_array_equal(res.map, np.zeros(N_CELLS))
    assert 0 < res.failure_prob < 1


def test_gradcam_unknown_variant(rng):
    with pytest.raises(ValueError):
        J.gradcam_error_map(_perturbed_params(DIMS, 2), _record(rng), "saliency")


@pytest.fixture(scope="module")
def separable():
    return generate(SynthConfig(n_records=300, seed=11, error_signal="relevant_when_wrong",
                                val_fraction=0.2, train_fraction=0.5))


def test_training_reaches_high_val_accuracy(separable):
    res = J.train(separable, J.TrainConfig(epochs=120, seed=0))
    assert res.loss_trace[-1] < res.loss_trace[0]
    assert J.failure_accuracy(res.params, separable.split("val")) >= 0.9


def test_small_learning_rate_descends(separable):
    for lr in (0.01, 0.05, 0.2):
        res = J.train(separable, J.TrainConfig(epochs=10, learning_rate=lr, seed=1, hidden=16))
        assert res.loss_trace[-1] <= res.loss_trace[0]
        assert all(b <= a + 1e-12 for a, b in zip(res.loss_trace, res.loss_trace[1:]))


def test_lambda_zero_leaves_jatt_head_untouched(separable):
    cfg = J.TrainConfig(epochs=5, lambda_att=0.0, seed=2, hidden=8)
    res = J.train(separable, cfg)
    init = J.JustifierParams.init(res.params.dims, 2)
    np.testing.assert_array_equal(res.params["att_w"], init["att_w"])
    np.testing.assert_array_equal(res.params["att_b"], init["att_b"])
    assert not np.array_equal(res.params["fail_w"], init["fail_w"])


def test_minibatch_training_deterministic(separable):
    cfg = J.TrainConfig(epochs=3, seed=4, batch_size=32, hidden=8)
    a, b = J.train(separable, cfg), J.train(separable, cfg)
    assert a.loss_trace == b.loss_trace
    assert a.params.to_bytes() == b.params.to_bytes()


def test_annotate_deterministic_and_valid(separable):
    params = J.train(separable, J.TrainConfig(epochs=20, seed=0, hidden=16)).params
    a = J.annotate_error_maps(params, separable, "test")
    b = J.annotate_error_maps(params, separable, "test")
    for x, y in zip(a, b):
        if x.split == "test":
            assert np.array_equal(x.error_map, y.error_map)
            assert validate_record(x) == []
        else:
            assert x.error_map is y.error_map


def test_params_round_trip(tmp_path):
    p = _perturbed_params(DIMS, 5)
    path = tmp_path / "p.bin"
    p.save(path)
    q = J.JustifierParams.load(path)
    assert q.dims == p.dims
    for k in p.weights:
        np.testing.assert_array_equal(p[k], q[k])
    data = path.read_bytes()
    assert data[:4] == b"JPRM"
    with pytest.raises(FormatError):
        J.JustifierParams.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        J.JustifierParams.from_bytes(data[:-8])
    with pytest.raises(FormatError):
        J.JustifierParams.from_bytes(data + b"\0")


def test_dimension_mismatch_rejected(rng):
    other = J.JustifierDims(3, 3, 4, 3, 2, 4)
    with pytest.raises(ValueError):
        J.forward(J.JustifierParams.zeros(other), _record(rng))
