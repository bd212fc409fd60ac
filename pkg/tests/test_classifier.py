import math

import numpy as np
import pytest
from scipy.special import expit
from sklearn.base import clone

from edgejudge.classifier import (
    DegenerateLabels,
    EdgeLogisticRegression,
    LayoutMismatch,
    StandardizationStats,
    dumps_model,
    gradient_descent,
    load_model,
    loads_model,
    loss_and_gradient,
    predict_sample,
    save_model,
)
from edgejudge.preprocess import FeatureConfig, build_features, feature_matrix
from edgejudge.synth import SkaterStyle, SynthConfig, crop_sample, generate_jump, generate_samples


def _separable_1d():
    X = np.array([[-1.0], [1.0]] * 10)
    y = np.array([0, 1] * 10)
    return X, y


def test_1d_separable_matches_grid_search():
    X, y = _separable_1d()
    lam = 0.01
    model = EdgeLogisticRegression(l2=lam).fit(X, y)
    p = model.predict_proba(np.array([[-1.0], [1.0]]))[:, 1]
    assert p[0] < 0.1 and p[1] > 0.9
    assert list(model.predict(np.array([[-1.0], [1.0]]))) == [0, 1]

    # brute-force the objective on a grid in standardized units
    Z = model.stats_.apply(X)[:, 0]
    ws = np.arange(0.0, 10.0, 0.005)
    bs = np.arange(-1.0, 1.0, 0.005)
    W, B = np.meshgrid(ws, bs, indexing="ij")
    margins = (2 * y - 1)[None, None, :] * (W[..., None] * Z[None, None, :] + B[..., None])
    obj = np.logaddexp(0, -margins).mean(axis=-1) + 0.5 * lam * W**2
    i, j = np.unravel_index(obj.argmin(), obj.shape)
    assert np.sign(model.coef_[0]) == np.sign(ws[i]) == 1
    assert model.coef_[0] == pytest.approx(ws[i], abs=0.01)
    assert model.intercept_ == pytest.approx(bs[j], abs=0.01)


def test_single_class_is_degenerate():
    with pytest.raises(DegenerateLabels, match="degenerate training labels"):
        EdgeLogisticRegression().fit(np.ones((5, 2)), np.ones(5))


def test_non_binary_labels_rejected():
    with pytest.raises(ValueError):
        EdgeLogisticRegression().fit(np.ones((3, 1)), [0, 1, 2])


def test_duplicated_rows_give_same_weights():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 5))
    y = (X[:, 0] + 0.5 * rng.normal(size=30) > 0).astype(int)
    a = EdgeLogisticRegression().fit(X, y)
    b = EdgeLogisticRegression().fit(np.vstack([X, X]), np.r_[y, y])
    assert np.allclose(a.coef_, b.coef_, rtol=1e-9, atol=1e-12)
    assert a.intercept_ == pytest.approx(b.intercept_, abs=1e-12)


def _fixed_model(w, b, n=3):
    m = EdgeLogisticRegression()
    m.coef_ = np.asarray(w, float)
    m.intercept_ = b
    m.stats_ = StandardizationStats.identity(n)
    m.n_features_in_ = n
    m.classes_ = np.array([0, 1])
    return m


def test_zero_model_predicts_boundary_as_error():
    m = _fixed_model(np.zeros(3), 0.0)
    assert m.predict_proba(np.ones((1, 3)))[0, 1] == 0.5
    assert m.predict(np.ones((1, 3)))[0] == 1


def test_large_bias_saturates():
    m = _fixed_model(np.zeros(3), 50.0)
    assert m.predict_proba(np.zeros((1, 3)))[0, 1] > 0.999


def test_initial_loss_is_ln2():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(10, 4))
    y = np.array([0, 1] * 5, float)
    loss, _ = loss_and_gradient(np.zeros(4), 0.0, X, y, 0.3)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def _numeric_gradient(w, b, X, y, lam, h=1e-6):
    gw = np.empty_like(w)
    for k in range(len(w)):
        e = np.zeros_like(w)
        e[k] = h
        gw[k] = (loss_and_gradient(w + e, b, X, y, lam)[0] - loss_and_gradient(w - e, b, X, y, lam)[0]) / (2 * h)
    gb = (loss_and_gradient(w, b + h, X, y, lam)[0] - loss_and_gradient(w, b - h, X, y, lam)[0]) / (2 * h)
    return gw, gb


def _rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(5, 40), rng.integers(1, 8)
    X, y = rng.normal(size=(n, d)), rng.integers(0, 2, n).astype(float)
    w, b, lam = rng.normal(size=d), rng.normal(), rng.uniform(0, 2)
    _, (gw, gb) = loss_and_gradient(w, b, X, y, lam)
    nw, nb = _numeric_gradient(w, b, X, y, lam)
    assert max(_rel_err(gw, nw).max(), _rel_err(gb, nb)) < 1e-5


def test_gradient_matches_explicit_formula():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(8, 3)), np.array([0, 1, 1, 0, 1, 0, 0, 1], float)
    w, b, lam = rng.normal(size=3), 0.2, 0.7
    loss, (gw, gb) = loss_and_gradient(w, b, X, y, lam)
    p = expit(X @ w + b)
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)) + 0.5 * lam * w @ w
    assert loss == pytest.approx(ref, rel=1e-12)
    assert np.allclose(gw, X.T @ (p - y) / 8 + lam * w)
    assert gb == pytest.approx(np.mean(p - y))


def test_zero_design_zero_weight_gradient():
    _, (gw, gb) = loss_and_gradient(np.zeros(3), 0.0, np.zeros((6, 3)), np.array([1, 1, 1, 1, 0, 0.0]), 0.0)
    assert np.array_equal(gw, np.zeros(3))
    assert gb == pytest.approx(0.5 - 4 / 6)


def test_training_is_deterministic():
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(40, 20)), rng.integers(0, 2, 40)
    a, b = EdgeLogisticRegression().fit(X, y), EdgeLogisticRegression().fit(X, y)
    assert a.coef_.tobytes() == b.coef_.tobytes() and a.intercept_ == b.intercept_
    assert dumps_model(a) == dumps_model(b)


def test_loss_decreases_monotonically():
    rng = np.random.default_rng(6)
    X, y = rng.normal(size=(50, 10)), rng.integers(0, 2, 50).astype(float)
    _, _, n_iter, losses, converged = gradient_descent(X, y, 0.1, learning_rate=5.0)
    assert converged and n_iter == len(losses) - 1
    assert np.all(np.diff(losses) <= 0)


def test_converges_to_stationary_point():
    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(60, 6)), rng.integers(0, 2, 60)
    m = EdgeLogisticRegression(l2=0.5, tol=1e-8).fit(X, y)
    _, (gw, gb) = loss_and_gradient(m.coef_, m.intercept_, m.stats_.apply(X), y.astype(float), 0.5)
    assert m.converged_ and max(np.abs(gw).max(), abs(gb)) < 1e-8


def test_constant_column_guard():
    X = np.c_[np.ones(10), np.arange(10.0)]
    y = (np.arange(10) >= 5).astype(int)
    m = EdgeLogisticRegression().fit(X, y)
    assert m.stats_.scale[0] == 1.0 and np.isfinite(m.coef_).all()


@pytest.mark.parametrize("seed", range(5))
def test_predictions_invariant_to_column_rescaling(seed):
    rng = np.random.default_rng(seed)
    X, y = rng.normal(size=(40, 6)), rng.integers(0, 2, 40)
    Xt = rng.normal(size=(15, 6))
    scale = np.ones(6)
    scale[rng.integers(6)] = rng.uniform(0.01, 100)
    a = EdgeLogisticRegression().fit(X, y)
    b = EdgeLogisticRegression().fit(X * scale, y)
    assert np.array_equal(a.predict(Xt), b.predict(Xt * scale))
    assert np.allclose(a.predict_proba(Xt), b.predict_proba(Xt * scale), atol=1e-6)


def test_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    X, y = rng.normal(size=(30, 4)), rng.integers(0, 2, 30)
    m = EdgeLogisticRegression(l2=0.3, feature_config="cam-pos-12", random_state=4).fit(X, y)
    path = tmp_path / "m.json"
    save_model(m, path)
    back = load_model(path)
    assert back.coef_.tobytes() == m.coef_.tobytes()
    assert back.intercept_ == m.intercept_
    assert np.array_equal(back.stats_.mean, m.stats_.mean)
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))
    assert back.get_params() == m.get_params()
    assert dumps_model(back) == dumps_model(m)


def test_rejects_foreign_model_text():
    with pytest.raises(ValueError, match="unsupported model format"):
        loads_model('{"format": "other"}')


def test_layout_mismatch():
    m = _fixed_model(np.zeros(3), 0.0)
    with pytest.raises(LayoutMismatch):
        m.predict(np.ones((1, 4)))


def test_predict_sample_checks_config():
    cfg = SynthConfig(n_skaters=1, jumps_per_skater=4, seed=2, sources=("camera",))
    samples = generate_samples(cfg)
    X, _ = feature_matrix(samples, FeatureConfig.CamPos60)
    m = EdgeLogisticRegression(feature_config="cam-pos-60").fit(X, [s.label for s in samples])
    p, label = predict_sample(m, build_features(samples[0], FeatureConfig.CamPos60))
    assert 0 <= p <= 1 and label == int(p >= 0.5)
    with pytest.raises(LayoutMismatch, match="trained on cam-pos-60"):
        predict_sample(m, build_features(samples[0], FeatureConfig.CamPos12))


def test_held_out_inside_lean_judged_error():
    cfg = SynthConfig(n_skaters=4, jumps_per_skater=10, seed=21, sources=("camera",), noise_sigma=1.0)
    train = generate_samples(cfg)
    X, _ = feature_matrix(train, FeatureConfig.CamPos12)
    m = EdgeLogisticRegression(feature_config="cam-pos-12").fit(X, [s.label for s in train])
    strong = SynthConfig(lean_error_deg=25.0, noise_sigma=1.0, sources=("camera",))
    for seed in range(5):
        jump = crop_sample(generate_jump(SkaterStyle(), 1, strong, np.random.default_rng([99, seed])), strong)
        assert predict_sample(m, build_features(jump, FeatureConfig.CamPos12))[1] == 1


def test_sklearn_clone_and_params():
    m = EdgeLogisticRegression(l2=0.2, max_iter=10)
    c = clone(m)
    assert c.get_params() == m.get_params() and c is not m
    assert not hasattr(c, "coef_")
    c.set_params(l2=3.0)
    assert c.l2 == 3.0


def test_raw_mode_uses_identity_stats():
    rng = np.random.default_rng(9)
    X, y = rng.normal(5, 3, size=(20, 2)), np.array([0, 1] * 10)
    m = EdgeLogisticRegression(standardize=False).fit(X, y)
    assert np.array_equal(m.stats_.mean, [0, 0]) and np.array_equal(m.stats_.scale, [1, 1])
