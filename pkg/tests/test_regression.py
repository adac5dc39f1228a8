import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import expit

from conftest import response

from ktrace.core import ConfigError, DatasetManifest, SparseVector
from ktrace.features import F, Recipe, fit_encoders
from ktrace.regression import (
    Model,
    TrainConfig,
    TrainingDivergenceError,
    fit,
    load_model,
    nll,
    nll_and_gradient,
    predict_proba,
    predict_proba_batch,
    reg_mask_for,
    save_model,
    sigmoid,
)

LN2 = 0.6931471805599453


def test_sigmoid_examples():
    assert sigmoid(0.0) == 0.5
    assert 0.0 < sigmoid(-40.0) < 1e-17
    assert sigmoid(30.0) < 1.0
    # the extreme tails saturate instead of overflowing
    assert sigmoid(40.0) == 1.0
    assert sigmoid(-800.0) == 0.0


def test_sigmoid_matches_expit(rng):
    z = rng.normal(scale=10.0, size=200)
    got = np.array([sigmoid(v) for v in z])
    assert np.max(np.abs(got - expit(z))) < 1e-15


def test_nll_single_example_at_zero():
    X = sp.csr_matrix(np.array([[1.0, 1.0]]))
    for y in (0.0, 1.0):
        assert abs(nll(np.zeros(2), X, np.array([y])) - LN2) < 1e-15


def test_gradient_single_example_at_zero():
    X = sp.csr_matrix(np.array([[1.0, 1.0, 0.0]]))
    _, g = nll_and_gradient(np.zeros(3), X, np.array([1.0]))
    assert np.allclose(g, [-0.5, -0.5, 0.0], atol=1e-15)
    _, g = nll_and_gradient(np.zeros(3), X, np.array([0.0]))
    assert np.allclose(g, [0.5, 0.5, 0.0], atol=1e-15)


def test_gradient_matches_central_differences(rng):
    n, d = 60, 7
    X = sp.csr_matrix(rng.normal(size=(n, d)))
    y = (rng.random(n) < 0.5).astype(float)
    w = rng.normal(size=d)
    mask = np.ones(d)
    mask[0] = 0.0
    value, grad = nll_and_gradient(w, X, y, l2=0.01, reg_mask=mask)
    h = 1e-6
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        fd = (nll(w + e, X, y, 0.01, mask) - nll(w - e, X, y, 0.01, mask)) / (2 * h)
        rel = abs(fd - grad[j]) / max(abs(grad[j]), 1e-12)
        assert rel < 1e-6, (j, fd, grad[j])


def test_penalty_excludes_masked_weights():
    X = sp.csr_matrix(np.zeros((1, 2)))
    w = np.array([3.0, 4.0])
    y = np.array([0.0])
    full = nll(w, X, y, l2=2.0)
    masked = nll(w, X, y, l2=2.0, reg_mask=np.array([0.0, 1.0]))
    assert abs(full - (LN2 + 25.0)) < 1e-12
    assert abs(masked - (LN2 + 16.0)) < 1e-12


def test_reg_mask_for_encoder_excludes_bias():
    students = {"s1": [response("s1", 10, "q1", ["k1"], True)]}
    recipe = Recipe(families=(F("question"), F("bias"), F("kc")))
    enc = fit_encoders(students, recipe, DatasetManifest.minimal("m"))
    mask = reg_mask_for(enc)
    off, size = enc.offset_of("bias")
    assert size == 1 and mask[off] == 0.0
    assert mask.sum() == enc.dim - 1


def test_shape_mismatch_raises():
    X = sp.csr_matrix(np.ones((3, 2)))
    with pytest.raises(ConfigError):
        nll_and_gradient(np.zeros(2), X, np.zeros(2))
    with pytest.raises(ConfigError):
        fit(X, np.zeros(2))
    with pytest.raises(ConfigError):
        fit(sp.csr_matrix((0, 2)), np.zeros(0))


def _margin_data(rng, n=300, d=6, margin=0.5):
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d)
    z = X @ w
    keep = np.abs(z) > margin
    return sp.csr_matrix(X[keep]), (z[keep] > 0).astype(float)


def test_fit_separable_reaches_full_accuracy(rng):
    X, y = _margin_data(rng)
    model = fit(X, y, TrainConfig(l2=1e-8))
    pred = (predict_proba_batch(model, X) >= 0.5).astype(float)
    assert np.array_equal(pred, y)
    assert model.info["converged"]


def test_fit_intercept_only_recovers_rate():
    n = 1000
    X = sp.csr_matrix(np.ones((n, 1)))
    y = np.zeros(n)
    y[:700] = 1.0
    model = fit(X, y, TrainConfig(l2=1e-6), reg_mask=np.zeros(1))
    p = predict_proba(model, SparseVector.from_pairs([(0, 1.0)]))
    assert abs(p - 0.7) < 1e-3


def test_fit_deterministic_bitwise(rng):
    X, y = _margin_data(rng, margin=0.0)
    a = fit(X, y, TrainConfig())
    b = fit(X, y, TrainConfig())
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.info == b.info


def test_fit_nll_not_worse_than_start(rng):
    X, y = _margin_data(rng, margin=0.0)
    cfg = TrainConfig(l2=1e-3)
    model = fit(X, y, cfg)
    start = nll(np.zeros(X.shape[1]), X, y, cfg.l2)
    assert model.info["final_nll"] < start


def test_fit_optimum_independent_of_init(rng):
    # strong convexity so both runs land on the same optimum
    X, y = _margin_data(rng, margin=0.0)
    cfg = TrainConfig(l2=1.0)
    a = fit(X, y, cfg)
    b = fit(X, y, cfg, init=rng.normal(size=X.shape[1]) * 3.0)
    assert abs(a.info["final_nll"] - b.info["final_nll"]) < 1e-4
    assert np.max(np.abs(a.weights - b.weights)) < 0.01


def test_fit_divergent_init_raises(rng):
    X, y = _margin_data(rng, margin=0.0)
    with pytest.raises(TrainingDivergenceError):
        fit(X, y, TrainConfig(l2=1e-6), init=np.full(X.shape[1], 1e200))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(l2=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(initial_step=0.0)


def test_predict_scalar_matches_batch(rng):
    d = 5
    w = rng.normal(size=d)
    model = Model(weights=w)
    rows = []
    for _ in range(20):
        idx = sorted(rng.choice(d, size=2, replace=False))
        rows.append(SparseVector.from_pairs([(int(i), float(rng.normal())) for i in idx]))
    X = sp.csr_matrix(np.array([r.dense(d) for r in rows]))
    batch = predict_proba_batch(model, X)
    single = np.array([predict_proba(model, r) for r in rows])
    assert np.max(np.abs(batch - single)) < 1e-15


def test_model_json_roundtrip(tmp_path, rng):
    students = {"s1": [response("s1", 10, "q1", ["k1"], True),
                       response("s1", 20, "q2", ["k1"], False)]}
    recipe = Recipe(families=(F("bias"), F("question")))
    enc = fit_encoders(students, recipe, DatasetManifest.minimal("m"))
    w = np.array([0.25, 0.0, -1.5])
    model = Model(weights=w, recipe=recipe, encoder=enc, info={"epochs": 3})
    path = tmp_path / "model.json"
    digest = save_model(model, path)
    assert len(digest) == 64
    again = load_model(path, encoder=enc)
    assert np.array_equal(again.weights, w)
    assert again.recipe == recipe
    assert again.info["epochs"] == 3

    other = fit_encoders(students, Recipe(families=(F("bias"), F("kc"))), DatasetManifest.minimal("m"))
    with pytest.raises(ConfigError):
        load_model(path, encoder=other)


def test_fit_ties_weights_to_encoder_bias_block(rng):
    """With an encoder given, the bias weight is not shrunk by l2."""
    n = 400
    students = {"s1": [response("s1", 10 * i, "q1", ["k1"], True) for i in range(3)]}
    enc = fit_encoders(students, Recipe(families=(F("bias"),)), DatasetManifest.minimal("m"))
    X = sp.csr_matrix(np.ones((n, 1)))
    y = np.zeros(n)
    y[: n // 2 + 100] = 1.0
    strong = TrainConfig(l2=50.0)
    with_enc = fit(X, y, strong, encoder=enc)
    without = fit(X, y, strong)
    target = math.log((n // 2 + 100) / (n // 2 - 100))
    assert abs(with_enc.weights[0] - target) < 1e-3
    assert abs(without.weights[0]) < abs(with_enc.weights[0])
