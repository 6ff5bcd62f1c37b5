import numpy as np
import pytest

from puidrec.data import Dataset
from puidrec.errors import DataError, NumericError
from puidrec.predictors import (FactorModel, ImputationModel, RatingModel, error, gradient_step,
                                pair_error, predict, snapshot, weighted_error_loss)

from conftest import random_dataset


def _zero(model):
    for v in model.params.values():
        v[...] = 0.0
    return model


def test_zero_model_predicts_zero():
    model = _zero(RatingModel(3, 4, dim=2))
    assert predict(model, 1, 2) == 0.0


def test_dot_product_arithmetic():
    model = _zero(RatingModel(1, 1, dim=1))
    model.params["P"][0, 0], model.params["Q"][0, 0] = 2.0, 3.0
    assert predict(model, 0, 0) == 6.0


def _reference_forward(model, users, items, x):
    p = model.params
    out = []
    for b, (u, i) in enumerate(zip(users, items)):
        r = float(p["P"][u] @ p["Q"][i]) + p["bu"][u] + p["bi"][i] + p["g"][0]
        z = np.concatenate([p["P"][u], p["Q"][i], x[b]])
        h = [max(0.0, float(row @ z) + c) for row, c in zip(p["W1"], p["b1"])]
        r += float(np.dot(h, p["w2"])) + p["b2"][0]
        out.append(np.log1p(np.exp(r)) if model.positive else r)
    return np.array(out)


@pytest.mark.parametrize("positive", [False, True])
def test_fusion_matches_reference(rng, positive):
    model = FactorModel(5, 6, dim=3, feature_dim=4, hidden=7, positive=positive, seed=2, init_scale=0.5)
    for v in model.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    users, items = rng.integers(0, 5, 20), rng.integers(0, 6, 20)
    x = rng.normal(size=(20, 4))
    assert np.allclose(model.predict(users, items, x), _reference_forward(model, users, items, x),
                       rtol=0, atol=1e-10)


def test_error_values(rng):
    obs = np.array([[True, False]])
    ds = Dataset(np.array([[2.0, np.nan]]), obs)
    model = _zero(RatingModel(1, 2, dim=1))
    model.params["g"][0] = 4.0
    assert error(model, 0, 0, ds, "squared") == 4.0
    assert error(model, 0, 0, ds, "absolute") == 2.0
    model.params["g"][0] = 2.0
    assert error(model, 0, 0, ds) == 0.0
    with pytest.raises(DataError):
        error(model, 0, 1, ds)
    with pytest.raises(ValueError):
        pair_error(1.0, 2.0, "huber")


def _loss(model, users, items, r, w, x, error_type):
    return weighted_error_loss(model, users, items, r, w, error_type, x)


def _fd_check(model, users, items, r, w, x, error_type, rng, h=1e-5, rel=1e-5):
    pred, cache = model.forward(users, items, x)
    from puidrec.predictors import error_derivative
    grads = model.backward(cache, w * error_derivative(pred, r, error_type))
    for k, v in model.params.items():
        analytic = grads[k] + 2 * model.l2 * v
        idx = [tuple(rng.integers(0, s) for s in v.shape) for _ in range(4)]
        if k == "P":
            idx = [(int(users[0]), j) for j in range(v.shape[1])]
        if k == "Q":
            idx = [(int(items[0]), j) for j in range(v.shape[1])]
        for ix in idx:
            orig = v[ix]
            v[ix] = orig + h
            up = _loss(model, users, items, r, w, x, error_type)
            v[ix] = orig - h
            down = _loss(model, users, items, r, w, x, error_type)
            v[ix] = orig
            num = (up - down) / (2 * h)
            assert abs(num - analytic[ix]) <= rel * max(1.0, abs(num)), (k, ix, num, analytic[ix])


def test_single_pair_gradient():
    model = RatingModel(1, 1, dim=1, l2=0.0)
    model.params["P"][0, 0], model.params["Q"][0, 0] = 0.7, -1.3
    w, r = 2.5, 3.0
    pred, cache = model.forward([0], [0])
    g = model.backward(cache, np.array([w * 2 * (pred[0] - r)]))
    u, v = 0.7, -1.3
    assert g["P"][0, 0] == pytest.approx(2 * w * v * (u * v - r), rel=1e-12)
    h = 1e-5
    f = lambda a: w * (a * v - r) ** 2  # noqa: E731
    assert g["P"][0, 0] == pytest.approx((f(u + h) - f(u - h)) / (2 * h), rel=1e-6)


def test_gradients_match_finite_differences_many_draws():
    rng = np.random.default_rng(0)
    for draw in range(100):
        hidden = [0, 5][draw % 2]
        fdim = 3 if hidden else 0
        positive = draw % 4 >= 2
        model = FactorModel(4, 5, dim=3, feature_dim=fdim, hidden=hidden, l2=1e-3,
                            positive=positive, seed=draw, init_scale=0.5)
        for v in model.params.values():
            v += rng.normal(scale=0.3, size=v.shape)
        users, items = rng.integers(0, 4, 5), rng.integers(0, 5, 5)
        x = rng.normal(size=(5, fdim)) if fdim else None
        r = rng.uniform(1, 5, 5)
        w = rng.uniform(0, 3, 5)
        _fd_check(model, users, items, r, w, x, "squared", rng)


def test_zero_weights_only_shrink():
    model = RatingModel(3, 3, dim=2, l2=0.1, optimizer="sgd", init_scale=1.0)
    before = {k: v.copy() for k, v in model.params.items()}
    gradient_step(model, np.array([0, 1]), np.array([1, 2]), np.array([3.0, 4.0]), np.zeros(2), 0.5)
    for k, v in model.params.items():
        assert np.allclose(v, before[k] * (1 - 2 * 0.1 * 0.5), rtol=0, atol=1e-15)


def test_gradient_step_rejects_bad_input():
    model = RatingModel(2, 2)
    with pytest.raises(ValueError):
        gradient_step(model, [0], [0], [1.0], [1.0], 0.0)
    with pytest.raises(NumericError):
        gradient_step(model, [0], [0], [1.0], [np.inf], 0.1)
    with pytest.raises(NumericError, match=r"\(1, 0\)"):
        gradient_step(model, np.array([0, 1]), np.array([1, 0]), np.array([1.0, np.nan]),
                      np.ones(2), 0.1)


def test_imputation_outputs_non_negative(rng):
    model = ImputationModel(6, 6, dim=3, seed=1, init_scale=2.0)
    model.params["g"][0] = -50.0
    pred = model.predict_grid(None)
    assert (pred >= 0).all()


def test_training_reproducible(rng):
    ds = random_dataset(rng)
    u, i = ds.observed_pairs()
    runs = []
    for _ in range(2):
        model = RatingModel(ds.m, ds.n, dim=4, seed=3)
        for _ in range(10):
            gradient_step(model, u, i, ds.ratings[u, i], np.ones(len(u)), 0.05)
        runs.append(model.fingerprint())
    assert runs[0] == runs[1]


def test_checkpoint_round_trip(tmp_path, rng):
    model = FactorModel(20, 30, dim=4, feature_dim=2, hidden=6, seed=1, init_scale=0.3)
    f = tmp_path / "m.json"
    model.save(f)
    back = FactorModel.load(f)
    users, items = rng.integers(0, 20, 1000), rng.integers(0, 30, 1000)
    x = rng.normal(size=(1000, 2))
    assert np.array_equal(model.predict(users, items, x), back.predict(users, items, x))
    assert back.fingerprint() == model.fingerprint()
    f.write_text('{"format": "other"}')
    with pytest.raises(DataError):
        FactorModel.load(f)


def test_snapshot_isolation_and_caches(rng):
    ds = random_dataset(rng, 15, 12, density=0.6, feat=0)
    phi, theta = RatingModel(15, 12, dim=3, seed=1, init_scale=0.5), ImputationModel(15, 12, dim=3, seed=2)
    snap = snapshot(phi, theta, ds)
    before = snap.phi.predict_grid(ds).copy()
    phi.params["P"] += 1.0
    assert np.array_equal(snap.phi.predict_grid(ds), before)
    snap.check(ds)
    u, i = ds.observed_pairs()
    pick = rng.integers(0, len(u), 100)
    for k in pick:
        assert abs(snap.errors[u[k], i[k]] - error(snap.phi, u[k], i[k], ds)) <= 1e-12
    assert np.isnan(snap.errors[~ds.observed]).all()
    snap.phi.params["g"] += 1
    with pytest.raises(DataError, match="stale"):
        snap.check(ds)


def test_snapshot_of_zero_model(rng):
    ds = random_dataset(rng, feat=0)
    snap = snapshot(_zero(RatingModel(ds.m, ds.n)), None, ds, "absolute")
    assert np.array_equal(snap.errors[ds.observed], ds.ratings[ds.observed])
