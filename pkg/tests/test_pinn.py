import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dabtps.pinn import (DatasetRanges, MlpModel, TrainConfig, build_physics_table, custom_loss,
                         denormalize, evaluate, generate_synthetic_dataset, loss_and_grads,
                         normalize, prepare_dataset, train)


def _toy_phys(Lt, Rt):
    # smooth stand-in for the power model: P ~ 1/Lt, loss ~ Rt
    P = 1.0 / (0.5 + Lt)
    return np.column_stack([P + 0.3 * Rt, P - 0.2 * Rt])


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


@pytest.mark.parametrize("lam", [0.0, 0.8])
def test_gradient_check_every_layer(lam):
    rng = np.random.default_rng(0)
    model = MlpModel.init((8, 16, 16, 2), seed=1, dropout=0.0, l2=0.01)
    X = rng.uniform(size=(12, 8))
    Y = rng.uniform(size=(12, 2))
    meas = rng.uniform(0.5, 1.0, size=(12, 2))
    phys = (_toy_phys, meas, 1.0, np.array([1.0, 1.0]), np.array([0.0, 0.0]))
    _, gW, gb = loss_and_grads(model, X, Y, lam, phys)
    h = 1e-6
    for params, grads in ((model.W, gW), (model.b, gb)):
        for p_, g_ in zip(params, grads):
            for idx in [tuple(rng.integers(0, s) for s in p_.shape) for _ in range(6)]:
                old = p_[idx]
                p_[idx] = old + h
                up = loss_and_grads(model, X, Y, lam, phys)[0]
                p_[idx] = old - h
                dn = loss_and_grads(model, X, Y, lam, phys)[0]
                p_[idx] = old
                assert _rel(g_[idx], (up - dn) / (2 * h)) < 1e-5


def test_physics_share_grows_with_lambda():
    rng = np.random.default_rng(2)
    model = MlpModel.init((8, 8, 2), seed=0, dropout=0.0, l2=0.0)
    X, Y = rng.uniform(size=(20, 8)), rng.uniform(size=(20, 2))
    meas = rng.uniform(0.5, 1.0, size=(20, 2))
    phys = (_toy_phys, meas, 1.0, np.ones(2), np.zeros(2))
    base = loss_and_grads(model, X, Y, 0.0, phys)[0]
    shares = []
    for lam in (0.1, 0.5, 0.8, 2.0):
        tot = loss_and_grads(model, X, Y, lam, phys)[0]
        shares.append((tot - base) / tot)
    assert all(a < b for a, b in zip(shares, shares[1:]))


def test_custom_loss_zero_at_perfect_prediction():
    Y = np.array([[0.2, 0.4], [0.6, 0.1]])
    P = np.array([[1000.0, 990.0], [500.0, 495.0]])
    assert custom_loss(Y, Y, P, P, 0.8) == 0.0
    assert custom_loss(Y, Y + 0.1, P, P, 0.8) == pytest.approx(0.02)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_normalization_round_trip(seed):
    rng = np.random.default_rng(seed)
    Y = rng.uniform(1e-6, 2e-5, size=(30, 2))
    lo, hi = Y.min(0), Y.max(0)
    assert np.allclose(denormalize(normalize(Y, lo, hi), lo, hi), Y, rtol=1e-12, atol=0)


@pytest.fixture(scope="module")
def small_data(p_nom):
    return generate_synthetic_dataset(p_nom, 200, seed=5)


def test_dataset_physics(small_data):
    ds = small_data
    assert len(ds) == 200
    assert np.all(ds.Pp_in > ds.Ps_out)
    assert np.allclose(ds.X[:, 4], ds.Pp_in - ds.Ps_out)
    r = DatasetRanges()
    assert np.all((ds.X[:, 1] >= r.Vout[0]) & (ds.X[:, 1] <= r.Vout[1]))


def test_lt_labels_span_wide_range(p_nom):
    from dabtps.core import lumped_params
    ds = generate_synthetic_dataset(p_nom, 400, seed=1)
    ratio = ds.Y[:, 0] / lumped_params(p_nom)["Lt"]
    assert ratio.min() < 0.35 and ratio.max() > 1.6


def test_split_partitions(small_data):
    prep = prepare_dataset(small_data, seed=0)
    idx = np.concatenate([prep.train, prep.val, prep.test])
    assert sorted(idx.tolist()) == list(range(len(small_data)))
    assert len(prep.train) == 140 and len(prep.val) == 40


def test_csv_round_trip(tmp_path, small_data):
    small_data.to_csv(tmp_path / "d.csv")
    back = type(small_data).from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.X, small_data.X) and np.array_equal(back.Y, small_data.Y)


def test_training_is_deterministic_and_serializable(tmp_path, p_nom, small_data):
    prep = prepare_dataset(small_data, seed=0)
    table, rmap = build_physics_table(p_nom, prep, nL=6, nR=2)
    cfg = TrainConfig(epochs=3, seed=4)
    m1, h1 = train(prep, cfg, table, rmap)
    m2, h2 = train(prep, cfg, table, rmap)
    assert h1.train == h2.train
    assert all(np.array_equal(a, b) for a, b in zip(m1.W, m2.W))
    m1.save(tmp_path / "m.yaml")
    m3 = MlpModel.load(tmp_path / "m.yaml")
    assert np.array_equal(m3.predict_physical(small_data.X), m1.predict_physical(small_data.X))
    assert set(evaluate(m1, prep)) == {"MAE_Lt", "MAE_Rt"}


def test_physics_table_matches_direct_solve(p_nom, small_data):
    from dabtps.core import lumped_params, scale_to_lumped
    from dabtps.optimizer import LossModel
    prep = prepare_dataset(small_data, seed=0)
    rows = prep.train[:5]
    table, rmap = build_physics_table(p_nom, prep, rows=rows, nL=16, nR=3)
    Lt = small_data.Y[rows, 0]
    Rt = small_data.Y[rows, 1]
    got = table(rmap[rows], Lt, Rt)
    for k, r in enumerate(rows):
        q = scale_to_lumped(p_nom, Lt[k], Rt[k])
        x = small_data.X[r]
        _, res = LossModel(q).full(x[0], x[1], x[5], x[6], x[7])
        ref = np.array([res["Pp_in"][0], res["Ps_out"][0]])
        # interpolation error of the Lt-scaled table
        assert np.allclose(got[k], ref, rtol=2e-3)
