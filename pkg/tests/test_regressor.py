import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dxgate.quality import FeatureVector
from dxgate.regressor import (
    Dataset,
    EvalReport,
    GbdtModel,
    Hyperparams,
    ModelFormatError,
    evaluate,
    fit,
    load_model,
    model_from_bytes,
    model_to_bytes,
    predict,
    read_feature_csv,
    save_model,
    split_indices,
    train,
    write_feature_csv,
)


def synthetic(n, seed, noise=0.02, eps_signal=0.5):
    """E depends on D; epsilon only partially explains D."""
    rng = np.random.default_rng(seed)
    eps = np.exp(rng.uniform(0, np.log(1000), n))
    latent = eps_signal * (np.log(eps) / np.log(1000)) + (1 - eps_signal) * rng.uniform(0, 1, n)
    d = np.clip(latent + rng.normal(0, 0.05, n), -1, 1)
    b = np.clip(latent * 0.9 + rng.normal(0, 0.1, n), -1, 1)
    c = np.clip(0.7 + rng.normal(0, 0.05, n), -1, 1)
    e = np.clip(0.1 + 0.8 * d + rng.normal(0, noise, n), -1, 1)
    return Dataset(np.column_stack([eps, b, c, d]), e)


@pytest.fixture(scope="module")
def data():
    return synthetic(2000, 0)


@pytest.fixture(scope="module")
def trained(data):
    return train(data, split_seed=7)


# -- metrics -----------------------------------------------------------------------

def test_evaluate_perfect():
    r = evaluate([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
    assert (r.r2, r.rmse, r.wasted_pct, r.failed_pct) == (1.0, 0.0, 0.0, 0.0)


def test_evaluate_hand_values():
    r = evaluate([0.5, 0.8], [0.45, 0.60])
    assert (r.wasted_pct, r.failed_pct) == (50.0, 50.0)
    r = evaluate([0.3, 0.9], [0.45, 0.85])
    assert (r.wasted_pct, r.failed_pct) == (0.0, 50.0)


def test_evaluate_r2_rmse_formula():
    p, t = np.array([0.2, 0.4, 0.1, 0.9]), np.array([0.25, 0.3, 0.2, 0.7])
    r = evaluate(p, t)
    assert r.rmse == pytest.approx(np.sqrt(np.mean((t - p) ** 2)))
    assert r.r2 == pytest.approx(1 - ((t - p) ** 2).sum() / ((t - t.mean()) ** 2).sum())


def test_evaluate_constant_target_and_errors():
    r = evaluate([0.5, 0.5], [0.5, 0.5])
    assert r.r2 is None and "r2_undefined_constant_target" in r.flags and r.rmse == 0.0
    with pytest.raises(ValueError):
        evaluate([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        evaluate([], [])


@settings(max_examples=60)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=2, max_size=40), st.randoms())
def test_evaluate_properties(pairs, rnd):
    p, t = map(np.array, zip(*pairs))
    r = evaluate(p, t)
    assert r.wasted_pct <= r.failed_pct
    assert 0 <= r.wasted_pct <= 100 and r.rmse >= 0
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    r2 = evaluate(p[perm], t[perm])
    assert (r2.wasted_pct, r2.failed_pct) == (r.wasted_pct, r.failed_pct)
    assert r2.rmse == pytest.approx(r.rmse, abs=1e-12)
    if r.r2 is not None:
        assert r2.r2 == pytest.approx(r.r2, abs=1e-9)


def test_eval_report_round_trip():
    r = EvalReport(0.5, 0.1, 10.0, 20.0, 30, ["x"])
    assert EvalReport.from_dict(r.as_dict()) == r


# -- training -------------------------------------------------------------------

def test_synthetic_r2(trained):
    model, report = trained
    assert report.r2 >= 0.95
    assert report.n == 400


def test_matches_reference_implementation(data):
    sk = pytest.importorskip("sklearn.ensemble")
    tr, te = split_indices(len(data), 7)
    ref = sk.HistGradientBoostingRegressor(max_iter=100, learning_rate=0.1, max_depth=6, min_samples_leaf=20,
                                           max_leaf_nodes=None, early_stopping=False, l2_regularization=0.0)
    ref.fit(data.features[tr], data.targets[tr])
    ref_r2 = evaluate(ref.predict(data.features[te]), data.targets[te]).r2
    ours = train(data, split_seed=7)[1].r2
    assert abs(ours - ref_r2) < 0.01


def test_train_rmse_non_increasing(trained):
    rmse = trained[0].train_rmse
    assert len(rmse) == len(trained[0].trees) + 1
    assert all(b <= a + 1e-12 for a, b in zip(rmse, rmse[1:]))


def test_deterministic_bytes(data):
    a = train(data, Hyperparams(max_iter=20), split_seed=3)
    b = train(data, Hyperparams(max_iter=20), split_seed=3)
    assert model_to_bytes(a[0]) == model_to_bytes(b[0])
    assert a[1] == b[1]


def test_split_is_80_20_and_disjoint():
    tr, te = split_indices(1000, 1)
    assert len(tr) == 800 and len(te) == 200
    assert not set(tr) & set(te)


def test_constant_target():
    ds = Dataset(np.random.default_rng(0).uniform(size=(50, 4)) + [1, 0, 0, 0], np.full(50, 0.4))
    model, report = train(ds, Hyperparams(max_iter=10))
    assert report.r2 is None and "r2_undefined_constant_target" in report.flags
    assert report.rmse == pytest.approx(0.0, abs=1e-12)


def test_constant_features_flagged():
    ds = Dataset(np.ones((40, 4)), np.linspace(-0.5, 0.5, 40))
    _, report = train(ds, Hyperparams(max_iter=5))
    assert "constant_features_r2_le_zero_risk" in report.flags


def test_too_small_or_empty():
    with pytest.raises(ValueError):
        train(Dataset(np.ones((0, 4)), np.ones(0)))
    with pytest.raises(ValueError):
        train(Dataset(np.ones((5, 4)), np.ones(5)))


def test_abcd_beats_epsilon_only(data):
    r_a = train(data, split_seed=1, feature_set="A")[1].r2
    r_abcd = train(data, split_seed=1, feature_set="ABCD")[1].r2
    assert r_abcd >= r_a + 0.1


@settings(max_examples=4, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 0.7))
def test_abcd_beats_epsilon_only_across_generators(seed, eps_signal):
    ds = synthetic(600, seed, noise=0.03, eps_signal=eps_signal)
    hp = Hyperparams(max_iter=50)
    r_a = train(ds, hp, split_seed=seed, feature_set="A")[1].r2
    r_abcd = train(ds, hp, split_seed=seed, feature_set="ABCD")[1].r2
    assert r_abcd >= r_a + 0.1


# -- prediction -----------------------------------------------------------------

def test_zero_tree_model_returns_base():
    m = GbdtModel(("epsilon",), [np.array([1.0, 2.0])], 0.7, 0.1)
    assert predict(m, np.array([[0.0], [5.0], [1e9]])).tolist() == [0.7, 0.7, 0.7]


def test_predict_monotone_in_d():
    rng = np.random.default_rng(3)
    d = rng.uniform(-0.2, 1.0, 1500)
    ds = Dataset(np.column_stack([np.full(1500, 10.0), np.zeros(1500), np.zeros(1500), d]), 0.1 + 0.8 * d)
    model = fit(ds)
    grid = np.linspace(d.min(), d.max(), 200)
    preds = predict(model, np.column_stack([np.full(200, 10.0), np.zeros(200), np.zeros(200), grid]))
    assert np.all(np.diff(preds) >= -1e-12)


def test_predict_out_of_range_and_clamp(trained):
    model = trained[0]
    out = predict(model, np.array([[1e12, -1.0, 1.0, 5.0], [-3.0, 1.0, -1.0, -9.0]]))
    assert np.all(np.isfinite(out)) and np.all(np.abs(out) <= 1.0)


def test_predict_inputs_and_missing_feature(trained):
    model = trained[0]
    fv = FeatureVector(10.0, 0.5, 0.7, 0.6)
    x = predict(model, fv)
    assert isinstance(x, float)
    assert predict(model, fv.as_dict()) == x
    assert predict(model, [fv, fv]).tolist() == [x, x]
    with pytest.raises(KeyError):
        predict(model, {"epsilon": 1.0, "sim_b": 0.1, "sim_c": 0.1})
    with pytest.raises(KeyError):
        predict(model, np.zeros((1, 3)))


# -- persistence ------------------------------------------------------------------

def test_round_trip_bit_exact(trained, tmp_path):
    model = trained[0]
    save_model(model, tmp_path / "m.gbdt")
    back = load_model(tmp_path / "m.gbdt")
    assert model_to_bytes(back) == model_to_bytes(model)
    X = np.random.default_rng(5).uniform([1, -1, -1, -1], [1000, 1, 1, 1], size=(100, 4))
    assert predict(back, X).tobytes() == predict(model, X).tobytes()


def test_corrupted_and_version(trained):
    raw = bytearray(model_to_bytes(trained[0]))
    bad = bytearray(raw)
    bad[40] ^= 0xFF
    with pytest.raises(ModelFormatError, match="checksum"):
        model_from_bytes(bytes(bad))
    ver = bytearray(raw)
    ver[7:9] = (99).to_bytes(2, "little")
    with pytest.raises(ModelFormatError, match="version"):
        model_from_bytes(bytes(ver))
    with pytest.raises(ModelFormatError):
        model_from_bytes(bytes(raw[:-10]))
    with pytest.raises(ModelFormatError, match="magic"):
        model_from_bytes(b"garbage")


# -- CSV ---------------------------------------------------------------------------

def test_feature_csv_round_trip(tmp_path):
    rows = [("r1", FeatureVector(1.0, 0.1, 0.2, 0.3, 0.4, "realized")),
            ("r2", FeatureVector(500.0, -0.1, 0.0, 1.0)),
            ("r3", FeatureVector(2.5, 0.9, 0.8, 0.7, -0.2, "realized"))]
    buf = io.StringIO()
    write_feature_csv(rows, buf)
    path = tmp_path / "f.csv"
    path.write_text(buf.getvalue())
    ds = read_feature_csv(path)
    assert ds.ids == ["r1", "r3"]
    np.testing.assert_array_equal(ds.features[1], [2.5, 0.9, 0.8, 0.7])
    assert ds.targets.tolist() == [0.4, -0.2]
    with pytest.raises(ValueError, match="empty target_e"):
        read_feature_csv(path, skip_unlabeled=False)
    path.write_text("id,epsilon\n1,2\n")
    with pytest.raises(ValueError, match="missing column"):
        read_feature_csv(path)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.array([[1.0, np.nan, 0, 0]]), np.array([0.1]))
    with pytest.raises(ValueError):
        Dataset.from_vectors([FeatureVector(1.0, 0.1, 0.1, 0.1)])
