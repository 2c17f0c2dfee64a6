import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from simreuse.lsh import hash_rows, new_hasher
from simreuse.models import init_model
from simreuse.reuse import reuse_matmul
from simreuse.streams import gen_stream
from simreuse.tuner import (
    GP_JITTER, LayerOracle, LayerResult, TrialRecord, TuneBudget, apply_tuning, ei_from_moments,
    expected_improvement, gp_fit, initial_design, load_tuning, model_oracles, normalize_points,
    random_search, save_tuning, theta_objective, tune_layer, tune_model,
)

BOUNDS = ((1, 16), (4, 12))


def trial(hs, dim, theta):
    return TrialRecord.make(hs, dim, theta, 1.0)


def correlated_rows(seed, n=64, dim=12):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((8, dim))
    return base[rng.integers(0, 8, n)] + 0.05 * rng.standard_normal((n, dim))


# -- trial records -------------------------------------------------------------------

def test_trial_record_identity():
    t = TrialRecord.make(4, 6, 0.3, 1.5)
    assert t.theta == t.mse / t.sigma
    with pytest.raises(ValueError):
        TrialRecord(4, 6, 0.3, 1.5, 0.21)
    with pytest.raises(ValueError):
        TrialRecord.make(4, 6, 0.3, 0.5)


def test_budget_validation():
    with pytest.raises(ValueError):
        TuneBudget(n_init=10, n_total=5)
    with pytest.raises(ValueError):
        TuneBudget(n_init=0)
    assert TuneBudget().bounds(72) == ((1, 16), (4, 72))
    assert TuneBudget().bounds(2) == ((1, 16), (2, 2))
    assert len(TuneBudget().grid(8)) == 16 * 5


# -- theta objective -----------------------------------------------------------------

def test_duplicated_rows_give_zero_theta(rng):
    # The centroid is the row itself; only BLAS summation order separates
    # the one-row product from the ten-row one.
    x = np.tile(rng.standard_normal(8), (10, 1))
    t = theta_objective(LayerOracle.matmul("l", rng.standard_normal((8, 3))), x, 6, 8)
    assert t.mse <= 1e-24 and t.theta <= 1e-24 and t.sigma == 10.0


def test_two_clusters_record_sigma_four(rng):
    base = rng.standard_normal((2, 6))
    h = new_hasher(6, 8, 3)
    assert hash_rows(h, base)[0] != hash_rows(h, base)[1]
    x = base[[0, 1, 0, 1, 1, 0, 0, 1]]
    t = theta_objective(LayerOracle.matmul("l", rng.standard_normal((6, 2))), x, 8, 6, hasher_seed=3)
    assert t.sigma == 4.0


def test_theta_matches_recomputation(rng):
    x, w = rng.standard_normal((40, 10)), rng.standard_normal((10, 4))
    t = theta_objective(LayerOracle.matmul("l", w), x, 5, 7, hasher_seed=11)
    exact = x @ w
    approx, st_ = reuse_matmul(x, w, new_hasher(7, 5, 11))
    assert t.theta == pytest.approx(np.mean((approx - exact) ** 2) / st_.sigma, rel=1e-12)


def test_theta_rejects_bad_params(rng):
    oracle = LayerOracle.matmul("l", np.ones((4, 2)))
    with pytest.raises(ValueError):
        theta_objective(oracle, np.ones((3, 4)), 4, 5)
    with pytest.raises(ValueError):
        theta_objective(oracle, np.ones((3, 4)), 0, 4)
    with pytest.raises(ValueError):
        theta_objective(oracle, np.ones((0, 4)), 4, 4)


# -- GP surrogate --------------------------------------------------------------------

def test_single_point_gp():
    post = gp_fit([trial(5, 8, 0.7)], BOUNDS)
    mu = post.predict_theta(normalize_points([(5, 8)], BOUNDS))
    assert mu[0] == pytest.approx(0.7, abs=1e-4)
    far = post.predict_theta(np.array([[30.0, 30.0]]))
    assert far[0] == pytest.approx(0.7, abs=1e-4)   # the trial mean


def test_two_point_gp_matches_closed_form():
    trials = [trial(2, 5, 0.2), trial(12, 10, 0.9)]
    post = gp_fit(trials, BOUNDS)
    x = normalize_points([(2, 5), (12, 10)], BOUNDS)
    np.testing.assert_allclose(post.predict_theta(x), [0.2, 0.9], atol=1e-3)

    ell, s2 = post.lengthscales, post.signal_var
    k12 = s2 * math.exp(-0.5 * np.sum(((x[0] - x[1]) / ell) ** 2))
    a, d = s2 + GP_JITTER, s2 + GP_JITTER
    det = a * d - k12 * k12
    inv = np.array([[d, -k12], [-k12, a]]) / det
    y = post.y
    q = np.array([0.4, 0.3])
    kq = s2 * np.exp(-0.5 * np.sum(((x - q) / ell) ** 2, axis=1))
    mu_q, sd_q = post.predict(q)
    assert mu_q[0] == pytest.approx(kq @ inv @ y, abs=1e-9)
    assert sd_q[0] ** 2 == pytest.approx(s2 - kq @ inv @ kq, abs=1e-9)


def test_constant_targets_give_flat_mean():
    post = gp_fit([trial(h, d, 0.5) for h, d in [(1, 4), (8, 8), (16, 12), (3, 11)]], BOUNDS)
    grid = normalize_points(TuneBudget().grid(12), BOUNDS)
    np.testing.assert_allclose(post.predict_theta(grid), 0.5, atol=1e-4)


def test_duplicate_inputs_are_tolerated():
    post = gp_fit([trial(3, 6, 0.1), trial(3, 6, 0.1), trial(9, 9, 0.4)], BOUNDS)
    assert np.isfinite(post.log_ml)


@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_posterior_variance_bounds(seed, n):
    rng = np.random.default_rng(seed)
    pts = {(int(rng.integers(1, 17)), int(rng.integers(4, 13))) for _ in range(n)}
    trials = [trial(h, d, float(rng.uniform(0, 2))) for h, d in pts]
    post = gp_fit(trials, BOUNDS)
    _, sd_train = post.predict(post.x)
    assert np.all(sd_train ** 2 <= 1e-4)
    _, sd = post.predict(rng.uniform(0, 1, (20, 2)))
    assert np.all(sd >= 0)
    np.testing.assert_allclose(post.predict_theta(post.x), [t.theta for t in trials], rtol=1e-4, atol=1e-4)


# -- expected improvement ------------------------------------------------------------

def test_ei_closed_form_values():
    assert ei_from_moments(0.0, 1.0, 0.0) == pytest.approx(0.39894, abs=1e-4)
    assert ei_from_moments(0.0, 0.0, 0.0) == 0.0
    assert ei_from_moments(-1.0, 1e-9, 0.0) == pytest.approx(1.0, abs=1e-6)


@given(st.floats(-5, 5), st.floats(0, 5), st.floats(-5, 5))
def test_ei_nonnegative(mu, sd, best):
    ei = float(ei_from_moments(mu, sd, best))
    assert ei >= 0.0
    if sd <= 1e-12 and mu >= best:
        assert ei == 0.0


def test_ei_on_posterior_is_nonnegative():
    post = gp_fit([trial(2, 5, 0.2), trial(12, 10, 0.9), trial(7, 7, 0.4)], BOUNDS)
    ei = expected_improvement(post, normalize_points(TuneBudget().grid(12), BOUNDS), float(post.y.min()))
    assert np.all(ei >= 0)


# -- search loops ---------------------------------------------------------------------

def test_initial_design_is_distinct_and_deterministic():
    a = initial_design(TuneBudget(), 12, seed=3)
    b = initial_design(TuneBudget(), 12, seed=3)
    np.testing.assert_array_equal(a, b)
    assert len({tuple(p) for p in a}) == 5
    assert np.all((a[:, 0] >= 1) & (a[:, 0] <= 16) & (a[:, 1] >= 4) & (a[:, 1] <= 12))


def test_degenerate_budget_is_initial_design_only(rng):
    w = rng.standard_normal((12, 4))
    x = correlated_rows(0)
    best, trials = tune_layer(LayerOracle.matmul("l", w), x, TuneBudget(n_init=5, n_total=5), seed=2)
    assert len(trials) == 5
    assert best.theta == min(t.theta for t in trials)


def test_duplicated_batch_finds_zero_in_initial_design(rng):
    x = np.tile(rng.standard_normal(12), (16, 1))
    best, trials = tune_layer(LayerOracle.matmul("l", rng.standard_normal((12, 3))), x, TuneBudget(), 0)
    assert best.theta <= 1e-24
    assert min(t.theta for t in trials[:5]) <= 1e-24


def test_best_never_worse_than_initial_design(rng):
    w = rng.standard_normal((12, 4))
    best, trials = tune_layer(LayerOracle.matmul("l", w), correlated_rows(1), TuneBudget(n_total=15), 4)
    assert best.theta <= min(t.theta for t in trials[:5])
    assert len({(t.hash_size, t.input_dim) for t in trials}) == 15


def test_best_is_monotone_in_budget(rng):
    w = rng.standard_normal((12, 4))
    x = correlated_rows(2)
    oracle = LayerOracle.matmul("l", w)
    prev, prefix = None, None
    for n in (6, 10, 14, 18):
        best, trials = tune_layer(oracle, x, TuneBudget(n_total=n), seed=7)
        if prefix is not None:
            assert trials[:len(prefix)] == prefix
            assert best.theta <= prev
        prev, prefix = best.theta, trials


def test_random_search_baseline_is_seeded(rng):
    w = rng.standard_normal((12, 4))
    oracle = LayerOracle.matmul("l", w)
    a = random_search(oracle, correlated_rows(3), TuneBudget(n_total=8), seed=1)
    b = random_search(oracle, correlated_rows(3), TuneBudget(n_total=8), seed=1)
    assert a == b and len(a[1]) == 8


def test_tuner_matches_or_beats_random_median_on_conv2():
    s = gen_stream(64, (16, 16, 1), 0.95, 2, seed=0)
    m = init_model("tiny_conv", (16, 16, 1), 2, seed=0)
    oracle, x = model_oracles(m, s.frames[:8])["conv2"]
    tuned = [tune_layer(oracle, x, TuneBudget(), sd, hasher_seed=1001)[0].theta for sd in range(3)]
    rnd = [random_search(oracle, x, TuneBudget(), sd + 100, hasher_seed=1001)[0].theta for sd in range(5)]
    assert max(tuned) <= np.median(rnd)


# -- whole models ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def conv_setup():
    model = init_model("tiny_conv", (8, 8, 1), 2, seed=0)
    frames = gen_stream(8, (8, 8, 1), 0.95, 2, seed=0).frames
    return model, frames


def test_serial_and_concurrent_agree(conv_setup):
    model, frames = conv_setup
    budget = TuneBudget(n_total=10)
    serial = tune_model(model, frames, budget, seed=5, workers=1)
    threaded = tune_model(model, frames, budget, seed=5, workers=3)
    assert {k: v.to_dict() for k, v in serial.items()} == {k: v.to_dict() for k, v in threaded.items()}


def test_layers_are_reproducible_in_isolation(conv_setup):
    model, frames = conv_setup
    budget = TuneBudget(n_total=8)
    res = tune_model(model, frames, budget, seed=5, workers=1)
    oracles = model_oracles(model, frames)
    for idx, layer in enumerate(model.reuse_layers):
        oracle, x = oracles[layer]
        best, trials = tune_layer(oracle, x, budget, 5 ^ idx, hasher_seed=1000 + idx)
        assert res[layer].best == best and res[layer].trials == trials


def test_vit_layers_tune(conv_setup):
    model = init_model("tiny_vit", (8, 8, 1), 2, seed=1)
    frames = gen_stream(8, (8, 8, 1), 0.95, 2, seed=1).frames
    res = tune_model(model, frames, TuneBudget(n_total=6), seed=0, workers=1)
    assert set(res) == {"embed", "attn", "mlp", "fc"}
    assert all(r.error is None and r.best is not None for r in res.values())


def test_failing_layer_does_not_abort_others(conv_setup, monkeypatch):
    import simreuse.tuner as tuner

    model, frames = conv_setup
    real = tuner.tune_layer

    def flaky(oracle, *a, **k):
        if oracle.name == "conv2":
            raise RuntimeError("boom")
        return real(oracle, *a, **k)

    monkeypatch.setattr(tuner, "tune_layer", flaky)
    res = tune_model(model, frames, TuneBudget(n_total=6), seed=0, workers=1)
    assert res["conv2"].error == "boom" and res["conv2"].best is None
    assert res["conv1"].best is not None and res["fc"].best is not None


def test_apply_save_load(tmp_path, conv_setup):
    model, frames = conv_setup
    res = tune_model(model, frames, TuneBudget(n_total=6), seed=1, workers=1)
    res["bad"] = LayerResult("bad", None, [], 0, error="nope")
    save_tuning(tmp_path / "t.json", res, {"config_hash": "x"})
    loaded = load_tuning(tmp_path / "t.json")
    assert "bad" not in loaded
    del res["bad"]
    a = apply_tuning(model, res)
    b = apply_tuning(model, loaded)
    assert a.hasher_config() == b.hasher_config()
    for layer, r in res.items():
        assert a.hashers[layer].hash_size == r.best.hash_size
        assert a.hashers[layer].input_dim == r.best.input_dim
    assert model.hasher_config() != a.hasher_config() or all(
        model.hashers[k].hash_size == r.best.hash_size for k, r in res.items())
