import math

import numpy as np
import pytest

from kalbucy import (
    FilterModel,
    build_grid_model,
    build_linear_model,
    build_lorenz96_model,
    grid_coords,
    grid_index,
    lorenz96_drift,
    simulate_truth,
)


def test_grid_index_map_round_trip():
    assert grid_index(2, 3, 10) == 23
    assert grid_coords(23, 10) == (2, 3)
    for d in range(100):
        i, j = grid_coords(d, 10)
        assert grid_index(i, j, 10) == d


def test_grid_model_dimensions_and_interior_degree():
    model = build_grid_model(10, interaction_radius=1.5)
    assert model.dim_x == 100
    a = model.drift
    # interior node (5, 5) couples to its 8 neighbours plus itself
    p = grid_index(5, 5, 10)
    assert np.count_nonzero(a[p]) == 9
    # corner node has 3 neighbours
    assert np.count_nonzero(a[grid_index(0, 0, 10)]) == 4


def test_grid_model_sparsity_bound():
    model = build_grid_model(10, interaction_radius=1.5)
    assert max(np.count_nonzero(row) for row in model.drift) <= 9


def test_grid_model_stability():
    model = build_grid_model(6)
    eigs = np.linalg.eigvals(model.drift)
    assert eigs.real.max() < 0.0


def test_grid_degenerate_k1():
    model = build_grid_model(1)
    assert model.drift.shape == (1, 1)


def test_grid_model_rejects_bad_args():
    with pytest.raises(ValueError):
        build_grid_model(0)
    with pytest.raises(ValueError):
        build_grid_model(3, interaction_radius=0.0)


def test_lorenz96_constant_state():
    x = np.full(8, 8.0)
    assert np.allclose(lorenz96_drift(x, 8.0), 0.0)
    c, theta = 2.5, -1.0
    assert np.allclose(lorenz96_drift(np.full(12, c), theta), -c + theta)


def test_lorenz96_wraparound_stencil():
    # first component depends on x[1], x[dim-2], x[dim-1] only
    rng = np.random.default_rng(0)
    dim = 40
    x = rng.standard_normal(dim)
    base = lorenz96_drift(x, 0.0)[0]
    assert base == pytest.approx((x[1] - x[38]) * x[39] - x[0])
    for idx in range(dim):
        bumped = x.copy()
        bumped[idx] += 1.0
        changed = lorenz96_drift(bumped, 0.0)[0] != base
        assert changed == (idx in (0, 1, 38, 39))


def test_lorenz96_rejects_small_dim():
    with pytest.raises(ValueError):
        lorenz96_drift(np.zeros(3), 8.0)
    with pytest.raises(ValueError):
        build_lorenz96_model(3)


def test_lorenz96_vectorized_over_particles():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((8, 5))
    block = lorenz96_drift(x, 8.0)
    for j in range(5):
        assert np.allclose(block[:, j], lorenz96_drift(x[:, j], 8.0))


def test_simulate_truth_noiseless_fixed_point():
    # A = 0, R1 = 0, deterministic start: the signal freezes at its initial
    # value.  The observation noise sqrt must stay invertible, so the
    # noise-free increment identity is checked in the R2 -> 0 limit.
    dim = 3
    model = FilterModel(
        dim_x=dim,
        dim_y=dim,
        drift=np.zeros((dim, dim)),
        obs_matrix=2.0 * np.eye(dim),
        sig_noise_sqrt=np.zeros((dim, dim)),
        obs_noise_sqrt=1e-12 * np.eye(dim),
        init_mean=np.array([1.0, -2.0, 0.5]),
        init_cov=np.zeros((dim, dim)),
    )
    sig, obs = simulate_truth(model, None, 3, 2, np.random.default_rng(0))
    assert np.array_equal(sig.values, np.tile(model.init_mean, (17, 1)))
    delta = 2.0 ** -3
    expected = model.obs_matrix @ model.init_mean * delta
    assert np.allclose(obs.increments, expected, atol=1e-10)


def test_simulate_truth_determinism():
    model = build_linear_model(1)
    a = simulate_truth(model, None, 4, 3, np.random.default_rng(7))
    b = simulate_truth(model, None, 4, 3, np.random.default_rng(7))
    c = simulate_truth(model, None, 4, 3, np.random.default_rng(8))
    assert np.array_equal(a[0].values, b[0].values)
    assert np.array_equal(a[1].increments, b[1].increments)
    assert not np.array_equal(a[0].values, c[0].values)


def test_simulate_truth_ou_variance():
    # unobserved scalar OU: sample variance of X_T matches the closed form
    a, sigma1, horizon, level, n = -0.7, 0.8, 2, 8, 10_000
    model = build_linear_model(1, drift_scale=a, obs_scale=0.0, sigma1=sigma1,
                               init_mean=0.0, init_cov=0.0)
    rng = np.random.default_rng(123)
    finals = np.array([
        simulate_truth(model, None, level, horizon, rng)[0].values[-1, 0]
        for _ in range(n)
    ])
    r1 = sigma1 ** 2
    exact = r1 * (math.exp(2 * a * horizon) - 1.0) / (2 * a)
    sample = finals.var(ddof=1)
    mc_se = exact * math.sqrt(2.0 / (n - 1))
    assert abs(sample - exact) < 3 * mc_se


def test_observation_coarsening_exact():
    model = build_linear_model(2, drift_scale=-0.3)
    _, obs = simulate_truth(model, None, 6, 2, np.random.default_rng(5))
    once = obs.coarsen()
    assert once.level == 5
    assert np.array_equal(
        once.increments, obs.increments.reshape(-1, 2, 2).sum(axis=1)
    )
    # coarsening twice equals coarsening straight to level 4
    assert np.array_equal(once.coarsen().increments, obs.coarsen_to(4).increments)


def test_observation_window_and_duration():
    model = build_linear_model(1)
    _, obs = simulate_truth(model, None, 3, 4, np.random.default_rng(2))
    assert obs.duration == 4.0
    w = obs.window(1, 3)
    assert w.n_increments == 2 * 2 ** 3
    assert np.array_equal(w.increments, obs.increments[8:24])
    with pytest.raises(ValueError):
        obs.window(3, 5)


def test_path_lengths():
    model = build_linear_model(1)
    sig, obs = simulate_truth(model, None, 5, 3, np.random.default_rng(0))
    assert sig.values.shape[0] == 3 * 2 ** 5 + 1
    assert obs.n_increments == 3 * 2 ** 5


def test_model_validation():
    eye = np.eye(2)
    with pytest.raises(ValueError):
        FilterModel(2, 2, np.eye(2), eye, eye, np.zeros((2, 2)),
                    np.zeros(2), eye)  # singular obs noise sqrt
    with pytest.raises(ValueError):
        FilterModel(2, 2, np.eye(3), eye, eye, eye, np.zeros(2), eye)
    with pytest.raises(ValueError):
        build_grid_model(2).with_theta(0.0).__class__(
            2, 2, np.eye(2), eye, eye, eye, np.zeros(2), -eye)  # negative init cov


def test_with_theta_round_trip():
    model = build_lorenz96_model(8, theta=8.0)
    bumped = model.with_theta(9.5)
    assert bumped.theta == 9.5
    assert model.theta == 8.0
    x = np.full(8, 1.0)
    assert np.allclose(bumped.drift_apply(x) - model.drift_apply(x), 1.5)


def test_simulate_truth_rejects_bad_args():
    model = build_linear_model(1)
    with pytest.raises(ValueError):
        simulate_truth(model, None, -1, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        simulate_truth(model, None, 3, 0, np.random.default_rng(0))
