import numpy as np
import pytest

from kalbucy import (
    LevelPlan,
    build_linear_model,
    build_lorenz96_model,
    innovations_log_nc,
    kbf_means,
    log_nc_from_means,
    log_nc_ratio,
    ml_log_nc,
    simulate_truth,
)
from kalbucy.models import ObservationPath


def scalar_model(**kw):
    kw.setdefault("drift_scale", -0.5)
    return build_linear_model(1, **kw)


def test_unobserved_model_gives_zero():
    model = scalar_model(obs_scale=0.0)
    _, obs = simulate_truth(model, None, 4, 2, np.random.default_rng(0))
    means = np.ones((obs.n_increments + 1, 1))
    assert log_nc_from_means(means, obs, model) == 0.0
    plan = LevelPlan(3, 4, (8, 4))
    est = ml_log_nc(model, obs, plan, "vanilla", None, np.random.default_rng(1))
    assert est.log_value == 0.0
    assert est.base_value == 0.0
    assert all(inc == 0.0 for inc in est.per_level_increments)
    assert innovations_log_nc(model, obs) == pytest.approx(0.0, abs=1e-12)


def test_constant_mean_closed_form():
    # m == 1, C = R2 = 1, constant increments delta_y: K dy - K D / 2
    model = scalar_model(drift_scale=-0.5, obs_scale=1.0, sigma2=1.0)
    level, steps, dy = 3, 16, 0.21
    obs = ObservationPath(level, np.full((steps, 1), dy))
    means = np.ones((steps + 1, 1))
    delta = 2.0 ** -level
    expected = steps * dy - steps * delta / 2.0
    assert log_nc_from_means(means, obs, model) == pytest.approx(expected, abs=1e-12)


def test_misaligned_means_rejected():
    model = scalar_model()
    _, obs = simulate_truth(model, None, 3, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        log_nc_from_means(np.ones((obs.n_increments, 1)), obs, model)


def test_window_additivity_exact():
    model = scalar_model()
    _, obs = simulate_truth(model, None, 4, 2, np.random.default_rng(5))
    means = kbf_means(model, obs, 4)
    full = log_nc_from_means(means, obs, model, 0, 2)
    first = log_nc_from_means(means, obs, model, 0, 1)
    second = log_nc_from_means(means, obs, model, 1, 2)
    assert full == pytest.approx(first + second, abs=1e-12)


def test_exact_filter_sum_tracks_innovations_oracle():
    # The Riemann-Ito sum with exact-filter means and the discrete
    # innovations likelihood agree in the refinement limit: their
    # mean-square difference halves per level.
    model = scalar_model()
    levels = (4, 5, 6)
    n = 200
    sq = dict.fromkeys(levels, 0.0)
    for r in range(n):
        _, obs = simulate_truth(model, None, 6, 5, np.random.default_rng(3000 + r))
        for level in levels:
            path = obs.coarsen_to(level)
            d = log_nc_from_means(kbf_means(model, path, level), path, model) \
                - innovations_log_nc(model, path)
            sq[level] += d * d
    ratios = [sq[levels[i]] / sq[levels[i + 1]] for i in range(len(levels) - 1)]
    for ratio in ratios:
        assert 1.5 < ratio < 2.5


def test_innovations_oracle_matches_scalar_reimplementation():
    model = scalar_model(drift_scale=-0.7, obs_scale=1.2, sigma1=0.8, sigma2=0.9,
                         init_mean=0.4, init_cov=0.6)
    level = 4
    _, obs = simulate_truth(model, None, level, 2, np.random.default_rng(8))

    # independent scalar transcription of the discrete filter likelihood
    delta = 2.0 ** -level
    a, c, r1, r2 = -0.7, 1.2, 0.64, 0.81
    f, q, h, v = 1 + a * delta, r1 * delta, c * delta, r2 * delta
    m, p = 0.4, 0.6
    total = 0.0
    for k in range(obs.n_increments):
        dy = obs.increments[k, 0]
        s = h * p * h + v
        e = dy - h * m
        total += -0.5 * (e * e / s + np.log(s)) + 0.5 * (dy * dy / v + np.log(v))
        gain = p * h / s
        m, p = m + gain * e, (1 - gain * h) * p
        m, p = f * m, f * p * f + q
    assert innovations_log_nc(model, obs) == pytest.approx(total, abs=1e-10)


def test_innovations_oracle_rejects_nonlinear():
    model = build_lorenz96_model(8, theta=8.0)
    _, obs = simulate_truth(model, 8.0, 4, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        innovations_log_nc(model, obs)


def test_ml_log_nc_telescoping_identity_exact():
    model = scalar_model()
    _, obs = simulate_truth(model, None, 5, 2, np.random.default_rng(9))
    plan = LevelPlan(3, 5, (16, 8, 4))
    est = ml_log_nc(model, obs, plan, "vanilla", None, np.random.default_rng(10))
    value = est.base_value
    for inc in est.per_level_increments:
        value = value + inc
    assert est.log_value == value
    assert est.level == 5
    assert est.particles == 28
    assert est.total_cost == 16 * 2 * 8 + 8 * 2 * (16 + 8) + 4 * 2 * (32 + 16)


def test_ml_log_nc_estimates_the_likelihood():
    # sanity on accuracy: the multilevel estimate lands near the oracle
    model = scalar_model()
    errs = []
    for r in range(30):
        _, obs = simulate_truth(model, None, 6, 2, np.random.default_rng(600 + r))
        ref = innovations_log_nc(model, obs)
        plan = LevelPlan(4, 6, (64, 32, 16))
        est = ml_log_nc(model, obs, plan, "vanilla", None, np.random.default_rng(700 + r))
        errs.append(est.log_value - ref)
    rmse = float(np.sqrt(np.mean(np.square(errs))))
    assert rmse < 0.5


def test_ml_log_nc_accepts_carried_ensembles():
    model = scalar_model()
    _, obs = simulate_truth(model, None, 4, 1, np.random.default_rng(11))
    plan = LevelPlan(3, 4, (6, 4))
    init = model.sample_initial(10, np.random.default_rng(12))
    a = ml_log_nc(model, obs, plan, "vanilla", None, np.random.default_rng(13), init)
    b = ml_log_nc(model, obs, plan, "vanilla", None, np.random.default_rng(13), init)
    assert a.log_value == b.log_value
    with pytest.raises(ValueError):
        ml_log_nc(model, obs, plan, "vanilla", None, np.random.default_rng(13),
                  model.sample_initial(9, np.random.default_rng(12)))


def test_log_nc_ratio_window_sum():
    # over one continuous mean trajectory, the full-window sum splits
    # exactly into unit-window ratios
    model = scalar_model()
    _, obs = simulate_truth(model, None, 4, 2, np.random.default_rng(14))
    means = kbf_means(model, obs, 4)
    full = log_nc_from_means(means, obs, model)
    parts = [log_nc_from_means(means, obs, model, t, t + 1) for t in (0, 1)]
    assert full == pytest.approx(sum(parts), abs=1e-12)


def test_log_nc_ratio_peaks_near_true_forcing():
    # Lorenz 96 desk model: the average unit-window ratio is finite and
    # rises toward the data-generating forcing from both sides
    model = build_lorenz96_model(8, theta=8.0)
    plan = LevelPlan(7, 8, (16, 8))
    thetas = (6.0, 7.0, 8.0, 9.0, 10.0)
    sums = dict.fromkeys(thetas, 0.0)
    repeats = 20
    for r in range(repeats):
        _, obs = simulate_truth(model, 8.0, 8, 1, np.random.default_rng(800 + r))
        init = model.sample_initial(plan.total_particles, np.random.default_rng(900 + r))
        for theta in thetas:
            u = log_nc_ratio(model, obs, theta, plan, "vanilla", None,
                             np.random.default_rng(1000 + r), init)
            assert np.isfinite(u)
            sums[theta] += u
    avg = {t: sums[t] / repeats for t in thetas}
    assert avg[7.0] < avg[8.0] > avg[9.0]
    assert avg[6.0] < avg[7.0]
    assert avg[10.0] < avg[9.0]


def test_ml_log_nc_rejects_transport():
    model = scalar_model()
    _, obs = simulate_truth(model, None, 4, 1, np.random.default_rng(0))
    plan = LevelPlan(3, 4, (4, 4))
    with pytest.raises(ValueError):
        ml_log_nc(model, obs, plan, "transport", None, np.random.default_rng(1))
