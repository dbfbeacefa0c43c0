import numpy as np
import pytest

import kalbucy.parameter_estimation as pe
from kalbucy import (
    LevelPlan,
    SpsaState,
    StepSchedules,
    build_linear_model,
    build_lorenz96_model,
    rml_run,
    simulate_truth,
    spsa_perturbation,
    spsa_step,
    theta_update,
)


def linear_theta_family(theta):
    """Scalar model whose drift scales with the parameter."""

    def drift(x, th):
        return th * x

    base = build_linear_model(1, drift_scale=-0.5)
    from dataclasses import replace

    return replace(base, drift=drift, theta=theta)


def test_schedule_validation():
    StepSchedules()  # defaults are admissible
    with pytest.raises(ValueError):
        StepSchedules(alpha=0.4)
    with pytest.raises(ValueError):
        StepSchedules(alpha=1.2)
    with pytest.raises(ValueError):
        StepSchedules(gamma=0.0)
    with pytest.raises(ValueError):
        StepSchedules(alpha=0.7, gamma=0.3)  # 2(alpha - gamma) = 0.8 <= 1
    with pytest.raises(ValueError):
        StepSchedules(a0=0.0)


def test_schedule_summability_invariants():
    sch = StepSchedules()
    t = np.arange(0, 400_000)
    gains = np.array([sch.gain(k) for k in t[:100]] )
    assert np.all(np.diff(gains) < 0)
    # sum a_t diverges: doubling the horizon keeps adding non-trivial mass
    a = sch.a0 * (t + 1.0) ** (-sch.alpha)
    assert a[200_000:].sum() > 0.25 * a[:200_000].sum()
    # sum (a_t / b_t)^2 converges (slowly): the tail is a small fraction
    sq = (a / (sch.b0 * (t + 1.0) ** (-sch.gamma))) ** 2
    assert sq[200_000:].sum() < 0.1 * sq[:200_000].sum()


def test_perturbation_support_and_moments():
    rng = np.random.default_rng(0)
    one = spsa_perturbation(1, rng)
    assert one[0] in (-1.0, 1.0)
    draws = np.array([spsa_perturbation(3, rng) for _ in range(10_000)])
    assert np.all(np.isin(draws, (-1.0, 1.0)))
    assert np.all(np.abs(draws.mean(axis=0)) < 0.05)


def test_perturbation_deterministic_replay():
    a = spsa_perturbation(5, np.random.default_rng(42))
    b = spsa_perturbation(5, np.random.default_rng(42))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        spsa_perturbation(0, np.random.default_rng(0))


def test_theta_update_arithmetic():
    theta = np.array([0.0])
    out = theta_update(theta, np.array([1.0]), u_plus=0.02, u_minus=0.0,
                       gain=0.1, perturb_size=0.01)
    assert out[0] == pytest.approx(0.1, abs=1e-15)


def test_theta_update_sign_flip_invariance():
    # flipping the probe sign swaps the two evaluations; the update is
    # unchanged because the display is odd in both simultaneously
    theta = np.array([1.0, -2.0])
    signs = np.array([1.0, -1.0])
    up, um = 0.7, 0.3
    a = theta_update(theta, signs, up, um, 0.2, 0.05)
    b = theta_update(theta, -signs, um, up, 0.2, 0.05)
    assert np.allclose(a, b, atol=1e-15)


def test_theta_update_replay_audit():
    # the recorded diagnostics reproduce the trajectory exactly
    model = build_lorenz96_model(8, theta=8.0)
    plan = LevelPlan(7, 8, (8, 4))
    sch = StepSchedules()
    _, obs = simulate_truth(model, 8.0, 8, 3, np.random.default_rng(0))
    windows = [obs.window(t, t + 1) for t in range(3)]
    res = rml_run(model.with_theta, windows, 4.0, sch, plan, 3, "deterministic",
                  None, np.random.default_rng(1))
    # Psi is recoverable from the realized step: theta' - theta = g(u+ - u-) / (2 b psi)
    for k, info in enumerate(res.infos):
        step = res.thetas[k + 1, 0] - res.thetas[k, 0]
        if not info.accepted:
            assert step == 0.0
            continue
        psi = info.gain * (info.u_plus - info.u_minus) / (2 * info.perturb_size * step)
        assert psi == pytest.approx(1.0, abs=1e-9) or psi == pytest.approx(-1.0, abs=1e-9)


def test_spsa_step_zero_gradient_keeps_theta():
    # unobserved model: both likelihood evaluations are exactly zero
    model = build_linear_model(1, drift_scale=-0.5, obs_scale=0.0)
    plan = LevelPlan(3, 4, (6, 4))
    _, obs = simulate_truth(model, None, 4, 1, np.random.default_rng(2))
    state = SpsaState(np.array([1.0]), 0,
                      model.sample_initial(10, np.random.default_rng(3)))
    new, info = spsa_step(state, obs, model.with_theta, StepSchedules(), plan,
                          "vanilla", None, np.random.default_rng(4))
    assert info.u_plus == 0.0 and info.u_minus == 0.0
    assert np.array_equal(new.theta, state.theta)
    assert new.iteration == 1
    assert new.ensembles.shape == state.ensembles.shape


def test_spsa_step_rejects_non_finite(monkeypatch, caplog):
    import logging

    model = build_lorenz96_model(8, theta=8.0)
    plan = LevelPlan(7, 8, (6, 4))
    _, obs = simulate_truth(model, 8.0, 8, 1, np.random.default_rng(5))
    state = SpsaState(np.array([4.0]), 3,
                      model.sample_initial(10, np.random.default_rng(6)))

    def broken(*args, **kwargs):
        from kalbucy.normalizing_constant import LogNcEstimate

        return LogNcEstimate(log_value=float("nan"), level=8, particles=10)

    monkeypatch.setattr(pe, "ml_log_nc", broken)
    with caplog.at_level(logging.WARNING, logger="kalbucy.parameter_estimation"):
        new, info = spsa_step(state, obs, model.with_theta, StepSchedules(), plan,
                              "vanilla", None, np.random.default_rng(7))
    assert not info.accepted
    assert np.array_equal(new.theta, state.theta)
    assert new.iteration == 4
    assert any("rejected" in rec.message for rec in caplog.records)


def test_common_random_numbers_shrink_probe_gap():
    # with common random numbers, |U+ - U-| contracts as the probe size
    # shrinks (continuity of the likelihood in theta)
    plan = LevelPlan(3, 4, (12, 6))
    sch_wide = StepSchedules(b0=0.2)
    sch_narrow = StepSchedules(b0=0.1)
    gaps = {0.2: 0.0, 0.1: 0.0}
    for r in range(20):
        model = linear_theta_family(-0.5)
        _, obs = simulate_truth(model, None, 4, 1, np.random.default_rng(100 + r))
        for sch in (sch_wide, sch_narrow):
            state = SpsaState(np.array([-0.5]), 0,
                              model.sample_initial(18, np.random.default_rng(200 + r)))
            _, info = spsa_step(state, obs, linear_theta_family, sch, plan,
                                "vanilla", None, np.random.default_rng(300 + r))
            gaps[sch.b0] += abs(info.u_plus - info.u_minus)
    assert gaps[0.1] < gaps[0.2]


def test_rml_single_iteration_equals_one_step():
    model = build_lorenz96_model(8, theta=8.0)
    plan = LevelPlan(7, 8, (8, 4))
    sch = StepSchedules()
    _, obs = simulate_truth(model, 8.0, 8, 1, np.random.default_rng(8))
    windows = [obs.window(0, 1)]
    res = rml_run(model.with_theta, windows, 4.0, sch, plan, 1, "deterministic",
                  None, np.random.default_rng(9))
    assert res.thetas.shape == (2, 1)
    assert len(res.infos) == 1

    state = SpsaState(np.array([4.0]), 0,
                      model.sample_initial(12, np.random.default_rng(9)))
    # same master stream: the library draws initial ensembles first
    rng = np.random.default_rng(9)
    init = model.with_theta(4.0).sample_initial(12, rng)
    state = SpsaState(np.array([4.0]), 0, init)
    new, info = spsa_step(state, windows[0], model.with_theta, sch, plan,
                          "deterministic", None, rng)
    assert new.theta[0] == res.thetas[1, 0]
    assert info.u_plus == res.infos[0].u_plus


def test_rml_requires_enough_windows():
    model = build_lorenz96_model(8, theta=8.0)
    plan = LevelPlan(7, 8, (6, 4))
    _, obs = simulate_truth(model, 8.0, 8, 2, np.random.default_rng(10))
    windows = [obs.window(0, 1)]
    with pytest.raises(ValueError):
        rml_run(model.with_theta, windows, 4.0, StepSchedules(), plan, 2,
                "deterministic", None, np.random.default_rng(11))
