"""Log normalizing-constant (marginal likelihood) estimation.

The estimator is a Riemann-Ito sum over the filter mean trajectory,

    sum_k [ <C m_k, R2^{-1} dY_k> - (D/2) <m_k, S m_k> ],

evaluated at the left endpoints of the observation grid.  Its multilevel
combination telescopes base-level and coupled fine/coarse evaluations that
share mean trajectories with the state estimator.  Everything stays in log
space; the constant itself is never exponentiated here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .enkbf import _filter_run, check_variant
from .localization import TaperMatrix
from .models import FilterModel, ObservationPath
from .multilevel import LevelPlan, _coupled_run, _split_rng, pair_cost, single_cost


@dataclass(frozen=True)
class LogNcEstimate:
    """Log normalizing constant with its telescoping decomposition."""

    log_value: float
    level: int
    particles: int
    base_value: float = 0.0
    per_level_increments: tuple[float, ...] = ()
    total_cost: float = 0.0


def log_nc_from_means(
    means: np.ndarray,
    obs: ObservationPath,
    model: FilterModel,
    t_start: int = 0,
    t_end: Optional[int] = None,
) -> float:
    """Riemann-Ito log-likelihood sum of a mean trajectory against the data.

    ``means`` must hold the filter means at every grid time of the
    observation path (one more row than there are increments).  The window
    bounds are integer times; the default covers the whole path.
    """
    means = np.asarray(means, dtype=float)
    if means.ndim != 2 or means.shape[1] != model.dim_x:
        raise ValueError("means must be an (n_steps + 1, dim_x) array")
    if means.shape[0] != obs.n_increments + 1:
        raise ValueError(
            f"means length {means.shape[0]} misaligned with "
            f"{obs.n_increments} observation increments"
        )
    per_unit = 2 ** obs.level
    duration = obs.n_increments / per_unit
    if t_end is None:
        if duration != int(duration):
            raise ValueError("partial paths need explicit window bounds")
        t_end = int(duration)
    k0, k1 = t_start * per_unit, t_end * per_unit
    if not (0 <= k0 < k1 <= obs.n_increments):
        raise ValueError(f"window [{t_start}, {t_end}] outside the path")
    delta = 2.0 ** (-obs.level)
    m = means[k0:k1]
    dy = obs.increments[k0:k1]
    data_term = float(np.sum((m @ model.obs_gain_map) * dy))
    quad_term = float(np.einsum("kd,de,ke->", m, model.obs_info, m))
    return data_term - 0.5 * delta * quad_term


def ml_log_nc(
    model: FilterModel,
    obs: ObservationPath,
    plan: LevelPlan,
    variant: str,
    taper: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
    init_particles: Optional[np.ndarray] = None,
) -> LogNcEstimate:
    """Multilevel log normalizing-constant estimate.

    The base level contributes its own Riemann-Ito sum; every coupled pair
    contributes the fine-minus-coarse difference of the sums computed from
    its two mean trajectories.  When ``init_particles`` (a dim_x x N_total
    block) is given, it is split into consecutive per-level blocks instead
    of sampling fresh ensembles; this is the surface the online parameter
    estimator drives.
    """
    check_variant(variant)
    if variant == "transport":
        raise ValueError("the transport variant has no multilevel coupling")
    if rng is None:
        raise ValueError("an rng stream is required")
    if obs.level < plan.target_level:
        raise ValueError(
            f"observations at level {obs.level} cannot serve target level {plan.target_level}"
        )
    if init_particles is not None and init_particles.shape != (
        model.dim_x,
        plan.total_particles,
    ):
        raise ValueError(
            f"init particles must be ({model.dim_x}, {plan.total_particles})"
        )
    streams = _split_rng(rng, plan.n_levels)
    offsets = np.cumsum([0] + list(plan.particles))

    def _initial(idx: int, n: int, stream: np.random.Generator) -> np.ndarray:
        if init_particles is None:
            return model.sample_initial(n, stream)
        return init_particles[:, offsets[idx] : offsets[idx + 1]].copy()

    base_obs = obs.coarsen_to(plan.start_level)
    horizon = base_obs.duration
    n0 = plan.particles_at(plan.start_level)
    init = _initial(0, n0, streams[0])
    means, _, _ = _filter_run(model, base_obs, variant, taper, streams[0], init)
    base = log_nc_from_means(means, base_obs, model)
    total_cost = single_cost(n0, horizon, plan.start_level)
    increments: list[float] = []
    for idx, level in enumerate(range(plan.start_level + 1, plan.target_level + 1)):
        n_l = plan.particles_at(level)
        stream = streams[idx + 1]
        init = _initial(idx + 1, n_l, stream)
        means_f, means_c = _coupled_run(model, obs, level, variant, taper, stream, init)
        obs_f = obs.coarsen_to(level)
        obs_c = obs_f.coarsen()
        u_fine = log_nc_from_means(means_f, obs_f, model)
        u_coarse = log_nc_from_means(means_c, obs_c, model)
        increments.append(u_fine - u_coarse)
        total_cost += pair_cost(n_l, horizon, level)
    value = base
    for inc in increments:
        value = value + inc
    return LogNcEstimate(
        log_value=value,
        level=plan.target_level,
        particles=plan.total_particles,
        base_value=base,
        per_level_increments=tuple(increments),
        total_cost=total_cost,
    )


def log_nc_ratio(
    model: FilterModel,
    obs_window: ObservationPath,
    theta,
    plan: LevelPlan,
    variant: str,
    taper: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
    init_particles: Optional[np.ndarray] = None,
) -> float:
    """Log normalizing-constant increment of one unit window at parameter theta."""
    est = ml_log_nc(
        model.with_theta(theta), obs_window, plan, variant, taper, rng, init_particles
    )
    return est.log_value


def innovations_log_nc(model: FilterModel, obs: ObservationPath) -> float:
    """Exact log normalizing constant of the Euler-discretized linear model.

    Runs the discrete-time Kalman recursion of the time-stepped system
    (F = I + A D, Q = R1 D, H = C D, V = R2 D) and accumulates the
    Gaussian innovation log-likelihood relative to the pure-noise reference
    measure.  This is the dual route against which the Riemann-Ito
    estimator is checked.
    """
    if not model.is_linear:
        raise ValueError("the innovations likelihood needs a linear model")
    delta = 2.0 ** (-obs.level)
    f = np.eye(model.dim_x) + model.drift * delta
    q = model.sig_noise_cov * delta
    h = model.obs_matrix * delta
    v = model.obs_noise_cov * delta
    v_inv = np.linalg.inv(v)
    _, logdet_v = np.linalg.slogdet(v)
    mean = model.init_mean.copy()
    cov = model.init_cov.copy()
    total = 0.0
    for k in range(obs.n_increments):
        dy = obs.increments[k]
        innov_cov = h @ cov @ h.T + v
        innov = dy - h @ mean
        sol = np.linalg.solve(innov_cov, innov)
        _, logdet_s = np.linalg.slogdet(innov_cov)
        total += -0.5 * (innov @ sol + logdet_s) + 0.5 * (dy @ v_inv @ dy + logdet_v)
        gain = cov @ h.T @ np.linalg.inv(innov_cov)
        mean = mean + gain @ innov
        cov = (np.eye(model.dim_x) - gain @ h) @ cov
        mean = f @ mean
        cov = f @ cov @ f.T + q
        cov = (cov + cov.T) / 2.0
    return total
