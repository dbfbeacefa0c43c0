"""Single-level discretized ensemble Kalman-Bucy filter steppers.

Three update rules are provided, switched by a variant tag:

  "vanilla"        perturbed observations: per-particle signal and
                   observation noise increments enter the innovation;
  "deterministic"  signal noise only, the innovation is centred at the
                   mid-point C (xi + m) / 2;
  "transport"      no randomness at all, the signal noise is replaced by
                   the transport term (1/2) R1 P^{-1} (xi - m).

All steppers apply the gain with the sample covariance taken at the start
of the step (explicit scheme).  When localization is active the gain uses
the tapered covariance while recorded moments stay untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .localization import TaperMatrix, localize
from .models import FilterModel, ObservationPath, lorenz96_drift

VARIANTS = ("vanilla", "deterministic", "transport")


class SingularCovarianceError(RuntimeError):
    """Transport update failed: covariance singular even after jitter."""


class _StepCounter:
    """Counts particle-step updates for cost audits."""

    __slots__ = ("value",)

    def __init__(self) -> None:
        self.value = 0

    def reset(self) -> None:
        self.value = 0

    def add(self, n: int) -> None:
        self.value += n


step_counter = _StepCounter()


@dataclass(frozen=True)
class Ensemble:
    """N particles at one grid time; column i is particle xi^i."""

    particles: np.ndarray  # (dim_x, N)
    level: int
    time_index: int = 0

    def __post_init__(self) -> None:
        if self.particles.ndim != 2:
            raise ValueError("particles must be a (dim_x, N) matrix")
        if self.particles.shape[1] < 2:
            raise ValueError("need N >= 2 particles for sample covariances")

    @property
    def size(self) -> int:
        return self.particles.shape[1]


@dataclass(frozen=True)
class Moments:
    mean: np.ndarray
    cov: np.ndarray


def _moments(particles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = particles.shape[1]
    mean = particles.sum(axis=1) * (1.0 / n)
    centered = particles - mean[:, None]
    cov = centered @ centered.T / (n - 1)
    return mean, cov


def sample_moments(ens: Ensemble) -> Moments:
    """Sample mean (1/N) and covariance (1/(N-1)) of the ensemble."""
    mean, cov = _moments(ens.particles)
    return Moments(mean=mean, cov=cov)


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    return variant


def _advance(
    variant: str,
    model: FilterModel,
    particles: np.ndarray,
    mean: np.ndarray,
    gain_cov: np.ndarray,
    obs_increment: np.ndarray,
    delta: float,
    dw: Optional[np.ndarray],
    dv: Optional[np.ndarray],
    jitter: Optional[float] = None,
) -> np.ndarray:
    """One explicit Euler step of the chosen update rule.

    dw / dv are the particle-wise Brownian increments (variance delta per
    unit noise); callers that couple discretization levels pass sums of
    finer increments here.
    """
    n = particles.shape[1]
    if obs_increment.shape != (model.dim_y,):
        raise ValueError(f"observation increment shape {obs_increment.shape} != ({model.dim_y},)")
    if gain_cov.shape != (model.dim_x, model.dim_x):
        raise ValueError("gain covariance dimension mismatch")
    step_counter.add(n)
    out = particles + model.drift_apply(particles) * delta
    if variant == "transport":
        if jitter is None:
            jitter = 1e-8 * np.trace(gain_cov) / model.dim_x
        regularized = gain_cov + jitter * np.eye(model.dim_x)
        try:
            spread = np.linalg.solve(regularized, particles - mean[:, None])
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError(
                f"ensemble covariance singular even with jitter {jitter:.3e}"
            ) from exc
        # The half factor makes the ensemble variance follow the Riccati flow
        # (2AP + R1 - PSP); without it the stationary spread is inflated and
        # the ensemble mean no longer converges to the exact filter.
        out = out + 0.5 * model.sig_noise_cov @ spread * delta
    elif model.sig_sqrt_scalar is not None:
        out = out + model.sig_sqrt_scalar * dw
    else:
        out = out + model.sig_noise_sqrt @ dw
    obs_scale = model.obs_scalar
    if variant == "vanilla":
        observed = obs_scale * particles if obs_scale is not None else model.obs_matrix @ particles
        innov = obs_increment[:, None] - observed * delta
        if model.obs_sqrt_scalar is not None:
            innov -= model.obs_sqrt_scalar * dv
        else:
            innov -= model.obs_noise_sqrt @ dv
    else:
        midpoint = (particles + mean[:, None]) / 2.0
        observed = obs_scale * midpoint if obs_scale is not None else model.obs_matrix @ midpoint
        innov = obs_increment[:, None] - observed * delta
    if model.gain_map_scalar is not None:
        return out + model.gain_map_scalar * (gain_cov @ innov)
    return out + (gain_cov @ model.obs_gain_map) @ innov


def step_vanilla(
    ens: Ensemble,
    obs_increment: np.ndarray,
    model: FilterModel,
    cov_used: Moments,
    rng: np.random.Generator,
) -> Ensemble:
    """Perturbed-observation update; draws dW then dV, each (dim, N)."""
    delta = 2.0 ** (-ens.level)
    root = math.sqrt(delta)
    dw = root * rng.standard_normal((model.dim_x, ens.size))
    dv = root * rng.standard_normal((model.dim_y, ens.size))
    new = _advance("vanilla", model, ens.particles, cov_used.mean, cov_used.cov,
                   obs_increment, delta, dw, dv)
    return Ensemble(new, ens.level, ens.time_index + 1)


def step_deterministic(
    ens: Ensemble,
    obs_increment: np.ndarray,
    model: FilterModel,
    cov_used: Moments,
    rng: np.random.Generator,
) -> Ensemble:
    """Midpoint-innovation update; draws only the signal increment dW."""
    delta = 2.0 ** (-ens.level)
    dw = math.sqrt(delta) * rng.standard_normal((model.dim_x, ens.size))
    new = _advance("deterministic", model, ens.particles, cov_used.mean, cov_used.cov,
                   obs_increment, delta, dw, None)
    return Ensemble(new, ens.level, ens.time_index + 1)


def step_transport(
    ens: Ensemble,
    obs_increment: np.ndarray,
    model: FilterModel,
    cov_used: Moments,
    jitter: Optional[float] = None,
) -> Ensemble:
    """Fully deterministic update with the covariance-inverse transport term."""
    delta = 2.0 ** (-ens.level)
    new = _advance("transport", model, ens.particles, cov_used.mean, cov_used.cov,
                   obs_increment, delta, None, None, jitter=jitter)
    return Ensemble(new, ens.level, ens.time_index + 1)


def _use_kernels(model: FilterModel, variant: str) -> bool:
    """Compiled-kernel eligibility: scalar operators and a known drift form."""
    if not _kernels.HAVE_NUMBA or variant == "transport":
        return False
    if model.dim_x != model.dim_y:
        return False
    if None in (model.obs_scalar, model.sig_sqrt_scalar,
                model.obs_sqrt_scalar, model.gain_map_scalar):
        return False
    if model.is_linear:
        return True
    return model.drift is lorenz96_drift and model.theta is not None \
        and np.ndim(model.theta) == 0


def _step_factory(model: FilterModel, variant: str):
    """Per-run step closure step(p, mean, gain_cov, dy, delta, dw, dv) -> p'."""
    if _use_kernels(model, variant):
        s1 = model.sig_sqrt_scalar
        s2 = model.obs_sqrt_scalar
        c = model.obs_scalar
        g = model.gain_map_scalar
        if model.is_linear:
            a = model.drift
            if variant == "vanilla":
                def step(p, mean, gain_cov, dy, delta, dw, dv):
                    step_counter.add(p.shape[1])
                    return _kernels.step_vanilla_linear(
                        p, a, gain_cov, dy, delta, dw, dv, s1, s2, c, g)
            else:
                def step(p, mean, gain_cov, dy, delta, dw, dv):
                    step_counter.add(p.shape[1])
                    return _kernels.step_deterministic_linear(
                        p, a, mean, gain_cov, dy, delta, dw, s1, c, g)
        else:
            theta = float(model.theta)
            if variant == "vanilla":
                def step(p, mean, gain_cov, dy, delta, dw, dv):
                    step_counter.add(p.shape[1])
                    return _kernels.step_vanilla_l96(
                        p, theta, gain_cov, dy, delta, dw, dv, s1, s2, c, g)
            else:
                def step(p, mean, gain_cov, dy, delta, dw, dv):
                    step_counter.add(p.shape[1])
                    return _kernels.step_deterministic_l96(
                        p, theta, mean, gain_cov, dy, delta, dw, s1, c, g)
        return step, _kernels.moments

    def step(p, mean, gain_cov, dy, delta, dw, dv):
        return _advance(variant, model, p, mean, gain_cov, dy, delta, dw, dv)

    return step, _moments


def _filter_run(
    model: FilterModel,
    obs: ObservationPath,
    variant: str,
    taper: Optional[TaperMatrix],
    rng: np.random.Generator,
    init_particles: np.ndarray,
    want_covs: bool = False,
) -> tuple[np.ndarray, Optional[np.ndarray], np.ndarray]:
    """Run one single-level filter; returns (means, covs or None, final particles).

    The observation path must already sit at the filter level.  Draw order:
    all dW increments as one (steps, dim_x, N) block, then (vanilla only)
    all dV increments.
    """
    delta = 2.0 ** (-obs.level)
    root = math.sqrt(delta)
    particles = np.array(init_particles, dtype=float)
    dim_x, n = particles.shape
    steps = obs.n_increments
    means = np.empty((steps + 1, dim_x))
    covs = np.empty((steps + 1, dim_x, dim_x)) if want_covs else None
    dw_all = dv_all = None
    if variant != "transport":
        dw_all = root * rng.standard_normal((steps, dim_x, n))
    if variant == "vanilla":
        dv_all = root * rng.standard_normal((steps, model.dim_y, n))
    step, moments_of = _step_factory(model, variant)
    for k in range(steps):
        mean, cov = moments_of(particles)
        means[k] = mean
        if want_covs:
            covs[k] = cov
        gain_cov = cov if taper is None else localize(cov, taper)
        particles = step(particles, mean, gain_cov, obs.increments[k], delta,
                         None if dw_all is None else dw_all[k],
                         None if dv_all is None else dv_all[k])
    mean, cov = moments_of(particles)
    means[steps] = mean
    if want_covs:
        covs[steps] = cov
    return means, covs, particles


def run_filter(
    variant: str,
    model: FilterModel,
    obs: ObservationPath,
    n_particles: int,
    level: int,
    localization: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
) -> list[Moments]:
    """Filter the observation path, recording moments at every grid time.

    Observations finer than the filter level are coarsened exactly.  With a
    taper, every gain uses the localized covariance; the recorded moments
    are the raw sample moments.
    """
    check_variant(variant)
    if rng is None:
        raise ValueError("an rng stream is required")
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if obs.level < level:
        raise ValueError(f"observations at level {obs.level} cannot serve level {level}")
    path = obs.coarsen_to(level)
    init = model.sample_initial(n_particles, rng)
    means, covs, _ = _filter_run(model, path, variant, localization, rng, init, want_covs=True)
    return [Moments(mean=means[k], cov=covs[k]) for k in range(means.shape[0])]
