"""Coupled two-level runs and the telescoped multilevel estimator.

A coupled pair advances a fine system (step 2**-l) and a coarse system
(step 2**-(l-1)) from shared initial particles: both see the same
observation path (coarse increments are exact sums of two fine ones) and
the coarse Brownian increments are the pairwise sums of the fine ones.
The multilevel estimate telescopes a base-level run with the per-level
fine-minus-coarse increments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .enkbf import _filter_run, _step_factory, check_variant
from .localization import TaperMatrix, localize
from .models import FilterModel, ObservationPath


@dataclass(frozen=True)
class LevelPlan:
    """Discretization levels and per-level particle counts."""

    start_level: int
    target_level: int
    particles: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.start_level < 0:
            raise ValueError("start level must be >= 0")
        if self.target_level <= self.start_level:
            raise ValueError("target level must exceed the start level")
        if len(self.particles) != self.n_levels:
            raise ValueError(
                f"need {self.n_levels} particle counts, got {len(self.particles)}"
            )
        if any(n < 2 for n in self.particles):
            raise ValueError("every level needs at least 2 particles")

    @property
    def n_levels(self) -> int:
        return self.target_level - self.start_level + 1

    @property
    def levels(self) -> range:
        return range(self.start_level, self.target_level + 1)

    def particles_at(self, level: int) -> int:
        return self.particles[level - self.start_level]

    @property
    def total_particles(self) -> int:
        return sum(self.particles)


@dataclass(frozen=True)
class CoupledPairResult:
    """Terminal mean estimates of one coupled fine/coarse run."""

    fine_estimate: np.ndarray
    coarse_estimate: np.ndarray
    cost: float


@dataclass(frozen=True)
class MlEstimate:
    """Telescoped multilevel estimate; value == base + sum(increments)."""

    value: np.ndarray
    base_estimate: np.ndarray
    per_level_increments: tuple[np.ndarray, ...]
    total_cost: float


def pair_cost(n_particles: int, horizon: float, level: int) -> float:
    """Particle-steps of one coupled pair: N * T * (2^l + 2^(l-1))."""
    return n_particles * horizon * (2 ** level + 2 ** (level - 1))


def single_cost(n_particles: int, horizon: float, level: int) -> float:
    """Particle-steps of one single-level run: N * T * 2^l."""
    return n_particles * horizon * 2 ** level


def _coupled_run(
    model: FilterModel,
    obs: ObservationPath,
    level: int,
    variant: str,
    taper: Optional[TaperMatrix],
    rng: np.random.Generator,
    init_particles: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance the coupled pair; returns (fine means, coarse means).

    Per coarse step: two fine sub-steps, then one coarse step fed the
    pairwise-summed Brownian increments and the summed observation
    increments.  Sample covariances are computed per level; the taper,
    when present, is applied to both.  Draw order: all fine dW increments
    as one block, then (vanilla only) all fine dV increments.
    """
    obs_fine = obs.coarsen_to(level)
    obs_coarse = obs_fine.coarsen()
    delta_f = 2.0 ** (-level)
    delta_c = 2.0 * delta_f
    root_f = math.sqrt(delta_f)
    fine = np.array(init_particles, dtype=float)
    coarse = fine.copy()
    dim_x, n = fine.shape
    k_fine = obs_fine.n_increments
    k_coarse = obs_coarse.n_increments
    means_f = np.empty((k_fine + 1, dim_x))
    means_c = np.empty((k_coarse + 1, dim_x))
    dw_all = root_f * rng.standard_normal((k_fine, dim_x, n))
    dv_all = None
    if variant == "vanilla":
        dv_all = root_f * rng.standard_normal((k_fine, model.dim_y, n))
    step, moments_of = _step_factory(model, variant)
    for j in range(k_coarse):
        for s in (0, 1):
            k = 2 * j + s
            mean, cov = moments_of(fine)
            means_f[k] = mean
            gain_cov = cov if taper is None else localize(cov, taper)
            fine = step(fine, mean, gain_cov, obs_fine.increments[k], delta_f,
                        dw_all[k], None if dv_all is None else dv_all[k])
        mean, cov = moments_of(coarse)
        means_c[j] = mean
        gain_cov = cov if taper is None else localize(cov, taper)
        coarse = step(coarse, mean, gain_cov, obs_coarse.increments[j], delta_c,
                      dw_all[2 * j] + dw_all[2 * j + 1],
                      None if dv_all is None else dv_all[2 * j] + dv_all[2 * j + 1])
    means_f[-1] = fine.mean(axis=1)
    means_c[-1] = coarse.mean(axis=1)
    return means_f, means_c


def coupled_pair_run(
    model: FilterModel,
    obs: ObservationPath,
    level: int,
    n_particles: int,
    variant: str,
    taper: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
) -> CoupledPairResult:
    """One coupled fine/coarse run at (level, level-1) from fresh particles."""
    check_variant(variant)
    if variant == "transport":
        raise ValueError("the transport variant has no multilevel coupling")
    if level < 1:
        raise ValueError("coupled pairs need level >= 1")
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if rng is None:
        raise ValueError("an rng stream is required")
    if obs.level < level:
        raise ValueError(f"observations at level {obs.level} cannot serve level {level}")
    init = model.sample_initial(n_particles, rng)
    means_f, means_c = _coupled_run(model, obs, level, variant, taper, rng, init)
    horizon = obs.coarsen_to(level).duration
    return CoupledPairResult(
        fine_estimate=means_f[-1],
        coarse_estimate=means_c[-1],
        cost=pair_cost(n_particles, horizon, level),
    )


def _split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive n independent child streams from one parent, deterministically."""
    children = []
    for _ in range(n):
        key = rng.integers(0, 2 ** 64, size=2, dtype=np.uint64)
        children.append(np.random.Generator(np.random.Philox(key=key)))
    return children


def ml_run(
    model: FilterModel,
    obs: ObservationPath,
    plan: LevelPlan,
    variant: str,
    taper: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
) -> MlEstimate:
    """Telescoped multilevel estimate of the filter mean at the final time.

    The base term is a single-level run at the start level; every higher
    level contributes an independent coupled pair.  All levels consume
    exact coarsenings of the one observation path passed in.
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
    streams = _split_rng(rng, plan.n_levels)
    base_obs = obs.coarsen_to(plan.start_level)
    n0 = plan.particles_at(plan.start_level)
    init = model.sample_initial(n0, streams[0])
    means, _, _ = _filter_run(model, base_obs, variant, taper, streams[0], init)
    base = means[-1]
    horizon = base_obs.duration
    total_cost = single_cost(n0, horizon, plan.start_level)
    increments: list[np.ndarray] = []
    for idx, level in enumerate(range(plan.start_level + 1, plan.target_level + 1)):
        n_l = plan.particles_at(level)
        stream = streams[idx + 1]
        init = model.sample_initial(n_l, stream)
        means_f, means_c = _coupled_run(model, obs, level, variant, taper, stream, init)
        increments.append(means_f[-1] - means_c[-1])
        total_cost += pair_cost(n_l, horizon, level)
    value = base.copy()
    for inc in increments:
        value = value + inc
    return MlEstimate(
        value=value,
        base_estimate=base,
        per_level_increments=tuple(increments),
        total_cost=total_cost,
    )


def allocate_levels(epsilon: float, start_level: int = 0) -> LevelPlan:
    """Level range and particle counts targeting a mean-square error ~ epsilon^2.

    L = max(start + 1, ceil(log2(1/epsilon))) and
    N_l = ceil(epsilon^-2 * 2^-l * (L - start + 1)), clamped to >= 2, which
    makes sum_l 2^-l / N_l <= epsilon^2.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if start_level < 0:
        raise ValueError("start level must be >= 0")
    target = max(start_level + 1, math.ceil(math.log2(1.0 / epsilon)))
    width = target - start_level + 1
    inv_eps2 = epsilon ** -2
    counts = tuple(
        max(2, math.ceil(inv_eps2 * 2.0 ** (-l) * width))
        for l in range(start_level, target + 1)
    )
    return LevelPlan(start_level=start_level, target_level=target, particles=counts)


def variance_of_increment(
    model: FilterModel,
    obs_generator: Callable[[np.random.Generator], ObservationPath],
    level: int,
    n_particles: int,
    repeats: int,
    variant: str,
    taper: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Monte-Carlo estimate of E || fine - coarse ||^2 for one coupled level.

    Every repeat draws a fresh observation path through obs_generator and
    fresh ensembles, so the estimate averages over both data and particle
    noise.
    """
    if repeats < 20:
        raise ValueError("need at least 20 repeats for a usable variance estimate")
    if rng is None:
        raise ValueError("an rng stream is required")
    total = 0.0
    for data_rng, run_rng in zip(*[iter(_split_rng(rng, 2 * repeats))] * 2):
        obs = obs_generator(data_rng)
        pair = coupled_pair_run(model, obs, level, n_particles, variant, taper, run_rng)
        diff = pair.fine_estimate - pair.coarse_estimate
        total += float(diff @ diff)
    return total / repeats
