"""Online recursive maximum likelihood with random-sign gradient probes.

Each iteration perturbs the parameter by +/- b_t along a random sign vector,
evaluates the multilevel log normalizing-constant increment of the next unit
data window at both perturbed parameters with common random numbers, and
takes a scaled finite-difference step.  The carried ensembles then advance
one unit window under the updated parameter at the finest level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .enkbf import _filter_run, check_variant
from .localization import TaperMatrix
from .models import FilterModel, ObservationPath
from .multilevel import LevelPlan
from .normalizing_constant import ml_log_nc

logger = logging.getLogger(__name__)

ModelFamily = Callable[[Union[float, np.ndarray]], FilterModel]


@dataclass(frozen=True)
class StepSchedules:
    """Gain and perturbation sequences a_t = a0 (t+1)^-alpha, b_t = b0 (t+1)^-gamma.

    The admissible exponents keep sum a_t infinite, sum a_t^2 finite and
    sum a_t^2 / b_t^2 finite: alpha in (0.5, 1], gamma > 0 and
    2 (alpha - gamma) > 1.
    """

    a0: float = 0.5
    alpha: float = 0.602
    b0: float = 0.1
    gamma: float = 0.101

    def __post_init__(self) -> None:
        if self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("a0 and b0 must be positive")
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0.5, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if 2.0 * (self.alpha - self.gamma) <= 1.0:
            raise ValueError("need 2 (alpha - gamma) > 1 for summable squared step ratios")

    def gain(self, t: int) -> float:
        return self.a0 * (t + 1) ** (-self.alpha)

    def perturb(self, t: int) -> float:
        return self.b0 * (t + 1) ** (-self.gamma)


@dataclass(frozen=True)
class SpsaState:
    """Current parameter, iteration count and the carried particle block."""

    theta: np.ndarray
    iteration: int
    ensembles: np.ndarray  # (dim_x, N_total)


@dataclass(frozen=True)
class SpsaStepInfo:
    iteration: int
    u_plus: float
    u_minus: float
    gain: float
    perturb_size: float
    accepted: bool


@dataclass(frozen=True)
class RmlResult:
    thetas: np.ndarray  # (iterations + 1, dim_theta)
    infos: tuple[SpsaStepInfo, ...]


def spsa_perturbation(dim_theta: int, rng: np.random.Generator) -> np.ndarray:
    """Independent +/-1 signs, each with probability one half."""
    if dim_theta < 1:
        raise ValueError("dim_theta must be positive")
    return rng.integers(0, 2, size=dim_theta).astype(float) * 2.0 - 1.0


def theta_update(
    theta: np.ndarray,
    signs: np.ndarray,
    u_plus: float,
    u_minus: float,
    gain: float,
    perturb_size: float,
) -> np.ndarray:
    """theta_k + gain * (u_plus - u_minus) / (2 * perturb_size * signs_k)."""
    return theta + gain * (u_plus - u_minus) / (2.0 * perturb_size * signs)


def _crn_pair(rng: np.random.Generator) -> tuple[np.random.Generator, np.random.Generator]:
    # Two generators over the exact same stream: common random numbers for
    # the two perturbed evaluations.
    key = rng.integers(0, 2 ** 64, size=2, dtype=np.uint64)
    return (
        np.random.Generator(np.random.Philox(key=key)),
        np.random.Generator(np.random.Philox(key=key)),
    )


def _child(rng: np.random.Generator) -> np.random.Generator:
    key = rng.integers(0, 2 ** 64, size=2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def spsa_step(
    state: SpsaState,
    window_obs: ObservationPath,
    model_family: ModelFamily,
    schedules: StepSchedules,
    plan: LevelPlan,
    variant: str,
    taper: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
) -> tuple[SpsaState, SpsaStepInfo]:
    """One parameter update plus the unit-window advance of the ensembles.

    A non-finite normalizing-constant ratio rejects the step: the parameter
    stays put, a warning is logged, and the run continues.
    """
    check_variant(variant)
    if rng is None:
        raise ValueError("an rng stream is required")
    t = state.iteration
    gain = schedules.gain(t + 1)
    perturb_size = schedules.perturb(t + 1)
    signs = spsa_perturbation(state.theta.size, rng)
    rng_plus, rng_minus = _crn_pair(rng)
    theta_plus = state.theta + perturb_size * signs
    theta_minus = state.theta - perturb_size * signs
    scalar = state.theta.size == 1
    u_plus = ml_log_nc(
        model_family(theta_plus[0] if scalar else theta_plus),
        window_obs, plan, variant, taper, rng_plus, init_particles=state.ensembles,
    ).log_value
    u_minus = ml_log_nc(
        model_family(theta_minus[0] if scalar else theta_minus),
        window_obs, plan, variant, taper, rng_minus, init_particles=state.ensembles,
    ).log_value
    accepted = bool(np.isfinite(u_plus) and np.isfinite(u_minus))
    if accepted:
        new_theta = theta_update(state.theta, signs, u_plus, u_minus, gain, perturb_size)
    else:
        logger.warning("non-finite likelihood ratio at iteration %d; step rejected", t)
        new_theta = state.theta
    advance_model = model_family(new_theta[0] if scalar else new_theta)
    obs_fine = window_obs.coarsen_to(plan.target_level)
    _, _, particles = _filter_run(
        advance_model, obs_fine, variant, taper, _child(rng), state.ensembles
    )
    info = SpsaStepInfo(
        iteration=t,
        u_plus=float(u_plus),
        u_minus=float(u_minus),
        gain=gain,
        perturb_size=perturb_size,
        accepted=accepted,
    )
    return SpsaState(theta=new_theta, iteration=t + 1, ensembles=particles), info


def rml_run(
    model_family: ModelFamily,
    windows: Union[Sequence[ObservationPath], Iterable[ObservationPath]],
    theta0: Union[float, np.ndarray],
    schedules: StepSchedules,
    plan: LevelPlan,
    iterations: int,
    variant: str,
    taper: Optional[TaperMatrix] = None,
    rng: Optional[np.random.Generator] = None,
) -> RmlResult:
    """Run the online estimator over successive unit data windows.

    The initial carried ensembles are drawn from the initial law of the
    model at theta0.  Rejected steps leave the parameter unchanged but the
    run continues.
    """
    if iterations < 1:
        raise ValueError("need at least one iteration")
    if rng is None:
        raise ValueError("an rng stream is required")
    theta = np.atleast_1d(np.asarray(theta0, dtype=float)).copy()
    base_model = model_family(theta[0] if theta.size == 1 else theta)
    ensembles = base_model.sample_initial(plan.total_particles, rng)
    state = SpsaState(theta=theta, iteration=0, ensembles=ensembles)
    thetas = [state.theta.copy()]
    infos: list[SpsaStepInfo] = []
    window_iter = iter(windows)
    for t in range(iterations):
        try:
            window = next(window_iter)
        except StopIteration as exc:
            raise ValueError(f"data source exhausted after {t} windows, need {iterations}") from exc
        state, info = spsa_step(
            state, window, model_family, schedules, plan, variant, taper, rng
        )
        thetas.append(state.theta.copy())
        infos.append(info)
    return RmlResult(thetas=np.array(thetas), infos=tuple(infos))
