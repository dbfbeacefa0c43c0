"""Experiment drivers: orchestration, error measurement, CSV emission.

Every Monte-Carlo cell derives its random streams from the master seed and
its labels alone, and cells are reduced in a fixed order, so a given config
and seed produce byte-identical CSV output for any worker count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .. import __version__
from ..localization import TaperMatrix, TaperSpec, taper_for_model
from ..models import (
    FilterModel,
    ObservationPath,
    build_grid_model,
    build_linear_model,
    build_lorenz96_model,
    simulate_truth,
)
from ..multilevel import LevelPlan, allocate_levels, coupled_pair_run, ml_run, pair_cost
from ..normalizing_constant import innovations_log_nc, log_nc_from_means, ml_log_nc
from ..parameter_estimation import StepSchedules, rml_run
from ..enkbf import _filter_run, run_filter
from ..reference_filter import kbf_solve
from .config import ConfigError, ExperimentConfig, ModelConfig, epsilon_plan_start
from .streams import RngStreamKey, derive_stream

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """An experiment produced non-finite numbers."""


@dataclass(frozen=True)
class ExperimentResult:
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]
    metadata: tuple[tuple[str, str], ...]


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def render_csv(result: ExperimentResult) -> str:
    lines = [f"# {key} = {value}" for key, value in result.metadata]
    lines.append(",".join(result.columns))
    for row in result.rows:
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def write_csv(result: ExperimentResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_csv(result), newline="\n")
    return path


def _base_metadata(config: ExperimentConfig) -> list[tuple[str, str]]:
    return [
        ("generator", f"kalbucy {__version__}"),
        ("experiment", config.kind),
        ("config_sha256", config.config_sha256),
        ("master_seed", str(config.run.master_seed)),
    ]


def build_model(mc: ModelConfig) -> FilterModel:
    if mc.kind == "grid":
        return build_grid_model(
            k=mc.k,
            interaction_radius=mc.interaction_radius,
            drift_scale=mc.drift_scale,
            stabilizer=mc.stabilizer,
            obs_scale=mc.obs_scale,
            sigma1=mc.sigma1,
            sigma2=mc.sigma2,
            init_mean=mc.init_mean,
            init_cov=mc.init_cov,
        )
    if mc.kind == "linear":
        return build_linear_model(
            dim_x=mc.dim_x,
            drift_scale=mc.drift_scale,
            obs_scale=mc.obs_scale,
            sigma1=mc.sigma1,
            sigma2=mc.sigma2,
            init_mean=mc.init_mean,
            init_cov=mc.init_cov,
        )
    if mc.kind == "lorenz96":
        return build_lorenz96_model(
            dim_x=mc.dim_x,
            theta=mc.theta if mc.theta is not None else 8.0,
            sigma1=mc.sigma1,
            sigma2=mc.sigma2,
            obs_scale=mc.obs_scale,
            init_mean=mc.init_mean,
            init_perturb=mc.init_perturb,
            init_cov=mc.init_cov,
        )
    raise ConfigError(f"unknown model kind '{mc.kind}'")


def build_taper(config: ExperimentConfig, model: FilterModel) -> Optional[TaperMatrix]:
    if config.filt.localization is None:
        return None
    if model.geometry is None:
        raise ConfigError(
            f"{config.origin}: localization needs a grid or ring model geometry"
        )
    spec = TaperSpec(kind=config.filt.localization, radius=config.filt.radius)
    return taper_for_model(spec, model.geometry, model.dim_x)


def fit_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of y against x."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    return float(xc @ (y - y.mean()) / (xc @ xc))


def _pmap(fn, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


def _check_finite(values: Iterable[float], what: str) -> None:
    arr = np.asarray(list(values), dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} encountered")


# ---------------------------------------------------------------------------
# variance decay
# ---------------------------------------------------------------------------


def _variance_cell(config: ExperimentConfig, cell: tuple[int, int]) -> dict:
    """One (level, repeat): squared fine-coarse gaps for every method."""
    level, repeat = cell
    model = build_model(config.model)
    taper = build_taper(config, model)
    n = config.filt.particles[0]
    horizon = config.run.horizon
    out = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for variant in config.filt.variants:
            for localized in (False, True) if taper is not None else (False,):
                # Streams keyed without the method labels: methods share data
                # and noise, isolating the effect of the variant and the taper.
                data_rng = derive_stream(RngStreamKey(
                    config.run.master_seed, config.kind, repeat, level, 0, "signal"))
                run_rng = derive_stream(RngStreamKey(
                    config.run.master_seed, config.kind, repeat, level, 0, "ensembleW"))
                _, obs = simulate_truth(model, model.theta, level, horizon, data_rng)
                pair = coupled_pair_run(
                    model, obs, level, n, variant, taper if localized else None, run_rng
                )
                diff = pair.fine_estimate - pair.coarse_estimate
                out[(variant, localized)] = float(diff @ diff)
    return out


def run_variance_decay(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    levels = list(range(config.filt.level_min, config.filt.level_max + 1))
    repeats = config.run.repeats
    cells = [(level, r) for level in levels for r in range(repeats)]
    results = _pmap(partial(_variance_cell, config), cells, workers)
    per_cell = dict(zip(cells, results))
    taper_active = config.filt.localization is not None
    loc_flags = (False, True) if taper_active else (False,)
    n = config.filt.particles[0]
    horizon = config.run.horizon

    columns = ("level", "variant", "localized", "variance_estimate", "repeats", "cost")
    rows: list[tuple] = []
    for variant in config.filt.variants:
        for localized in loc_flags:
            variances = []
            for level in levels:
                sq = [per_cell[(level, r)][(variant, localized)] for r in range(repeats)]
                variances.append(float(np.mean(sq)))
                rows.append((level, variant, localized, variances[-1], repeats,
                             pair_cost(n, horizon, level)))
            _check_finite(variances, "variance estimates")
            slope = fit_slope(levels, np.log2(variances))
            rows.append(("slope", variant, localized, slope, repeats, 0.0))
    metadata = _base_metadata(config) + [
        ("particles", str(n)),
        ("levels", f"{levels[0]}..{levels[-1]}"),
        ("slope_rows", "level column holds 'slope'; variance column holds the fitted log2 slope"),
    ]
    return ExperimentResult(tuple(columns), tuple(rows), tuple(metadata))


# ---------------------------------------------------------------------------
# state-estimation MSE vs cost
# ---------------------------------------------------------------------------


def _epsilon_plans(config: ExperimentConfig) -> list[LevelPlan]:
    return [
        allocate_levels(eps, epsilon_plan_start(eps, config.filt.l_start))
        for eps in config.filt.epsilons
    ]


def _data_level(config: ExperimentConfig, plans: Sequence[LevelPlan]) -> int:
    top = max(plan.target_level for plan in plans)
    level = config.run.data_level if config.run.data_level is not None else top + 2
    if level < top:
        raise ConfigError(
            f"{config.origin}: data_level {level} is below the finest plan level {top}"
        )
    return level


def _mse_repeat(config: ExperimentConfig, repeat: int) -> dict:
    """One repeat: data + exact-filter reference + every (eps, variant, loc) run."""
    model = build_model(config.model)
    taper = build_taper(config, model)
    plans = _epsilon_plans(config)
    data_level = _data_level(config, plans)
    horizon = config.run.horizon
    data_rng = derive_stream(RngStreamKey(
        config.run.master_seed, config.kind, repeat, 0, 0, "signal"))
    _, obs = simulate_truth(model, model.theta, data_level, horizon, data_rng)
    reference = kbf_solve(model, obs, data_level)[-1].mean
    out = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for e_idx, plan in enumerate(plans):
            for variant in config.filt.variants:
                for localized in (False, True) if taper is not None else (False,):
                    run_rng = derive_stream(RngStreamKey(
                        config.run.master_seed, config.kind, repeat, e_idx, 0, "ensembleW"))
                    est = ml_run(model, obs, plan, variant,
                                 taper if localized else None, run_rng)
                    err = est.value - reference
                    out[(e_idx, variant, localized)] = (
                        float(err @ err) / model.dim_x,
                        est.total_cost,
                    )
    return out


def run_mse_cost(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    plans = _epsilon_plans(config)
    repeats = config.run.repeats
    results = _pmap(partial(_mse_repeat, config), list(range(repeats)), workers)
    taper_active = config.filt.localization is not None
    loc_flags = (False, True) if taper_active else (False,)

    columns = ("epsilon", "variant", "localized", "mse", "cost", "repeats")
    rows: list[tuple] = []
    for variant in config.filt.variants:
        for localized in loc_flags:
            mses, costs = [], []
            for e_idx, eps in enumerate(config.filt.epsilons):
                cell = [results[r][(e_idx, variant, localized)] for r in range(repeats)]
                mse = float(np.mean([c[0] for c in cell]))
                cost = cell[0][1]
                mses.append(mse)
                costs.append(cost)
                rows.append((eps, variant, localized, mse, cost, repeats))
            if not np.any(np.isfinite(mses)):
                raise NumericalError(f"all MSE points diverged for {variant}, localized={localized}")
            slope = fit_slope(np.log(config.filt.epsilons), np.log(costs))
            rows.append(("slope", variant, localized, 0.0, slope, repeats))
    metadata = _base_metadata(config) + [
        ("mse_normalization", "per_coordinate"),
        ("diverged_cells", "nan MSE marks ensemble divergence in at least one repeat"),
        ("reference", "exact filter mean at the data level"),
        ("note", "localized runs are also measured against the exact filter mean, "
                 "which they approach only up to a localization bias"),
        ("plans", "; ".join(
            f"eps={eps:g}: levels {p.start_level}..{p.target_level} N={p.particles}"
            for eps, p in zip(config.filt.epsilons, plans))),
        ("slope_rows", "epsilon column holds 'slope'; cost column holds the fitted "
                       "log-cost vs log-epsilon slope"),
    ]
    return ExperimentResult(tuple(columns), tuple(rows), tuple(metadata))


# ---------------------------------------------------------------------------
# normalizing-constant MSE vs cost
# ---------------------------------------------------------------------------


def _nc_repeat(config: ExperimentConfig, repeat: int) -> dict:
    model = build_model(config.model)
    taper = build_taper(config, model)
    plans = _epsilon_plans(config)
    data_level = _data_level(config, plans)
    horizon = config.run.horizon
    data_rng = derive_stream(RngStreamKey(
        config.run.master_seed, config.kind, repeat, 0, 0, "signal"))
    _, obs = simulate_truth(model, model.theta, data_level, horizon, data_rng)
    if config.model.kind == "linear":
        reference = innovations_log_nc(model, obs)
    else:
        # Brute-force reference: one fine single-level run with a large ensemble.
        ref_level = max(p.target_level for p in plans) + 3
        if ref_level > data_level:
            raise ConfigError(
                f"{config.origin}: data_level must reach {ref_level} for the grid reference"
            )
        ref_rng = derive_stream(RngStreamKey(
            config.run.master_seed, config.kind, repeat, 0, 1, "ensembleW"))
        ref_obs = obs.coarsen_to(ref_level)
        init = build_model(config.model).sample_initial(config.filt.reference_particles, ref_rng)
        means, _, _ = _filter_run(model, ref_obs, "vanilla", None, ref_rng, init)
        reference = log_nc_from_means(means, ref_obs, model)
    out = {"reference": reference}
    with np.errstate(over="ignore", invalid="ignore"):
        for e_idx, plan in enumerate(plans):
            for variant in config.filt.variants:
                for localized in (False, True) if taper is not None else (False,):
                    run_rng = derive_stream(RngStreamKey(
                        config.run.master_seed, config.kind, repeat, e_idx, 0, "ensembleW"))
                    est = ml_log_nc(model, obs, plan, variant,
                                    taper if localized else None, run_rng)
                    out[(e_idx, variant, localized)] = (
                        (est.log_value - reference) ** 2,
                        est.total_cost,
                    )
    return out


def run_nc_complexity(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    plans = _epsilon_plans(config)
    repeats = config.run.repeats
    results = _pmap(partial(_nc_repeat, config), list(range(repeats)), workers)
    taper_active = config.filt.localization is not None
    loc_flags = (False, True) if taper_active else (False,)

    columns = ("epsilon", "variant", "localized", "mse", "cost", "repeats")
    rows: list[tuple] = []
    for variant in config.filt.variants:
        for localized in loc_flags:
            mses, costs = [], []
            for e_idx, eps in enumerate(config.filt.epsilons):
                cell = [results[r][(e_idx, variant, localized)] for r in range(repeats)]
                mse = float(np.mean([c[0] for c in cell]))
                cost = cell[0][1]
                mses.append(mse)
                costs.append(cost)
                rows.append((eps, variant, localized, mse, cost, repeats))
            if not np.any(np.isfinite(mses)):
                raise NumericalError(f"all NC points diverged for {variant}, localized={localized}")
            slope = fit_slope(np.log(config.filt.epsilons), np.log(costs))
            rows.append(("slope", variant, localized, 0.0, slope, repeats))
    oracle = ("discrete innovations likelihood of the time-stepped model"
              if config.model.kind == "linear"
              else f"single-level run at target+3 with {config.filt.reference_particles} particles")
    metadata = _base_metadata(config) + [
        ("reference_oracle", oracle),
        ("plans", "; ".join(
            f"eps={eps:g}: levels {p.start_level}..{p.target_level} N={p.particles}"
            for eps, p in zip(config.filt.epsilons, plans))),
        ("slope_rows", "epsilon column holds 'slope'; cost column holds the fitted "
                       "log-cost vs log-epsilon slope"),
    ]
    return ExperimentResult(tuple(columns), tuple(rows), tuple(metadata))


# ---------------------------------------------------------------------------
# online parameter estimation
# ---------------------------------------------------------------------------

PARAM_METHODS = (
    ("F1", "vanilla", False),
    ("L-F1", "vanilla", True),
    ("F2", "deterministic", False),
    ("L-F2", "deterministic", True),
)


def _param_seed_cell(config: ExperimentConfig, seed: int) -> dict:
    """All four methods on one seed; data and streams shared across methods."""
    spsa = config.spsa
    model = build_model(config.model)
    taper = build_taper(config, model)
    plan = LevelPlan(
        start_level=config.filt.l_start,
        target_level=config.filt.target_level,
        particles=config.filt.particles,
    )
    data_level = (config.run.data_level if config.run.data_level is not None
                  else plan.target_level)
    schedules = StepSchedules(a0=spsa.a0, alpha=spsa.alpha, b0=spsa.b0, gamma=spsa.gamma)
    data_rng = derive_stream(RngStreamKey(
        config.run.master_seed, config.kind, seed, 0, 0, "signal"))
    truth_model = model.with_theta(spsa.theta_true)
    _, obs = simulate_truth(truth_model, spsa.theta_true, data_level,
                            spsa.iterations, data_rng)
    windows = [obs.window(t, t + 1) for t in range(spsa.iterations)]

    def family(theta):
        return model.with_theta(theta)

    out = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for method, variant, localized in PARAM_METHODS:
            rng = derive_stream(RngStreamKey(
                config.run.master_seed, config.kind, seed, 0, 0, "spsa"))
            result = rml_run(
                family, windows, spsa.theta0, schedules, plan, spsa.iterations,
                variant, taper if localized else None, rng,
            )
            out[method] = result
    return out


def run_param_est(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    spsa = config.spsa
    seeds = list(range(spsa.seeds))
    results = _pmap(partial(_param_seed_cell, config), seeds, workers)

    columns = ("row", "method", "seed", "iteration", "theta", "u_plus", "u_minus",
               "a_t", "b_t", "running_mean", "running_variance")
    rows: list[tuple] = []
    quarter_means = []
    for seed, per_method in zip(seeds, results):
        for method, _, _ in PARAM_METHODS:
            res = per_method[method]
            thetas = res.thetas[:, 0]
            rows.append(("trace", method, seed, 0, thetas[0],
                         math.nan, math.nan, math.nan, math.nan, math.nan, math.nan))
            for info, theta in zip(res.infos, thetas[1:]):
                rows.append(("trace", method, seed, info.iteration + 1, theta,
                             info.u_plus, info.u_minus, info.gain, info.perturb_size,
                             math.nan, math.nan))
            tail_len = max(1, spsa.iterations // 4)
            tail = thetas[-tail_len:]
            running_mean = float(tail.mean())
            running_var = float(tail.var(ddof=1)) if tail_len >= 2 else math.nan
            rows.append(("summary", method, seed, len(res.infos), thetas[-1],
                         math.nan, math.nan, math.nan, math.nan,
                         running_mean, running_var))
            quarter_means.append(running_mean)
    if not np.any(np.isfinite(quarter_means)):
        raise NumericalError("every parameter chain diverged")
    metadata = _base_metadata(config) + [
        ("methods", "F1=vanilla, F2=deterministic, L- prefix = localized"),
        ("theta_true", format_value(spsa.theta_true)),
        ("theta0", format_value(spsa.theta0)),
        ("iterations", str(spsa.iterations)),
        ("summary_rows", "running mean/variance over the final quarter of each chain"),
    ]
    return ExperimentResult(tuple(columns), tuple(rows), tuple(metadata))


# ---------------------------------------------------------------------------
# single filtering run
# ---------------------------------------------------------------------------


def run_single(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    model = build_model(config.model)
    taper = build_taper(config, model)
    level = config.filt.target_level
    n = config.filt.particles[0]
    horizon = config.run.horizon
    data_rng = derive_stream(RngStreamKey(
        config.run.master_seed, config.kind, 0, 0, 0, "signal"))
    _, obs = simulate_truth(model, model.theta, level, horizon, data_rng)
    run_rng = derive_stream(RngStreamKey(
        config.run.master_seed, config.kind, 0, 0, 0, "ensembleW"))
    variant = config.filt.variants[0]
    moments = run_filter(variant, model, obs, n, level, taper, run_rng)
    reference = kbf_solve(model, obs, level) if model.is_linear else None

    delta = 2.0 ** (-level)
    columns = ["time"]
    columns += [f"mean_{i}" for i in range(model.dim_x)]
    columns += [f"var_{i}" for i in range(model.dim_x)]
    if reference is not None:
        columns += [f"ref_mean_{i}" for i in range(model.dim_x)]
    rows = []
    for k, mom in enumerate(moments):
        row = [k * delta, *mom.mean, *np.diag(mom.cov)]
        if reference is not None:
            row += list(reference[k].mean)
        rows.append(tuple(row))
    metadata = _base_metadata(config) + [
        ("variant", variant),
        ("particles", str(n)),
        ("level", str(level)),
    ]
    return ExperimentResult(tuple(columns), tuple(rows), tuple(metadata))


_DISPATCH = {
    "variance_decay": run_variance_decay,
    "mse_cost": run_mse_cost,
    "nc_complexity": run_nc_complexity,
    "param_est": run_param_est,
    "single_run": run_single,
}


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    runner = _DISPATCH[config.kind]
    logger.info("running %s (seed %d, %d worker(s))", config.kind,
                config.run.master_seed, workers)
    return runner(config, workers=workers)
