"""Flat key = value experiment configuration with line-precise validation.

The format is deliberately tiny: '[section]' headers, 'key = value' lines,
'#' comments, blank lines.  Parsing records the line number of every entry
so validation errors point at the offending line.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

EXPERIMENT_KINDS = ("variance_decay", "mse_cost", "nc_complexity", "param_est", "single_run")

_SCHEMA: dict[str, set[str]] = {
    "experiment": {"kind"},
    "model": {
        "kind", "dim_x", "k", "interaction_radius", "drift_scale", "stabilizer",
        "obs_scale", "sigma1", "sigma2", "aux_d", "init_mean", "init_cov",
        "init_perturb", "theta",
    },
    "filter": {
        "variant", "variants", "localization", "radius", "l_start", "target_level",
        "level_min", "level_max", "particles", "epsilons", "reference_particles",
    },
    "run": {"T", "repeats", "master_seed", "data_level"},
    "spsa": {"a0", "alpha", "b0", "gamma", "iterations", "theta0", "theta_true", "seeds"},
    "output": {"path"},
}


class ConfigError(ValueError):
    """Invalid configuration; message carries file and line when known."""


@dataclass
class _Entry:
    value: str
    line: int


@dataclass
class _Raw:
    origin: str
    sections: dict[str, dict[str, _Entry]] = field(default_factory=dict)
    section_lines: dict[str, int] = field(default_factory=dict)

    def fail(self, line: int, message: str) -> None:
        raise ConfigError(f"{self.origin}:{line}: {message}")

    def get(self, section: str, key: str) -> Optional[_Entry]:
        return self.sections.get(section, {}).get(key)


def _parse_text(text: str, origin: str) -> _Raw:
    raw = _Raw(origin=origin)
    current: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if current not in _SCHEMA:
                raw.fail(lineno, f"unknown section [{current}]")
            if current in raw.sections:
                raw.fail(lineno, f"duplicate section [{current}]")
            raw.sections[current] = {}
            raw.section_lines[current] = lineno
            continue
        if "=" not in stripped:
            raw.fail(lineno, "expected 'key = value'")
        if current is None:
            raw.fail(lineno, "entry outside any [section]")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA[current]:
            raw.fail(lineno, f"unknown key '{key}' in section [{current}]")
        if key in raw.sections[current]:
            raw.fail(lineno, f"duplicate key '{key}' in section [{current}]")
        raw.sections[current][key] = _Entry(value=value, line=lineno)
    return raw


def _typed(raw: _Raw, section: str, key: str, kind: str, default=None, required=False):
    entry = raw.get(section, key)
    if entry is None:
        if required:
            line = raw.section_lines.get(section, 0)
            raw.fail(line, f"missing required key '{key}' in section [{section}]")
        return default
    text = entry.value
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == "int_list":
            return tuple(int(p.strip()) for p in text.split(",") if p.strip())
        if kind == "float_list":
            return tuple(float(p.strip()) for p in text.split(",") if p.strip())
        if kind == "str_list":
            return tuple(p.strip() for p in text.split(",") if p.strip())
    except ValueError:
        raw.fail(entry.line, f"cannot parse '{key} = {text}' as {kind}")
    raise AssertionError(f"unknown kind {kind}")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    dim_x: Optional[int]
    k: Optional[int]
    interaction_radius: float
    drift_scale: float
    stabilizer: float
    obs_scale: float
    sigma1: float
    sigma2: float
    aux_d: float  # exposed scalar from the reference setup; not bound to any formula
    init_mean: float
    init_cov: float
    init_perturb: float
    theta: Optional[float]


@dataclass(frozen=True)
class FilterSection:
    variants: tuple[str, ...]
    localization: Optional[str]
    radius: float
    l_start: Union[int, str, None]
    target_level: Optional[int]
    level_min: Optional[int]
    level_max: Optional[int]
    particles: tuple[int, ...]
    epsilons: tuple[float, ...]
    reference_particles: int


@dataclass(frozen=True)
class RunSection:
    horizon: int
    repeats: int
    master_seed: int
    data_level: Optional[int]


@dataclass(frozen=True)
class SpsaSection:
    a0: float
    alpha: float
    b0: float
    gamma: float
    iterations: int
    theta0: float
    theta_true: float
    seeds: int


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    model: ModelConfig
    filt: FilterSection
    run: RunSection
    spsa: Optional[SpsaSection]
    output_path: Optional[str]
    config_sha256: str
    origin: str


def load_config(path: Union[str, Path], seed_override: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from exc
    return parse_config(text, origin=str(path), seed_override=seed_override)


def parse_config(
    text: str, origin: str = "<config>", seed_override: Optional[int] = None
) -> ExperimentConfig:
    raw = _parse_text(text, origin)
    kind = _typed(raw, "experiment", "kind", "str", required=True)
    if kind not in EXPERIMENT_KINDS:
        entry = raw.get("experiment", "kind")
        raw.fail(entry.line, f"unknown experiment kind '{kind}', expected one of {EXPERIMENT_KINDS}")

    model = ModelConfig(
        kind=_typed(raw, "model", "kind", "str", required=True),
        dim_x=_typed(raw, "model", "dim_x", "int"),
        k=_typed(raw, "model", "k", "int"),
        interaction_radius=_typed(raw, "model", "interaction_radius", "float", 1.5),
        drift_scale=_typed(raw, "model", "drift_scale", "float", 0.1),
        stabilizer=_typed(raw, "model", "stabilizer", "float", 0.5),
        obs_scale=_typed(raw, "model", "obs_scale", "float", 1.0),
        sigma1=_typed(raw, "model", "sigma1", "float", 1.0),
        sigma2=_typed(raw, "model", "sigma2", "float", 1.0),
        aux_d=_typed(raw, "model", "aux_d", "float", 1.4),
        init_mean=_typed(raw, "model", "init_mean", "float", 0.0),
        init_cov=_typed(raw, "model", "init_cov", "float", 1.0),
        init_perturb=_typed(raw, "model", "init_perturb", "float", 0.01),
        theta=_typed(raw, "model", "theta", "float"),
    )
    if model.kind not in ("grid", "linear", "lorenz96"):
        entry = raw.get("model", "kind")
        raw.fail(entry.line, f"unknown model kind '{model.kind}'")
    if model.kind == "grid":
        if model.k is None or model.k < 1:
            line = raw.get("model", "k").line if raw.get("model", "k") else raw.section_lines.get("model", 0)
            raw.fail(line, "grid models need a positive 'k'")
    elif model.dim_x is None or model.dim_x < 1:
        line = raw.section_lines.get("model", 0)
        raw.fail(line, f"model kind '{model.kind}' needs a positive 'dim_x'")

    variant_single = _typed(raw, "filter", "variant", "str")
    variant_multi = _typed(raw, "filter", "variants", "str_list")
    if variant_single and variant_multi:
        raw.fail(raw.get("filter", "variant").line, "give either 'variant' or 'variants', not both")
    variants = variant_multi or ((variant_single,) if variant_single else ("vanilla",))
    for v in variants:
        if v not in ("vanilla", "deterministic", "transport"):
            line = (raw.get("filter", "variant") or raw.get("filter", "variants")).line
            raw.fail(line, f"unknown variant '{v}'")

    localization = _typed(raw, "filter", "localization", "str")
    if localization in (None, "none", ""):
        localization = None
    elif localization not in ("uniform", "triangular", "gaspari_cohn"):
        raw.fail(raw.get("filter", "localization").line, f"unknown localization '{localization}'")

    l_start_raw = _typed(raw, "filter", "l_start", "str")
    l_start: Union[int, str, None]
    if l_start_raw is None:
        l_start = None
    elif l_start_raw == "auto":
        l_start = "auto"
    else:
        try:
            l_start = int(l_start_raw)
        except ValueError:
            raw.fail(raw.get("filter", "l_start").line, "l_start must be an integer or 'auto'")

    filt = FilterSection(
        variants=variants,
        localization=localization,
        radius=_typed(raw, "filter", "radius", "float", 3.0),
        l_start=l_start,
        target_level=_typed(raw, "filter", "target_level", "int"),
        level_min=_typed(raw, "filter", "level_min", "int"),
        level_max=_typed(raw, "filter", "level_max", "int"),
        particles=_typed(raw, "filter", "particles", "int_list", ()),
        epsilons=_typed(raw, "filter", "epsilons", "float_list", ()),
        reference_particles=_typed(raw, "filter", "reference_particles", "int", 10000),
    )
    for eps in filt.epsilons:
        if not 0.0 < eps < 1.0:
            raw.fail(raw.get("filter", "epsilons").line, f"epsilon {eps} outside (0, 1)")

    run = RunSection(
        horizon=_typed(raw, "run", "T", "int", 10),
        repeats=_typed(raw, "run", "repeats", "int", 1),
        master_seed=_typed(raw, "run", "master_seed", "int", 0),
        data_level=_typed(raw, "run", "data_level", "int"),
    )
    if run.repeats < 1:
        raw.fail(raw.get("run", "repeats").line, "repeats must be >= 1")
    if run.horizon < 1:
        raw.fail(raw.get("run", "T").line, "T must be >= 1")

    spsa = None
    if "spsa" in raw.sections:
        spsa = SpsaSection(
            a0=_typed(raw, "spsa", "a0", "float", 0.5),
            alpha=_typed(raw, "spsa", "alpha", "float", 0.602),
            b0=_typed(raw, "spsa", "b0", "float", 0.1),
            gamma=_typed(raw, "spsa", "gamma", "float", 0.101),
            iterations=_typed(raw, "spsa", "iterations", "int", 400),
            theta0=_typed(raw, "spsa", "theta0", "float", 4.0),
            theta_true=_typed(raw, "spsa", "theta_true", "float", 8.0),
            seeds=_typed(raw, "spsa", "seeds", "int", 5),
        )

    _validate_kind(raw, kind, model, filt, spsa)

    master_seed = run.master_seed if seed_override is None else seed_override
    run = RunSection(run.horizon, run.repeats, master_seed, run.data_level)
    sha = hashlib.sha256(text.encode()).hexdigest()
    return ExperimentConfig(
        kind=kind,
        model=model,
        filt=filt,
        run=run,
        spsa=spsa,
        output_path=_typed(raw, "output", "path", "str"),
        config_sha256=sha,
        origin=origin,
    )


def _validate_kind(raw: _Raw, kind: str, model: ModelConfig,
                   filt: FilterSection, spsa: Optional[SpsaSection]) -> None:
    section_line = raw.section_lines.get("filter", 0)
    if kind == "variance_decay":
        if filt.level_min is None or filt.level_max is None:
            raw.fail(section_line, "variance_decay needs 'level_min' and 'level_max'")
        if filt.level_min < 1 or filt.level_max < filt.level_min:
            raw.fail(section_line, "need 1 <= level_min <= level_max")
        if not filt.particles:
            raw.fail(section_line, "variance_decay needs 'particles' (one count)")
    elif kind in ("mse_cost", "nc_complexity"):
        if not filt.epsilons:
            raw.fail(section_line, f"{kind} needs a nonempty 'epsilons' list")
        if kind == "mse_cost" and model.kind == "lorenz96":
            raw.fail(raw.get("model", "kind").line,
                     "mse_cost needs a linear model (the exact filter is the reference)")
        if kind == "nc_complexity" and model.kind == "lorenz96":
            raw.fail(raw.get("model", "kind").line, "nc_complexity needs a linear model")
    elif kind == "param_est":
        if spsa is None:
            raw.fail(raw.section_lines.get("experiment", 0), "param_est needs an [spsa] section")
        if model.kind == "lorenz96" and model.dim_x is not None and model.dim_x < 4:
            raw.fail(raw.get("model", "dim_x").line, "Lorenz 96 needs dim_x >= 4")
        if filt.target_level is None or not isinstance(filt.l_start, int):
            raw.fail(section_line, "param_est needs integer 'l_start' and 'target_level'")
        if not filt.particles or len(filt.particles) != filt.target_level - filt.l_start + 1:
            raw.fail(section_line, "param_est needs one particle count per level")
    elif kind == "single_run":
        if filt.target_level is None:
            raw.fail(section_line, "single_run needs 'target_level'")
        if not filt.particles:
            raw.fail(section_line, "single_run needs 'particles' (one count)")


def epsilon_plan_start(epsilon: float, l_start: Union[int, str, None]) -> int:
    """Start level for one epsilon.

    A fixed integer is passed through.  'auto' (and the default) picks the
    level just below the target, a narrow high-level band, floored at level
    3 so the coarsest explicit steps stay well inside the stability region.
    """
    if isinstance(l_start, int):
        return l_start
    target = max(1, math.ceil(math.log2(1.0 / epsilon)))
    return max(3, target - 1)
