"""Exact Kalman-Bucy mean / Riccati covariance solver.

This is the ground-truth oracle for the linear-Gaussian models: the filter
mean and covariance equations are integrated with explicit Euler on the same
dyadic grid the ensemble filters use, so comparisons sit on a matched
discretization hierarchy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .models import FilterModel, ObservationPath

logger = logging.getLogger(__name__)

_NEG_EIG_TOL = -1e-8


@dataclass(frozen=True)
class KbfState:
    mean: np.ndarray
    cov: np.ndarray
    time: float


def riccati_drift(p: np.ndarray, model: FilterModel) -> np.ndarray:
    """A P + P A^T - P S P + R1 with S = C^T R2^{-1} C."""
    if not model.is_linear:
        raise ValueError("the Riccati drift is defined for linear models only")
    if p.shape != (model.dim_x, model.dim_x):
        raise ValueError(f"covariance shape {p.shape} != ({model.dim_x}, {model.dim_x})")
    a = model.drift
    return a @ p + p @ a.T - p @ model.obs_info @ p + model.sig_noise_cov


def _clip_negative_eigs(p: np.ndarray) -> np.ndarray:
    w_min = np.linalg.eigvalsh(p).min()
    if w_min < _NEG_EIG_TOL:
        logger.warning("Riccati covariance lost PSD-ness (min eig %.3e); clipping", w_min)
        w, v = np.linalg.eigh(p)
        p = (v * np.clip(w, 0.0, None)) @ v.T
    return p


def kbf_solve(
    model: FilterModel, obs: ObservationPath, level: int
) -> list[KbfState]:
    """Filter mean and covariance at every grid time of the given level.

    Observations finer than the requested level are coarsened (exactly) on
    the fly.  Per step the mean gains the drift term plus the Kalman gain
    P C^T R2^{-1} applied to the innovation, and the covariance advances by
    Euler on the Riccati flow; the covariance is symmetrized every step and
    eigenvalues below -1e-8 are clipped to zero with a logged warning.
    """
    if not model.is_linear:
        raise ValueError("kbf_solve requires a linear model")
    if obs.level < level:
        raise ValueError(f"observations at level {obs.level} cannot serve level {level}")
    path = obs.coarsen_to(level)
    delta = 2.0 ** (-level)
    a = model.drift
    gain_map = model.obs_gain_map
    mean = model.init_mean.copy()
    cov = model.init_cov.copy()
    states = [KbfState(mean.copy(), cov.copy(), 0.0)]
    for k in range(path.n_increments):
        dy = path.increments[k]
        gain = cov @ gain_map
        innov = dy - model.obs_matrix @ mean * delta
        mean = mean + a @ mean * delta + gain @ innov
        cov = cov + delta * riccati_drift(cov, model)
        cov = (cov + cov.T) / 2.0
        cov = _clip_negative_eigs(cov)
        states.append(KbfState(mean.copy(), cov.copy(), (k + 1) * delta))
    return states


def kbf_means(model: FilterModel, obs: ObservationPath, level: int) -> np.ndarray:
    """Just the mean trajectory, as an (n_steps + 1, dim_x) array."""
    return np.array([s.mean for s in kbf_solve(model, obs, level)])
