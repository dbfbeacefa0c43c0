"""Filtering model definitions and ground-truth path simulation.

The continuous-time model is

    dY_t = C X_t dt + B_obs dV_t        (observations, Y_0 = 0)
    dX_t = drift(X_t) dt + B_sig dW_t   (signal)

with B_sig, B_obs symmetric square roots of the signal/observation noise
covariances.  The drift is either a square matrix (linear model) or a
vectorised function f(x, theta).  All paths are simulated with
Euler-Maruyama on the dyadic grid of step 2**-level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Optional, Union

import numpy as np

DriftFn = Callable[[np.ndarray, Union[float, np.ndarray, None]], np.ndarray]

_SYM_TOL = 1e-10


def _check_symmetric(name: str, mat: np.ndarray) -> None:
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=_SYM_TOL, rtol=0.0):
        raise ValueError(f"{name} must be symmetric")


def _psd_sqrt(mat: np.ndarray, name: str) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    if w.min(initial=0.0) < -1e-8:
        raise ValueError(f"{name} must be positive semi-definite (min eig {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _identity_scale(mat: np.ndarray) -> Optional[float]:
    """The scalar c when mat == c * I exactly, else None."""
    scale = float(mat[0, 0])
    return scale if np.array_equal(mat, scale * np.eye(mat.shape[0])) else None


@dataclass(frozen=True)
class FilterModel:
    """Immutable specification of one filtering problem.

    Parameters
    ----------
    dim_x, dim_y : int
        State and observation dimensions.
    drift : ndarray or callable
        Either a (dim_x, dim_x) drift matrix or a function ``f(x, theta)``
        mapping states to drift values.  Functions must broadcast over the
        particle axis, i.e. accept ``x`` of shape (dim_x,) or (dim_x, N).
    obs_matrix : ndarray
        (dim_y, dim_x) observation operator C.
    sig_noise_sqrt, obs_noise_sqrt : ndarray
        Symmetric square roots of the signal / observation noise
        covariances.  The observation one must be invertible.
    init_mean, init_cov : ndarray
        Gaussian initial law of the state.
    geometry : {"grid", "ring", None}
        State-space geometry used to build localization distances.
    theta : float or ndarray, optional
        Parameter value fed to a functional drift.
    """

    dim_x: int
    dim_y: int
    drift: Union[np.ndarray, DriftFn]
    obs_matrix: np.ndarray
    sig_noise_sqrt: np.ndarray
    obs_noise_sqrt: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    geometry: Optional[str] = None
    theta: Union[float, np.ndarray, None] = None

    def __post_init__(self) -> None:
        if self.dim_x < 1 or self.dim_y < 1:
            raise ValueError("dim_x and dim_y must be positive")
        if self.obs_matrix.shape != (self.dim_y, self.dim_x):
            raise ValueError(
                f"obs_matrix shape {self.obs_matrix.shape} != ({self.dim_y}, {self.dim_x})"
            )
        _check_symmetric("sig_noise_sqrt", self.sig_noise_sqrt)
        _check_symmetric("obs_noise_sqrt", self.obs_noise_sqrt)
        if self.sig_noise_sqrt.shape[0] != self.dim_x:
            raise ValueError("sig_noise_sqrt dimension mismatch")
        if self.obs_noise_sqrt.shape[0] != self.dim_y:
            raise ValueError("obs_noise_sqrt dimension mismatch")
        _check_symmetric("init_cov", self.init_cov)
        if self.init_cov.shape[0] != self.dim_x or self.init_mean.shape != (self.dim_x,):
            raise ValueError("initial law dimension mismatch")
        w = np.linalg.eigvalsh(self.init_cov)
        if w.min() < -1e-8:
            raise ValueError(f"init_cov must be PSD (min eig {w.min():.3e})")
        if self.is_linear and self.drift.shape != (self.dim_x, self.dim_x):
            raise ValueError("drift matrix dimension mismatch")
        if self.geometry not in (None, "grid", "ring"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.geometry == "grid":
            k = math.isqrt(self.dim_x)
            if k * k != self.dim_x:
                raise ValueError("grid geometry requires dim_x to be a perfect square")
        # Fails here if obs_noise_sqrt is singular.
        try:
            np.linalg.inv(self.obs_noise_sqrt)
        except np.linalg.LinAlgError as exc:
            raise ValueError("obs_noise_sqrt must be invertible") from exc

    @property
    def is_linear(self) -> bool:
        return isinstance(self.drift, np.ndarray)

    @cached_property
    def sig_noise_cov(self) -> np.ndarray:
        return self.sig_noise_sqrt @ self.sig_noise_sqrt

    @cached_property
    def obs_noise_cov(self) -> np.ndarray:
        return self.obs_noise_sqrt @ self.obs_noise_sqrt

    @cached_property
    def obs_noise_inv(self) -> np.ndarray:
        return np.linalg.inv(self.obs_noise_cov)

    @cached_property
    def obs_gain_map(self) -> np.ndarray:
        """C^T R2^{-1}, the fixed right factor of every Kalman gain."""
        return self.obs_matrix.T @ self.obs_noise_inv

    @cached_property
    def obs_info(self) -> np.ndarray:
        """C^T R2^{-1} C, the observational information matrix."""
        return self.obs_gain_map @ self.obs_matrix

    @cached_property
    def init_cov_sqrt(self) -> np.ndarray:
        return _psd_sqrt(self.init_cov, "init_cov")

    # Scalar shortcuts for operators proportional to the identity; the step
    # loops replace the corresponding matmuls with scalar multiplies.
    @cached_property
    def obs_scalar(self) -> Optional[float]:
        return _identity_scale(self.obs_matrix) if self.dim_x == self.dim_y else None

    @cached_property
    def sig_sqrt_scalar(self) -> Optional[float]:
        return _identity_scale(self.sig_noise_sqrt)

    @cached_property
    def obs_sqrt_scalar(self) -> Optional[float]:
        return _identity_scale(self.obs_noise_sqrt)

    @cached_property
    def gain_map_scalar(self) -> Optional[float]:
        return _identity_scale(self.obs_gain_map) if self.dim_x == self.dim_y else None

    def drift_apply(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the drift at one state vector or a (dim_x, N) block."""
        if self.is_linear:
            return self.drift @ x
        return self.drift(x, self.theta)

    def with_theta(self, theta: Union[float, np.ndarray]) -> "FilterModel":
        """Copy of the model with a new drift parameter."""
        return replace(self, theta=theta)

    def sample_initial(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n i.i.d. initial states as a (dim_x, n) column block."""
        z = rng.standard_normal((self.dim_x, n))
        return self.init_mean[:, None] + self.init_cov_sqrt @ z


@dataclass(frozen=True)
class SignalPath:
    """Signal trajectory on the level-l grid, values at times k * 2**-level."""

    level: int
    values: np.ndarray  # (n_steps + 1, dim_x)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1


@dataclass(frozen=True)
class ObservationPath:
    """Observation increments on the level-l grid.

    Entry k holds Y_{(k+1)D} - Y_{kD} with D = 2**-level.  Coarser paths are
    exact pairwise sums of finer ones, never re-simulated.
    """

    level: int
    increments: np.ndarray  # (n_increments, dim_y)

    @property
    def n_increments(self) -> int:
        return self.increments.shape[0]

    @property
    def duration(self) -> float:
        return self.n_increments * 2.0 ** (-self.level)

    def coarsen(self) -> "ObservationPath":
        """One level down: sum adjacent increment pairs (exact)."""
        if self.level < 1:
            raise ValueError("cannot coarsen below level 0")
        if self.n_increments % 2:
            raise ValueError("odd number of increments cannot be paired")
        merged = self.increments.reshape(-1, 2, self.increments.shape[1]).sum(axis=1)
        return ObservationPath(self.level - 1, merged)

    def coarsen_to(self, level: int) -> "ObservationPath":
        if level > self.level:
            raise ValueError(f"cannot refine observations from level {self.level} to {level}")
        path = self
        while path.level > level:
            path = path.coarsen()
        return path

    def window(self, t_start: int, t_end: int) -> "ObservationPath":
        """Sub-path covering the integer time window [t_start, t_end]."""
        per_unit = 2 ** self.level
        if not (0 <= t_start < t_end and t_end * per_unit <= self.n_increments):
            raise ValueError(f"window [{t_start}, {t_end}] outside the available path")
        return ObservationPath(
            self.level, self.increments[t_start * per_unit : t_end * per_unit]
        )


def grid_index(i: int, j: int, k: int) -> int:
    """Component index of the grid node at row i, column j."""
    return i * k + j


def grid_coords(d: int, k: int) -> tuple[int, int]:
    """Inverse of :func:`grid_index`."""
    return d // k, d % k


def build_grid_model(
    k: int,
    interaction_radius: float = 1.5,
    drift_scale: float = 0.1,
    stabilizer: float = 0.5,
    obs_scale: float = 1.0,
    sigma1: float = 1.0,
    sigma2: float = 1.0,
    init_mean: float = 0.0,
    init_cov: float = 1.0,
) -> FilterModel:
    """Linear-Gaussian model on a uniform k x k grid.

    Components p and q interact only when their grid nodes are within
    ``interaction_radius`` in the Euclidean metric.  Off-diagonal entries of
    the drift are ``drift_scale``; diagonals are set to
    ``-(row degree) * drift_scale - stabilizer`` so the drift is strictly
    diagonally dominant with a negative diagonal, which keeps the filter
    stable and the Riccati flow convergent.  C, R1 and R2 are multiples of
    the identity.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    if interaction_radius <= 0:
        raise ValueError("interaction_radius must be positive")
    dim = k * k
    coords = np.array([grid_coords(d, k) for d in range(dim)], dtype=float)
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    neighbor = (dist <= interaction_radius) & ~np.eye(dim, dtype=bool)
    a = np.where(neighbor, drift_scale, 0.0)
    degree = neighbor.sum(axis=1)
    a[np.diag_indices(dim)] = -degree * drift_scale - stabilizer
    return FilterModel(
        dim_x=dim,
        dim_y=dim,
        drift=a,
        obs_matrix=obs_scale * np.eye(dim),
        sig_noise_sqrt=sigma1 * np.eye(dim),
        obs_noise_sqrt=sigma2 * np.eye(dim),
        init_mean=np.full(dim, float(init_mean)),
        init_cov=init_cov * np.eye(dim),
        geometry="grid",
    )


def build_linear_model(
    dim_x: int = 1,
    drift_scale: float = -0.5,
    obs_scale: float = 1.0,
    sigma1: float = 1.0,
    sigma2: float = 1.0,
    init_mean: float = 1.0,
    init_cov: float = 1.0,
) -> FilterModel:
    """Diagonal Ornstein-Uhlenbeck model, the 1-d case when dim_x == 1."""
    if dim_x < 1:
        raise ValueError("dim_x must be positive")
    eye = np.eye(dim_x)
    return FilterModel(
        dim_x=dim_x,
        dim_y=dim_x,
        drift=drift_scale * eye,
        obs_matrix=obs_scale * eye,
        sig_noise_sqrt=sigma1 * eye,
        obs_noise_sqrt=sigma2 * eye,
        init_mean=np.full(dim_x, float(init_mean)),
        init_cov=init_cov * eye,
        geometry=None,
    )


_L96_STENCILS: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _l96_stencil(dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cached = _L96_STENCILS.get(dim)
    if cached is None:
        idx = np.arange(dim)
        cached = ((idx + 1) % dim, (idx - 1) % dim, (idx - 2) % dim)
        _L96_STENCILS[dim] = cached
    return cached


def lorenz96_drift(x: np.ndarray, theta: Union[float, np.ndarray, None]) -> np.ndarray:
    """Cyclic Lorenz 96 drift f_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + theta.

    Indices wrap around the ring; works on (dim_x,) vectors and
    (dim_x, N) particle blocks alike.
    """
    if x.shape[0] < 4:
        raise ValueError("Lorenz 96 needs dim_x >= 4, the advection stencil overlaps otherwise")
    if theta is None:
        raise ValueError("Lorenz 96 drift needs a forcing parameter")
    ip1, im1, im2 = _l96_stencil(x.shape[0])
    return (x[ip1] - x[im2]) * x[im1] - x + theta


def build_lorenz96_model(
    dim_x: int = 40,
    theta: float = 8.0,
    sigma1: float = math.sqrt(2.0),
    sigma2: float = 0.5,
    obs_scale: float = 1.0,
    init_mean: float = 8.0,
    init_perturb: float = 0.01,
    init_cov: float = 0.0,
) -> FilterModel:
    """Stochastic Lorenz 96 model, fully observed on a ring.

    The default initial mean is the resting state with a small bump on the
    first coordinate; init_cov == 0 gives a deterministic start.
    """
    if dim_x < 4:
        raise ValueError("Lorenz 96 needs dim_x >= 4")
    m0 = np.full(dim_x, float(init_mean))
    m0[0] += init_perturb
    eye = np.eye(dim_x)
    return FilterModel(
        dim_x=dim_x,
        dim_y=dim_x,
        drift=lorenz96_drift,
        obs_matrix=obs_scale * eye,
        sig_noise_sqrt=sigma1 * eye,
        obs_noise_sqrt=sigma2 * eye,
        init_mean=m0,
        init_cov=init_cov * eye,
        geometry="ring",
        theta=theta,
    )


def simulate_truth(
    model: FilterModel,
    theta: Union[float, np.ndarray, None],
    level: int,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[SignalPath, ObservationPath]:
    """Jointly simulate signal and observation paths on the level grid.

    Euler-Maruyama on both equations: per step of size D = 2**-level the
    signal gains drift(X) * D plus a Gaussian increment of covariance R1 * D,
    and the stored observation increment is C X * D plus Gaussian noise of
    covariance R2 * D (left-endpoint evaluation).  The draw order is fixed:
    initial state, then all signal increments, then all observation noises.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    mdl = model if theta is None else model.with_theta(theta)
    delta = 2.0 ** (-level)
    n_steps = horizon * 2 ** level
    x0 = mdl.init_mean + mdl.init_cov_sqrt @ rng.standard_normal(mdl.dim_x)
    dw = math.sqrt(delta) * rng.standard_normal((n_steps, mdl.dim_x))
    dv = math.sqrt(delta) * rng.standard_normal((n_steps, mdl.dim_y))
    xs = np.empty((n_steps + 1, mdl.dim_x))
    xs[0] = x0
    sig_sqrt = mdl.sig_noise_sqrt
    for k in range(n_steps):
        xs[k + 1] = xs[k] + mdl.drift_apply(xs[k]) * delta + sig_sqrt @ dw[k]
    dy = xs[:-1] @ mdl.obs_matrix.T * delta + dv @ mdl.obs_noise_sqrt.T
    return SignalPath(level, xs), ObservationPath(level, dy)
