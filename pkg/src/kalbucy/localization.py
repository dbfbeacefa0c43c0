"""Covariance localization: taper functions, distances, Schur products."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .models import grid_coords

logger = logging.getLogger(__name__)

TAPER_KINDS = ("uniform", "triangular", "gaspari_cohn")

_NEG_EIG_TOL = -1e-8


@dataclass(frozen=True)
class TaperSpec:
    """A taper family and its localization radius.

    All tapers are supported on [0, r): they equal 1 at distance 0 and
    vanish for distances >= r.
    """

    kind: str
    radius: float

    def __post_init__(self) -> None:
        if self.kind not in TAPER_KINDS:
            raise ValueError(f"unknown taper kind {self.kind!r}, expected one of {TAPER_KINDS}")
        if self.radius <= 0:
            raise ValueError("taper radius must be positive")


@dataclass(frozen=True)
class TaperMatrix:
    """Precomputed localization weights, applied by entrywise product.

    ``is_psd`` records a one-time numerical check of the weight matrix; when
    it fails, every localized covariance is additionally screened for loss
    of positive semi-definiteness (hard-cutoff tapers can break it).
    """

    weights: np.ndarray
    is_psd: bool = True

    def __post_init__(self) -> None:
        w = self.weights
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("taper weights must be square")
        if not np.array_equal(w, w.T):
            raise ValueError("taper weights must be symmetric")
        if not np.all(np.diag(w) == 1.0):
            raise ValueError("taper weights must have a unit diagonal")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("taper weights must lie in [0, 1]")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


def taper_value(
    spec: TaperSpec, d: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """Evaluate the taper at distance(s) d >= 0.

    With u = d / r: the uniform taper is the indicator of u < 1, the
    triangular one is max(1 - u, 0), and the Gaspari-Cohn one is the
    classical fifth-order piecewise-rational correlation function with
    half-width r/2 (branch change at u = 1/2, support [0, r)).
    """
    arr = np.asarray(d, dtype=float)
    if np.any(arr < 0):
        raise ValueError("distances must be nonnegative")
    u = arr / spec.radius
    if spec.kind == "uniform":
        out = np.where(u < 1.0, 1.0, 0.0)
    elif spec.kind == "triangular":
        out = np.clip(1.0 - u, 0.0, None)
    else:
        out = _gaspari_cohn(u)
    if np.isscalar(d) or arr.ndim == 0:
        return float(out)
    return out


def _gaspari_cohn(u: np.ndarray) -> np.ndarray:
    # w = d / c with half-width c = r/2, so w = 2u on the support; values
    # beyond the support are clamped before the polynomials to avoid
    # spurious overflow and then masked to zero.
    w = np.minimum(2.0 * u, 2.0)
    inner = (
        1.0
        - (5.0 / 3.0) * w ** 2
        + (5.0 / 8.0) * w ** 3
        + 0.5 * w ** 4
        - 0.25 * w ** 5
    )
    outer = (
        4.0
        - 5.0 * w
        + (5.0 / 3.0) * w ** 2
        + (5.0 / 8.0) * w ** 3
        - 0.5 * w ** 4
        + (1.0 / 12.0) * w ** 5
        - (2.0 / 3.0) / np.where(w > 0, w, 1.0)
    )
    out = np.where(u < 0.5, inner, np.where(u < 1.0, outer, 0.0))
    return np.clip(out, 0.0, 1.0)


def distance_matrix(geometry: Optional[str], dim_x: int) -> np.ndarray:
    """Pairwise distances between state components.

    "grid": Euclidean distance between the 2-D grid nodes (dim_x = k^2).
    "ring": circular distance min(|i-j|, dim_x - |i-j|).
    """
    if geometry == "grid":
        k = math.isqrt(dim_x)
        if k * k != dim_x:
            raise ValueError(f"grid geometry needs a square dim_x, got {dim_x}")
        coords = np.array([grid_coords(d, k) for d in range(dim_x)], dtype=float)
        diff = coords[:, None, :] - coords[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=2))
    if geometry == "ring":
        idx = np.arange(dim_x)
        gap = np.abs(idx[:, None] - idx[None, :])
        return np.minimum(gap, dim_x - gap).astype(float)
    raise ValueError(f"no distance rule for geometry {geometry!r}")


def build_taper(spec: TaperSpec, distances: np.ndarray) -> TaperMatrix:
    """Taper matrix with weights_ij = taper(spec, distances_ij).

    The result is checked once for positive semi-definiteness; by the Schur
    product theorem a PSD taper keeps every localized covariance PSD.
    """
    if distances.ndim != 2 or distances.shape[0] != distances.shape[1]:
        raise ValueError("distance matrix must be square")
    if not np.allclose(distances, distances.T):
        raise ValueError("distance matrix must be symmetric")
    if np.any(np.diag(distances) != 0.0):
        raise ValueError("distance matrix must have a zero diagonal")
    weights = np.asarray(taper_value(spec, distances))
    weights = (weights + weights.T) / 2.0
    np.fill_diagonal(weights, 1.0)
    psd = bool(np.linalg.eigvalsh(weights).min() >= _NEG_EIG_TOL)
    if not psd:
        logger.warning(
            "taper matrix (kind=%s, r=%g) is not PSD; localized covariances will be screened",
            spec.kind,
            spec.radius,
        )
    return TaperMatrix(weights=weights, is_psd=psd)


def localize(cov: np.ndarray, taper: TaperMatrix) -> np.ndarray:
    """Schur (entrywise) product of a covariance with the taper weights.

    Preserves symmetry and the diagonal exactly.  For non-PSD tapers the
    result is screened and a warning logged if it has lost PSD-ness.
    """
    if cov.shape != taper.weights.shape:
        raise ValueError(f"covariance shape {cov.shape} != taper shape {taper.weights.shape}")
    out = cov * taper.weights
    if not taper.is_psd:
        w_min = np.linalg.eigvalsh(out).min()
        if w_min < _NEG_EIG_TOL:
            logger.warning("localized covariance lost PSD-ness (min eig %.3e)", w_min)
    return out


def taper_for_model(spec: TaperSpec, geometry: Optional[str], dim_x: int) -> TaperMatrix:
    """Convenience: distances from the model geometry, then the taper."""
    return build_taper(spec, distance_matrix(geometry, dim_x))
