"""Compiled inner-loop kernels for the ensemble steppers.

The filter engines dispatch to these when the model has identity-proportional
observation and noise operators (all the shipped model families) and the
drift is either a matrix or the cyclic Lorenz 96 stencil.  The arithmetic
mirrors the numpy path operation for operation; random increments are always
drawn outside with numpy, so stream contracts do not depend on numba.
Import failures leave ``HAVE_NUMBA`` false and everything falls back to the
numpy implementation.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore
        def wrap(fn):
            return fn

        return wrap if not args or not callable(args[0]) else args[0]


@njit(cache=True)
def moments(particles):
    d, n = particles.shape
    mean = np.zeros(d)
    for j in range(n):
        for i in range(d):
            mean[i] += particles[i, j]
    mean *= 1.0 / n
    centered = np.empty((d, n))
    for i in range(d):
        for j in range(n):
            centered[i, j] = particles[i, j] - mean[i]
    cov = np.dot(centered, centered.T)
    cov *= 1.0 / (n - 1)
    return mean, cov


@njit(cache=True)
def _l96_drift(particles, theta):
    d, n = particles.shape
    out = np.empty((d, n))
    for i in range(d):
        ip1 = i + 1 if i + 1 < d else i + 1 - d
        im1 = i - 1 if i - 1 >= 0 else i - 1 + d
        im2 = i - 2 if i - 2 >= 0 else i - 2 + d
        for j in range(n):
            out[i, j] = (particles[ip1, j] - particles[im2, j]) * particles[im1, j] \
                - particles[i, j] + theta
    return out


@njit(cache=True)
def _combine_vanilla(particles, drift, gain_cov, dy, delta, dw, dv, s1, s2, c, g):
    d, n = particles.shape
    innov = np.empty((d, n))
    for i in range(d):
        for j in range(n):
            innov[i, j] = dy[i] - c * particles[i, j] * delta - s2 * dv[i, j]
    corr = np.dot(gain_cov, innov)
    out = np.empty((d, n))
    for i in range(d):
        for j in range(n):
            out[i, j] = particles[i, j] + drift[i, j] * delta + s1 * dw[i, j] \
                + g * corr[i, j]
    return out


@njit(cache=True)
def _combine_deterministic(particles, drift, mean, gain_cov, dy, delta, dw, s1, c, g):
    d, n = particles.shape
    innov = np.empty((d, n))
    for i in range(d):
        for j in range(n):
            innov[i, j] = dy[i] - c * 0.5 * (particles[i, j] + mean[i]) * delta
    corr = np.dot(gain_cov, innov)
    out = np.empty((d, n))
    for i in range(d):
        for j in range(n):
            out[i, j] = particles[i, j] + drift[i, j] * delta + s1 * dw[i, j] \
                + g * corr[i, j]
    return out


@njit(cache=True)
def step_vanilla_linear(particles, a, gain_cov, dy, delta, dw, dv, s1, s2, c, g):
    drift = np.dot(a, particles)
    return _combine_vanilla(particles, drift, gain_cov, dy, delta, dw, dv, s1, s2, c, g)


@njit(cache=True)
def step_vanilla_l96(particles, theta, gain_cov, dy, delta, dw, dv, s1, s2, c, g):
    drift = _l96_drift(particles, theta)
    return _combine_vanilla(particles, drift, gain_cov, dy, delta, dw, dv, s1, s2, c, g)


@njit(cache=True)
def step_deterministic_linear(particles, a, mean, gain_cov, dy, delta, dw, s1, c, g):
    drift = np.dot(a, particles)
    return _combine_deterministic(particles, drift, mean, gain_cov, dy, delta, dw, s1, c, g)


@njit(cache=True)
def step_deterministic_l96(particles, theta, mean, gain_cov, dy, delta, dw, s1, c, g):
    drift = _l96_drift(particles, theta)
    return _combine_deterministic(particles, drift, mean, gain_cov, dy, delta, dw, s1, c, g)
