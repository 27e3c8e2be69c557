"""Gaussian expectations of ReLU and its derivative.

For ``(u, v) ~ N(0, [[s11, s12], [s12, s22]])`` this module evaluates

    t    = E[relu(u) relu(v)]
    tdot = E[1{u > 0} 1{v > 0}]

in closed form (the degree-1 / degree-0 arc-cosine kernels), plus two
independent reference routes used only by the tests and oracles: a seeded
Monte Carlo estimate and 1-D adaptive quadrature.  None of these include the
``C_SIGMA`` factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate, special

#: ``1 / E[relu(z)**2]`` for ``z ~ N(0, 1)``.
C_SIGMA = 2.0

_PSD_SLACK = 1e-12


@dataclass(frozen=True)
class Cov2:
    """Symmetric 2x2 covariance ``[[s11, s12], [s12, s22]]``."""

    s11: float
    s12: float
    s22: float

    def __post_init__(self):
        vals = (self.s11, self.s12, self.s22)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite covariance entries {vals}")
        slack = _PSD_SLACK * max(self.s11, self.s22, 0.0)
        if self.s11 < -slack or self.s22 < -slack:
            raise ValueError(f"negative variance in {vals}")
        if self.s12 * self.s12 > self.s11 * self.s22 + slack * max(self.s11, self.s22, 1.0):
            raise ValueError(f"covariance is not positive semidefinite: {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])


class ReluExpectationPair(NamedTuple):
    t: float
    tdot: float


class McReluEstimate(NamedTuple):
    t: float
    tdot: float
    t_stderr: float
    tdot_stderr: float


def arccos_moments(s11, s12, s22):
    """Vectorised closed form; returns ``(t, tdot)`` broadcast over the inputs.

    Works on the normalised correlation and rescales by the marginal standard
    deviations, so it is valid for any diagonal.  When either variance is zero
    the correlation is taken to be 0 (giving ``t = 0``, ``tdot = 1/4``).
    """
    s11 = np.asarray(s11, dtype=np.float64)
    s12 = np.asarray(s12, dtype=np.float64)
    s22 = np.asarray(s22, dtype=np.float64)
    scale = np.sqrt(np.maximum(s11, 0.0)) * np.sqrt(np.maximum(s22, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(scale > 0, s12 / np.where(scale > 0, scale, 1.0), 0.0)
    lam = np.clip(lam, -1.0, 1.0)
    angle = np.pi - np.arccos(lam)
    t = scale * (lam * angle + np.sqrt(1.0 - lam * lam)) / (2.0 * np.pi)
    tdot = angle / (2.0 * np.pi)
    return t, tdot


def relu_expectations(cov: Cov2) -> ReluExpectationPair:
    t, tdot = arccos_moments(cov.s11, cov.s12, cov.s22)
    return ReluExpectationPair(float(t), float(tdot))


def _cholesky2(cov: Cov2) -> tuple[float, float, float]:
    a = math.sqrt(max(cov.s11, 0.0))
    b = cov.s12 / a if a > 0 else 0.0
    c = math.sqrt(max(cov.s22 - b * b, 0.0))
    return a, b, c


def mc_relu_expectations(cov: Cov2, samples: int, seed: int,
                         chunk: int = 1_000_000) -> McReluEstimate:
    """Monte Carlo estimate of the same expectations, deterministic given ``seed``."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    a, b, c = _cholesky2(cov)
    rng = np.random.default_rng(seed)
    sums = np.zeros(4)
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        z = rng.standard_normal((m, 2))
        u = a * z[:, 0]
        v = b * z[:, 0] + c * z[:, 1]
        prod = np.maximum(u, 0.0) * np.maximum(v, 0.0)
        ind = ((u > 0) & (v > 0)).astype(np.float64)
        sums += (prod.sum(), (prod * prod).sum(), ind.sum(), ind.sum())
        done += m
    t = sums[0] / samples
    tdot = sums[2] / samples
    denom = max(samples - 1, 1)
    t_var = max(sums[1] / samples - t * t, 0.0) * samples / denom
    tdot_var = max(tdot - tdot * tdot, 0.0) * samples / denom
    return McReluEstimate(t, tdot, math.sqrt(t_var / samples), math.sqrt(tdot_var / samples))


def mc_arccos_moments(s11, s12, s22, z: np.ndarray):
    """Monte Carlo expectations for many covariances sharing one batch of draws.

    ``z`` has shape ``(S, 2)`` of standard normals; each covariance gets its own
    2x2 Cholesky factor applied to the same draws.  Returns ``(t, tdot)`` with the
    broadcast shape of the inputs.
    """
    s11 = np.asarray(s11, dtype=np.float64)
    s12 = np.asarray(s12, dtype=np.float64)
    s22 = np.asarray(s22, dtype=np.float64)
    shape = np.broadcast(s11, s12, s22).shape
    s11, s12, s22 = (np.broadcast_to(s, shape).ravel() for s in (s11, s12, s22))
    a = np.sqrt(np.maximum(s11, 0.0))
    b = np.divide(s12, a, out=np.zeros_like(s12), where=a > 0)
    c = np.sqrt(np.maximum(s22 - b * b, 0.0))
    t = np.empty(s11.size)
    tdot = np.empty(s11.size)
    z0, z1 = z[:, 0], z[:, 1]
    step = max(1, 4_000_000 // max(len(z0), 1))
    for lo in range(0, s11.size, step):
        hi = min(lo + step, s11.size)
        u = np.outer(a[lo:hi], z0)
        v = np.outer(b[lo:hi], z0) + np.outer(c[lo:hi], z1)
        t[lo:hi] = (np.maximum(u, 0.0) * np.maximum(v, 0.0)).mean(axis=1)
        tdot[lo:hi] = ((u > 0) & (v > 0)).mean(axis=1)
    # zero-variance convention of the closed form
    tdot[(s11 <= 0) | (s22 <= 0)] = 0.25
    return t.reshape(shape), tdot.reshape(shape)


def _relu_mean(mu, s):
    # E[relu(N(mu, s^2))]
    if s <= 0.0:
        return max(mu, 0.0)
    r = mu / s
    return mu * special.ndtr(r) + s * math.exp(-0.5 * r * r) / math.sqrt(2.0 * math.pi)


def quad_relu_expectations(cov: Cov2) -> ReluExpectationPair:
    """Reference route: integrate the conditional expectation of ``v`` given ``u``.

    Works directly on the unnormalised covariance; shares no code with the
    closed form.
    """
    s11, s12, s22 = cov.s11, cov.s12, cov.s22
    if s11 <= 0.0 or s22 <= 0.0:
        # same zero-variance convention as the closed form
        return ReluExpectationPair(0.0, 0.25)
    sd_u = math.sqrt(s11)
    k = s12 / s11
    resid = max(s22 - k * s12, 0.0)
    if resid <= 1e-15 * max(s22, 1e-300):
        # v = k u almost surely
        if k > 0:
            return ReluExpectationPair(k * s11 / 2.0, 0.5)
        return ReluExpectationPair(0.0, 0.0)
    s = math.sqrt(resid)

    def dens(u):
        return math.exp(-0.5 * (u / sd_u) ** 2) / (sd_u * math.sqrt(2.0 * math.pi))

    upper = 12.0 * sd_u
    opts = dict(epsabs=1e-15, epsrel=1e-13, limit=500)
    t, _ = integrate.quad(lambda u: u * _relu_mean(k * u, s) * dens(u), 0.0, upper, **opts)
    tdot, _ = integrate.quad(lambda u: special.ndtr(k * u / s) * dens(u), 0.0, upper, **opts)
    return ReluExpectationPair(t, tdot)
