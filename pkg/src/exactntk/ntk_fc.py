"""Exact NTK of a fully-connected ReLU network (no biases, NTK parameterisation)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel_regression import KernelMatrix
from .relu_kernels import C_SIGMA, arccos_moments


@dataclass(frozen=True)
class FcKernelTrace:
    """Per-layer values of the covariance recursion for one input pair.

    ``sigmas[h]`` is the cross covariance at layer ``h`` (0..L);
    ``sigma_dots[h-1]`` is the derivative covariance at layer ``h`` (1..L+1),
    with the last entry fixed to 1.
    """

    depth: int
    sigmas: tuple[float, ...]
    sigma_dots: tuple[float, ...]
    sigmas_xx: tuple[float, ...]
    sigmas_yy: tuple[float, ...]
    theta: float


def _as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("input must have at least one dimension")
    return x


def ntk_pair(x, y, depth: int) -> FcKernelTrace:
    x, y = _as_vector(x), _as_vector(y)
    if x.shape != y.shape:
        raise ValueError(f"input dimensions differ: {x.size} vs {y.size}")
    if depth < 0:
        raise ValueError("depth must be nonnegative")
    sxx, sxy, syy = float(x @ x), float(x @ y), float(y @ y)
    sigmas, dots, xx, yy = [sxy], [], [sxx], [syy]
    for _ in range(depth):
        t, tdot = arccos_moments(sxx, sxy, syy)
        txx, _ = arccos_moments(sxx, sxx, sxx)
        tyy, _ = arccos_moments(syy, syy, syy)
        sxy, sxx, syy = C_SIGMA * float(t), C_SIGMA * float(txx), C_SIGMA * float(tyy)
        sigmas.append(sxy)
        dots.append(C_SIGMA * float(tdot))
        xx.append(sxx)
        yy.append(syy)
    dots.append(1.0)
    theta = 0.0
    for h in range(1, depth + 2):
        theta += sigmas[h - 1] * float(np.prod(dots[h - 1:]))
    return FcKernelTrace(depth, tuple(sigmas), tuple(dots), tuple(xx), tuple(yy), theta)


def ntk_cross(X, Y, depth: int, diag_x=None, diag_y=None) -> np.ndarray:
    """Theta between every row of ``X`` and every row of ``Y`` (vectorised recursion).

    ``diag_x``/``diag_y`` optionally carry the per-input variance streams
    (shape ``(depth + 1, n)``) so they are computed once per input.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[1] != Y.shape[1] or X.shape[1] == 0:
        raise ValueError(f"input dimensions differ or are empty: {X.shape} vs {Y.shape}")
    if diag_x is None:
        diag_x = variance_stream(X, depth)
    if diag_y is None:
        diag_y = variance_stream(Y, depth)
    sigma = X @ Y.T
    theta = sigma.copy()
    for h in range(1, depth + 1):
        t, tdot = arccos_moments(diag_x[h - 1][:, None], sigma, diag_y[h - 1][None, :])
        sigma = C_SIGMA * t
        # Horner form of sum_h Sigma^(h-1) prod_{h'>=h} Sigma_dot^(h')
        theta = theta * (C_SIGMA * tdot) + sigma
    return theta


def variance_stream(X, depth: int) -> np.ndarray:
    """``Sigma^(h)(x, x)`` for h = 0..depth, one column per input row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    out = np.empty((depth + 1, X.shape[0]))
    out[0] = np.einsum("ij,ij->i", X, X)
    for h in range(1, depth + 1):
        t, _ = arccos_moments(out[h - 1], out[h - 1], out[h - 1])
        out[h] = C_SIGMA * t
    return out


def ntk_matrix(inputs, depth: int) -> KernelMatrix:
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one input")
    diag = variance_stream(X, depth)
    H = ntk_cross(X, X, depth, diag, diag)
    iu = np.triu_indices(X.shape[0], 1)
    H[iu[1], iu[0]] = H[iu]
    return KernelMatrix(H, kind="fc-ntk", depth=depth)
