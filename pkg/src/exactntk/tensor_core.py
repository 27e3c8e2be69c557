"""Image and 4th-order patch tensors, and the trace-over-patches primitives.

Images are float64 arrays of shape ``(P, Q, C)``.  A patch kernel tensor is a
float64 array of shape ``(P, Q, P, Q)`` indexed ``[i, j, i', j']``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PatchGeometry:
    """Square filter of odd side ``q``, stride 1, zero padding."""

    q: int = 3

    def __post_init__(self):
        if not isinstance(self.q, (int, np.integer)) or self.q < 1 or self.q % 2 == 0:
            raise ValueError(f"filter size must be an odd positive integer, got {self.q!r}")

    @property
    def radius(self) -> int:
        return (self.q - 1) // 2

    def offsets(self):
        r = self.radius
        for a in range(-r, r + 1):
            for b in range(-r, r + 1):
                yield a, b


def as_image(x) -> np.ndarray:
    """Coerce to a ``(P, Q, C)`` float64 image; 2-D input gets a single channel."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ValueError(f"expected a (P, Q, C) image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return arr


def _check_patch_tensor(T: np.ndarray) -> tuple[int, int]:
    if T.ndim != 4 or T.shape[:2] != T.shape[2:]:
        raise ValueError(f"expected a (P, Q, P, Q) tensor, got shape {T.shape}")
    return T.shape[0], T.shape[1]


def _window(n: int, shift: int) -> slice:
    # output indices i with 0 <= i + shift < n
    return slice(max(0, -shift), min(n, n - shift))


def trace_over_patches(T: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Sum ``T[i+a, j+b, i'+a, j'+b]`` over filter offsets ``(a, b)``.

    Out-of-range indices contribute zero.  No ``c_sigma / q**2`` factor is
    applied here.
    """
    T = np.asarray(T, dtype=np.float64)
    P, Q = _check_patch_tensor(T)
    out = np.zeros_like(T)
    for a, b in geom.offsets():
        si, sj = _window(P, a), _window(Q, b)
        ti = slice(si.start + a, si.stop + a)
        tj = slice(sj.start + b, sj.stop + b)
        out[si, sj, si, sj] += T[ti, tj, ti, tj]
    return out


def trace_over_patches_diag(d: np.ndarray, geom: PatchGeometry) -> np.ndarray:
    """Diagonal-only version: ``out[i, j] = sum_ab d[i+a, j+b]`` with zero padding.

    Equals the ``[i, j, i, j]`` entries of :func:`trace_over_patches` applied to
    any tensor whose ``[i, j, i, j]`` entries are ``d``.
    """
    d = np.asarray(d, dtype=np.float64)
    P, Q = d.shape
    out = np.zeros_like(d)
    for a, b in geom.offsets():
        si, sj = _window(P, a), _window(Q, b)
        out[si, sj] += d[si.start + a:si.stop + a, sj.start + b:sj.stop + b]
    return out


def patch_inner_sum(x, y, geom: PatchGeometry) -> np.ndarray:
    """Layer-0 covariance: sum over channels and offsets of ``x[i+a, j+b] * y[i'+a, j'+b]``."""
    x, y = as_image(x), as_image(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    outer = np.einsum("ijc,klc->ijkl", x, y)
    return trace_over_patches(outer, geom)


def patch_energy(x, geom: PatchGeometry) -> np.ndarray:
    """``[i, j, i, j]`` entries of ``patch_inner_sum(x, x)`` as a ``(P, Q)`` array."""
    x = as_image(x)
    return trace_over_patches_diag(np.sum(x * x, axis=2), geom)


def trace_diag(T: np.ndarray) -> float:
    """``sum_{i,j} T[i, j, i, j]``."""
    P, Q = _check_patch_tensor(T)
    return float(np.einsum("ijij->", T))


def mean_all(T: np.ndarray) -> float:
    P, Q = _check_patch_tensor(T)
    return float(T.sum() / (P * P * Q * Q))


def identity_tensor(P: int, Q: int) -> np.ndarray:
    T = np.zeros((P, Q, P, Q))
    for i in range(P):
        for j in range(Q):
            T[i, j, i, j] = 1.0
    return T
