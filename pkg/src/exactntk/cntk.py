"""Exact convolutional NTK for vanilla CNNs and CNNs with global average pooling.

The recursion runs on ``(P, Q, P, Q)`` tensors for the cross pair ``(x, x')``.
The same-input streams only ever enter through their ``[i, j, i, j]`` entries,
and those entries evolve independently of the off-diagonal ones, so each
input carries a stack of ``(P, Q)`` variance maps that is computed once and
shared across all pairs it takes part in.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from . import parallel
from .kernel_regression import KernelMatrix
from .relu_kernels import C_SIGMA, Cov2, arccos_moments, mc_arccos_moments, quad_relu_expectations
from .tensor_core import (PatchGeometry, as_image, mean_all, patch_energy, patch_inner_sum,
                          trace_diag, trace_over_patches, trace_over_patches_diag)

log = logging.getLogger(__name__)


class Arch(enum.Enum):
    VANILLA = "vanilla"
    GAP = "gap"


@dataclass(frozen=True)
class CntkConfig:
    depth: int
    geom: PatchGeometry = PatchGeometry(3)
    arch: Arch = Arch.VANILLA

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("CNTK needs at least one convolution layer")
        if isinstance(self.arch, str):
            object.__setattr__(self, "arch", Arch(self.arch))
        if self.arch is Arch.GAP and self.depth == 1:
            log.warning("GAP-CNTK with one layer is identically zero: "
                        "the only convolution layer is untrained")

    @property
    def kind(self) -> str:
        return f"cntk-{self.arch.value}"


@dataclass
class CntkPairState:
    """Layer-``h`` state for one pair: variance maps of each input plus the cross tensors."""

    var_x: np.ndarray   # (P, Q): Sigma(x, x)[i, j, i, j]
    var_y: np.ndarray   # (P, Q): Sigma(x', x')[i, j, i, j]
    sigma: np.ndarray   # (P, Q, P, Q): Sigma(x, x')
    theta: np.ndarray   # (P, Q, P, Q)
    layer: int = 0


def variance_maps(x, cfg: CntkConfig) -> np.ndarray:
    """``Sigma^(h)(x, x)[i, j, i, j]`` for h = 0..depth-1, shape ``(depth, P, Q)``."""
    d = patch_energy(x, cfg.geom)
    out = [d]
    scale = C_SIGMA / cfg.geom.q ** 2
    for _ in range(1, cfg.depth):
        t, _ = arccos_moments(d, d, d)
        d = trace_over_patches_diag(scale * t, cfg.geom)
        out.append(d)
    return np.stack(out)


def cntk_layer0(x, y, cfg: CntkConfig, var_x=None, var_y=None) -> CntkPairState:
    x, y = as_image(x), as_image(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    sigma = patch_inner_sum(x, y, cfg.geom)
    theta = sigma.copy() if cfg.arch is Arch.VANILLA else np.zeros_like(sigma)
    vx = patch_energy(x, cfg.geom) if var_x is None else var_x
    vy = patch_energy(y, cfg.geom) if var_y is None else var_y
    return CntkPairState(vx, vy, sigma, theta, 0)


def _expectation_tensors(state: CntkPairState, cfg: CntkConfig):
    # Lambda_{ij,i'j'} = [[var_x[ij], sigma[ij,i'j']], [sigma[ij,i'j'], var_y[i'j']]]
    t, tdot = arccos_moments(state.var_x[:, :, None, None], state.sigma,
                             state.var_y[None, None, :, :])
    scale = C_SIGMA / cfg.geom.q ** 2
    return scale * t, scale * tdot


def _diag_k(var: np.ndarray, cfg: CntkConfig) -> np.ndarray:
    t, _ = arccos_moments(var, var, var)
    return C_SIGMA / cfg.geom.q ** 2 * t


def cntk_step(state: CntkPairState, cfg: CntkConfig, is_last: bool,
              var_x_next=None, var_y_next=None) -> CntkPairState:
    """One layer of the recursion: closed-form expectations, then trace over patches.

    ``var_x_next``/``var_y_next`` are the next layer's variance maps if already
    known (e.g. from :func:`variance_maps`); otherwise they are derived here.
    """
    K, Kdot = _expectation_tensors(state, cfg)
    sigma = trace_over_patches(K, cfg.geom)
    if not is_last:
        theta = trace_over_patches(Kdot * state.theta + K, cfg.geom)
    elif cfg.arch is Arch.VANILLA:
        theta = Kdot * state.theta + K
    else:
        theta = Kdot * state.theta
    if var_x_next is None:
        var_x_next = trace_over_patches_diag(_diag_k(state.var_x, cfg), cfg.geom)
    if var_y_next is None:
        var_y_next = trace_over_patches_diag(_diag_k(state.var_y, cfg), cfg.geom)
    return CntkPairState(var_x_next, var_y_next, sigma, theta, state.layer + 1)


def _readout(theta: np.ndarray, cfg: CntkConfig) -> float:
    return trace_diag(theta) if cfg.arch is Arch.VANILLA else mean_all(theta)


def cntk_pair(x, y, cfg: CntkConfig, maps_x=None, maps_y=None) -> float:
    """CNTK value between two images.

    ``maps_x``/``maps_y`` are optional precomputed :func:`variance_maps`.
    """
    if maps_x is None:
        maps_x = variance_maps(x, cfg)
    if maps_y is None:
        maps_y = variance_maps(y, cfg)
    state = cntk_layer0(x, y, cfg, maps_x[0], maps_y[0])
    for h in range(1, cfg.depth + 1):
        if h == cfg.depth:
            # variance maps past the last layer are never read
            state = cntk_step(state, cfg, True, state.var_x, state.var_y)
        else:
            state = cntk_step(state, cfg, False, maps_x[h], maps_y[h])
    return _readout(state.theta, cfg)


def _stack_images(inputs) -> list[np.ndarray]:
    images = [as_image(x) for x in inputs]
    if images and any(im.shape != images[0].shape for im in images):
        raise ValueError("all images must share one shape")
    return images


def cntk_matrix(inputs, cfg: CntkConfig, threads: int | None = None) -> KernelMatrix:
    images = _stack_images(inputs)
    maps = [variance_maps(im, cfg) for im in images]
    H = parallel.pairwise(lambda i, j: cntk_pair(images[i], images[j], cfg, maps[i], maps[j]),
                          len(images), threads=threads)
    return KernelMatrix(H, kind=cfg.kind, depth=cfg.depth,
                        metadata={"filter_size": cfg.geom.q})


def cntk_cross(test_inputs, train_inputs, cfg: CntkConfig, threads: int | None = None) -> np.ndarray:
    """Kernel rows between each test image and every training image."""
    test = _stack_images(test_inputs)
    train = _stack_images(train_inputs)
    mt = [variance_maps(im, cfg) for im in test]
    mr = [variance_maps(im, cfg) for im in train]
    return parallel.pairwise(lambda i, j: cntk_pair(test[i], train[j], cfg, mt[i], mr[j]),
                             len(test), len(train), threads=threads, symmetric=False)


def cntk_pair_naive(x, y, cfg: CntkConfig, mc_samples: int | None = None, seed: int = 0) -> float:
    """Reference recursion straight from the definition.

    Materialises all three ``Sigma`` streams as full ``(P, Q, P, Q)`` tensors and
    evaluates every ``Lambda_{ij,i'j'}`` on its own, without normalising by the
    diagonal.  Expectations come from 1-D quadrature (``mc_samples=None``) or
    from Monte Carlo with ``mc_samples`` shared draws per layer.
    """
    x, y = as_image(x), as_image(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    g = cfg.geom
    P, Q = x.shape[:2]
    rng = np.random.default_rng(seed)
    streams = {
        "xx": patch_inner_sum(x, x, g),
        "xy": patch_inner_sum(x, y, g),
        "yy": patch_inner_sum(y, y, g),
    }
    theta = streams["xy"].copy() if cfg.arch is Arch.VANILLA else np.zeros((P, Q, P, Q))
    scale = C_SIGMA / g.q ** 2
    for h in range(1, cfg.depth + 1):
        z = rng.standard_normal((mc_samples, 2)) if mc_samples else None
        K, Kdot = {}, {}
        for key, (a, b) in {"xx": ("xx", "xx"), "xy": ("xx", "yy"), "yy": ("yy", "yy")}.items():
            S = streams[key]
            va = np.einsum("ijij->ij", streams[a])
            vb = np.einsum("ijij->ij", streams[b])
            s11 = np.broadcast_to(va[:, :, None, None], S.shape)
            s22 = np.broadcast_to(vb[None, None, :, :], S.shape)
            if z is not None:
                t, td = mc_arccos_moments(s11, S, s22, z)
            else:
                t, td = np.empty(S.shape), np.empty(S.shape)
                for idx in np.ndindex(S.shape):
                    e = quad_relu_expectations(Cov2(float(s11[idx]), float(S[idx]), float(s22[idx])))
                    t[idx], td[idx] = e.t, e.tdot
            K[key], Kdot[key] = scale * t, scale * td
        is_last = h == cfg.depth
        if not is_last:
            theta = trace_over_patches(Kdot["xy"] * theta + K["xy"], g)
        elif cfg.arch is Arch.VANILLA:
            theta = Kdot["xy"] * theta + K["xy"]
        else:
            theta = Kdot["xy"] * theta
        streams = {k: trace_over_patches(v, g) for k, v in K.items()}
    return _readout(theta, cfg)
