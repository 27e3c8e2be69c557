"""Finite-width ReLU networks under NTK parameterisation.

Weights are stored unscaled (i.i.d. standard normal at init); the
``sqrt(c_sigma / width)`` factors are applied in the forward pass.  Gradients
are computed by an explicit backward pass: for every layer we keep the layer
input and the back-propagated vector, and ``df/dW`` is their outer product
(summed over positions for convolutions).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .kernel_regression import KernelMatrix
from .relu_kernels import C_SIGMA

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MlpArch:
    """``widths = (d_0, d_1, ..., d_L)``; the output layer has width 1."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 1 or any(int(w) < 1 for w in self.widths):
            raise ValueError(f"all widths must be positive, got {self.widths}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    def shapes(self) -> list[tuple[int, ...]]:
        w = self.widths
        return [(w[h], w[h - 1]) for h in range(1, len(w))] + [(1, w[-1])]

    @property
    def trainable(self) -> tuple[int, ...]:
        return tuple(range(1, self.depth + 2))


@dataclass(frozen=True)
class CnnArch:
    """``channels = (C_0, ..., C_L)`` on ``P x Q`` images, one odd filter size.

    ``head`` is ``"dense"`` (a ``P x Q`` weight per channel) or ``"gap"`` (global
    average pooling then a scalar per channel).  By default the GAP network
    trains only the interior convolution layers, matching its kernel.
    """

    channels: tuple[int, ...]
    image_shape: tuple[int, int]
    q: int = 3
    head: str = "dense"
    train_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.channels) < 2 or any(int(c) < 1 for c in self.channels):
            raise ValueError(f"need C_0..C_L with L >= 1, all positive; got {self.channels}")
        if self.q < 1 or self.q % 2 == 0:
            raise ValueError("filter size must be odd")
        if self.head not in ("dense", "gap"):
            raise ValueError(f"unknown head {self.head!r}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    @property
    def depth(self) -> int:
        return len(self.channels) - 1

    def shapes(self) -> list[tuple[int, ...]]:
        c, q = self.channels, self.q
        convs = [(c[h - 1], c[h], q, q) for h in range(1, len(c))]
        head = (*self.image_shape, c[-1]) if self.head == "dense" else (c[-1],)
        return convs + [head]

    @property
    def trainable(self) -> tuple[int, ...]:
        if self.train_layers is not None:
            return tuple(self.train_layers)
        if self.head == "gap":
            return tuple(range(2, self.depth + 1))
        return tuple(range(1, self.depth + 2))


@dataclass
class FiniteNetParams:
    arch: MlpArch | CnnArch
    theta: np.ndarray
    seed: int | None = None

    @property
    def layers(self) -> list[np.ndarray]:
        """Views into ``theta``, one per weight tensor ``W^(1) .. W^(L+1)``."""
        out, start = [], 0
        for shape in self.arch.shapes():
            size = math.prod(shape)
            out.append(self.theta[start:start + size].reshape(shape))
            start += size
        return out

    def layer_slices(self) -> list[slice]:
        out, start = [], 0
        for shape in self.arch.shapes():
            size = math.prod(shape)
            out.append(slice(start, start + size))
            start += size
        return out

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.theta.size, dtype=bool)
        for h, sl in enumerate(self.layer_slices(), start=1):
            if h in self.arch.trainable:
                mask[sl] = True
        return mask

    def copy(self) -> "FiniteNetParams":
        return FiniteNetParams(self.arch, self.theta.copy(), self.seed)


def init_net(arch, seed: int) -> FiniteNetParams:
    total = sum(math.prod(s) for s in arch.shapes())
    theta = np.random.default_rng(seed).standard_normal(total)
    return FiniteNetParams(arch, theta, seed)


# ---------------------------------------------------------------- MLP

def _mlp_batch(params: FiniteNetParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != params.arch.widths[0]:
        raise ValueError(f"input dimension {X.shape[1]} != {params.arch.widths[0]}")
    return X


def _mlp_forward(params, X):
    """Returns output ``(n,)``, layer inputs ``g^(0..L)`` and preactivations ``f^(1..L)``."""
    Ws = params.layers
    g, gs, fs = X, [X], []
    for h, W in enumerate(Ws[:-1], start=1):
        f = g @ W.T
        g = math.sqrt(C_SIGMA / W.shape[0]) * np.maximum(f, 0.0)
        fs.append(f)
        gs.append(g)
    out = (g @ Ws[-1].T)[:, 0]
    return out, gs, fs


def _mlp_backward(params, gs, fs, seed_vec):
    """``b^(h)`` for h = 1..L+1, scaled per example by ``seed_vec``."""
    Ws = params.layers
    b = seed_vec[:, None].astype(np.float64)
    bs = [b]
    for h in range(len(Ws) - 1, 0, -1):
        W_next = Ws[h]
        mask = fs[h - 1] > 0  # sigma_dot(0) = 0
        b = math.sqrt(C_SIGMA / W_next.shape[1]) * mask * (b @ W_next)
        bs.append(b)
    return bs[::-1]


# ---------------------------------------------------------------- CNN

def _cnn_batch(params: FiniteNetParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    arch = params.arch
    if X.ndim == 3:
        X = X[None]
    if X.shape[1:] != (*arch.image_shape, arch.channels[0]):
        raise ValueError(f"image shape {X.shape[1:]} does not match {(*arch.image_shape, arch.channels[0])}")
    return X


def _patches(X, q):
    """``(n, P, Q, C * q * q)`` zero-padded patches ordered ``(c, a, b)``."""
    r = (q - 1) // 2
    Xp = np.pad(X, ((0, 0), (r, r), (r, r), (0, 0)))
    win = sliding_window_view(Xp, (q, q), axis=(1, 2))  # (n, P, Q, C, q, q)
    n, P, Q = X.shape[:3]
    return win.reshape(n, P, Q, -1)


def _unpatch(dpatch, q, C):
    """Adjoint of :func:`_patches`."""
    n, P, Q, _ = dpatch.shape
    r = (q - 1) // 2
    d = dpatch.reshape(n, P, Q, C, q, q)
    out = np.zeros((n, P + 2 * r, Q + 2 * r, C))
    for a in range(q):
        for b in range(q):
            out[:, a:a + P, b:b + Q, :] += d[:, :, :, :, a, b]
    return out[:, r:r + P, r:r + Q, :]


def _cnn_forward(params, X):
    arch = params.arch
    Ws = params.layers
    x, patches, pres = X, [], []
    for h in range(1, arch.depth + 1):
        W = Ws[h - 1]  # (C_in, C_out, q, q)
        cin, cout = W.shape[:2]
        pt = _patches(x, arch.q)
        pre = pt @ W.transpose(0, 2, 3, 1).reshape(cin * arch.q ** 2, cout)
        x = math.sqrt(C_SIGMA / (cout * arch.q ** 2)) * np.maximum(pre, 0.0)
        patches.append(pt)
        pres.append(pre)
    head = Ws[-1]
    if arch.head == "dense":
        out = np.einsum("npqc,pqc->n", x, head)
    else:
        out = x.mean(axis=(1, 2)) @ head
    return out, x, patches, pres


def _cnn_backward(params, x_last, patches, pres, seed_vec):
    """Per-layer ``(layer input patches, output deltas)`` plus the head's input/delta."""
    arch = params.arch
    Ws = params.layers
    head = Ws[-1]
    n = x_last.shape[0]
    P, Q = arch.image_shape
    if arch.head == "dense":
        dx = seed_vec[:, None, None, None] * head[None]
        head_feat = x_last
    else:
        dx = np.broadcast_to(seed_vec[:, None, None, None] * head[None, None, None, :] / (P * Q),
                             x_last.shape)
        head_feat = x_last.mean(axis=(1, 2))
    deltas = [None] * arch.depth
    for h in range(arch.depth, 0, -1):
        W = Ws[h - 1]
        cin, cout = W.shape[:2]
        dpre = math.sqrt(C_SIGMA / (cout * arch.q ** 2)) * (pres[h - 1] > 0) * dx
        deltas[h - 1] = dpre
        if h > 1:
            dpatch = dpre @ W.transpose(0, 2, 3, 1).reshape(cin * arch.q ** 2, cout).T
            dx = _unpatch(dpatch, arch.q, cin)
    head_delta = seed_vec
    return deltas, head_feat, head_delta


# ---------------------------------------------------------------- public API

def _run(params, X, seed_vec=None):
    """Forward plus backward; returns ``(outputs, factors)``.

    ``factors[h-1]`` is ``(inputs, deltas)`` such that the per-example gradient of
    ``seed_vec[k] * f(x_k)`` w.r.t. ``W^(h)`` is a contraction of the two.
    """
    if isinstance(params.arch, MlpArch):
        X = _mlp_batch(params, X)
        out, gs, fs = _mlp_forward(params, X)
        if seed_vec is None:
            seed_vec = np.ones(len(out))
        bs = _mlp_backward(params, gs, fs, seed_vec)
        return out, list(zip(gs, bs))
    X = _cnn_batch(params, X)
    out, x_last, patches, pres = _cnn_forward(params, X)
    if seed_vec is None:
        seed_vec = np.ones(len(out))
    deltas, head_feat, head_delta = _cnn_backward(params, x_last, patches, pres, seed_vec)
    return out, list(zip(patches, deltas)) + [(head_feat, head_delta)]


def forward(params: FiniteNetParams, x):
    """Network output; a float for a single input, an array for a batch."""
    single = (isinstance(params.arch, MlpArch) and np.ndim(x) == 1) or \
             (isinstance(params.arch, CnnArch) and np.ndim(x) == 3)
    if isinstance(params.arch, MlpArch):
        out = _mlp_forward(params, _mlp_batch(params, x))[0]
    else:
        out = _cnn_forward(params, _cnn_batch(params, x))[0]
    return float(out[0]) if single else out


def min_abs_preactivation(params: FiniteNetParams, x) -> float:
    """Distance of the nearest hidden preactivation from the ReLU kink at 0."""
    if isinstance(params.arch, MlpArch):
        pres = _mlp_forward(params, _mlp_batch(params, x))[2]
    else:
        pres = _cnn_forward(params, _cnn_batch(params, x))[3]
    return float(min(np.min(np.abs(f)) for f in pres))


def _layer_grads(params, h, inp, delta):
    """Per-example gradient block of layer ``h``, shape ``(n, size)``."""
    n = delta.shape[0]
    if isinstance(params.arch, MlpArch):
        return np.einsum("ni,nj->nij", delta, inp).reshape(n, -1)
    arch = params.arch
    if h == arch.depth + 1:
        if arch.head == "dense":
            return (inp * delta[:, None, None, None]).reshape(n, -1)
        return inp * delta[:, None]
    cin, cout = arch.channels[h - 1], arch.channels[h]
    g = np.einsum("npqk,npqd->nkd", inp, delta)  # k = (c, a, b)
    return g.reshape(n, cin, arch.q, arch.q, cout).transpose(0, 1, 4, 2, 3).reshape(n, -1)


def per_example_gradients(params: FiniteNetParams, X) -> np.ndarray:
    """``(n, num_params)`` matrix of ``df(x_k)/dtheta`` (all layers, frozen or not)."""
    _, factors = _run(params, X)
    return np.concatenate([_layer_grads(params, h, *f) for h, f in enumerate(factors, start=1)],
                          axis=1)


def param_gradient(params: FiniteNetParams, x) -> np.ndarray:
    return per_example_gradients(params, x)[0]


def weighted_gradient(params: FiniteNetParams, X, weights) -> np.ndarray:
    """``sum_k weights[k] * df(x_k)/dtheta`` without forming per-example gradients."""
    weights = np.asarray(weights, dtype=np.float64)
    _, factors = _run(params, X, weights)
    blocks = []
    for h, (inp, delta) in enumerate(factors, start=1):
        if isinstance(params.arch, MlpArch):
            blocks.append((delta.T @ inp).ravel())
            continue
        arch = params.arch
        if h == arch.depth + 1:
            if arch.head == "dense":
                blocks.append(np.einsum("npqc,n->pqc", inp, delta).ravel())
            else:
                blocks.append(delta @ inp)
            continue
        cin, cout = arch.channels[h - 1], arch.channels[h]
        g = np.einsum("npqk,npqd->kd", inp, delta)
        blocks.append(g.reshape(cin, arch.q, arch.q, cout).transpose(0, 3, 1, 2).ravel())
    return np.concatenate(blocks)


def empirical_gram(params: FiniteNetParams, X, Y=None, trainable_only: bool = True) -> np.ndarray:
    """Gram matrix of parameter gradients between the rows of ``X`` and ``Y``.

    Computed layer by layer; MLP layers use the factorisation
    ``<b g^T, b' g'^T> = <g, g'> <b, b'>`` so no gradient vector is materialised.
    """
    _, fx = _run(params, X)
    fy = fx if Y is None else _run(params, Y)[1]
    nx, ny = len(fx[0][1]), len(fy[0][1])
    G = np.zeros((nx, ny))
    layers = params.arch.trainable if trainable_only else range(1, params.arch.depth + 2)
    for h in layers:
        (ix, dx), (iy, dy) = fx[h - 1], fy[h - 1]
        if isinstance(params.arch, MlpArch):
            G += (ix @ iy.T) * (dx @ dy.T)
        else:
            gx = _layer_grads(params, h, ix, dx)
            gy = gx if Y is None else _layer_grads(params, h, iy, dy)
            G += gx @ gy.T
    return G


def empirical_kernel(params: FiniteNetParams, x, y) -> float:
    """``<df(x)/dtheta, df(y)/dtheta>`` over the trainable parameters."""
    X = np.stack([np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)])
    return float(empirical_gram(params, X)[0, 1])


def mc_ntk_estimate(arch, x, y, num_seeds: int, base_seed: int = 0) -> tuple[float, float]:
    """Mean and standard error of the empirical kernel over fresh initialisations."""
    if num_seeds < 2:
        raise ValueError("need at least two seeds for a standard error")
    vals = np.array([empirical_kernel(init_net(arch, base_seed + s), x, y)
                     for s in range(num_seeds)])
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(num_seeds))


def random_feature_kernel(params: FiniteNetParams, inputs, Y=None, chunk: int = 64) -> KernelMatrix | np.ndarray:
    """Gram of gradient features at one fixed initialisation.

    With ``Y`` given, returns the raw cross block (rows ``inputs``, columns ``Y``).
    Inputs are processed in chunks to bound memory.
    """
    X = np.asarray(inputs, dtype=np.float64)
    Z = X if Y is None else np.asarray(Y, dtype=np.float64)
    G = np.zeros((len(X), len(Z)))
    for i in range(0, len(X), chunk):
        for j in range(0, len(Z), chunk):
            if Y is None and j < i:
                continue
            same = Y is None and i == j
            blk = empirical_gram(params, X[i:i + chunk], None if same else Z[j:j + chunk])
            G[i:i + chunk, j:j + chunk] = blk
            if Y is None and j > i:
                G[j:j + chunk, i:i + chunk] = blk.T
    if Y is not None:
        return G
    G = 0.5 * (G + G.T)
    kind = "rf-mlp" if isinstance(params.arch, MlpArch) else f"rf-cnn-{params.arch.head}"
    return KernelMatrix(G, kind=kind, depth=params.arch.depth, metadata={"seed": params.seed})


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    params: FiniteNetParams
    kappa: float
    step_size: float
    outputs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loss: float = float("nan")
    steps: int = 0
    history: list = field(default_factory=list)


class DivergedError(FloatingPointError):
    pass


def squared_loss(params, X, y, kappa) -> tuple[float, np.ndarray]:
    u = kappa * np.asarray(forward(params, X))
    with np.errstate(over="ignore", invalid="ignore"):
        return 0.5 * float(np.sum((u - y) ** 2)), u


def train_full_batch(state: TrainState, X, y, steps: int, target_loss: float | None = None,
                     record: bool = False) -> TrainState:
    """Full-batch gradient descent on ``0.5 * sum (kappa f(x_i) - y_i)^2``.

    Only trainable layers move.  Stops early once the loss is at most
    ``target_loss``.
    """
    y = np.asarray(y, dtype=np.float64)
    p = state.params
    mask = p.trainable_mask()
    loss, u = squared_loss(p, X, y, state.kappa)
    for _ in range(steps):
        if target_loss is not None and loss <= target_loss:
            break
        grad = weighted_gradient(p, X, state.kappa * (u - y))
        p.theta[mask] -= state.step_size * grad[mask]
        state.steps += 1
        loss, u = squared_loss(p, X, y, state.kappa)
        if not math.isfinite(loss):
            raise DivergedError(f"loss became {loss} at step {state.steps}; "
                                f"step size {state.step_size} is too large")
        if record:
            state.history.append(loss)
    state.loss, state.outputs = loss, u
    return state
