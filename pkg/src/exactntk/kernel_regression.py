"""Kernel regression with NTK / CNTK Gram matrices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

SYMMETRY_RTOL = 1e-12
PSD_RTOL = 1e-8


class SingularKernelError(np.linalg.LinAlgError):
    """Raised when an unregularised Gram matrix is rank deficient."""


@dataclass
class KernelMatrix:
    """Symmetric Gram matrix plus the metadata needed to reproduce it."""

    entries: np.ndarray
    kind: str = "unknown"
    depth: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise ValueError(f"kernel matrix must be square, got {self.entries.shape}")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @cached_property
    def lambda0(self) -> float:
        """Smallest eigenvalue."""
        if self.n == 0:
            return float("nan")
        return float(np.linalg.eigvalsh(self.entries)[0])

    def asymmetry(self) -> float:
        if self.n == 0:
            return 0.0
        return float(np.max(np.abs(self.entries - self.entries.T)))

    def validate(self, check_psd: bool = True) -> None:
        if self.n == 0:
            return
        scale = float(np.max(np.abs(self.entries)))
        if self.asymmetry() > SYMMETRY_RTOL * scale:
            raise ValueError(f"kernel matrix not symmetric (max deviation {self.asymmetry():.3e})")
        if check_psd:
            floor = -PSD_RTOL * float(np.max(np.diag(self.entries)))
            if self.lambda0 < floor:
                raise ValueError(f"kernel matrix not PSD (min eigenvalue {self.lambda0:.3e})")


@dataclass
class FittedPredictor:
    alpha: np.ndarray
    ridge: float
    num_classes: int
    label_offset: float = -0.1


def encode_labels(labels, k: int) -> np.ndarray:
    """Rows ``-0.1 * 1 + e_c``: 0.9 at the class index, -0.1 elsewhere."""
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D array of class indices")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}); got range [{labels.min()}, {labels.max()}]")
    Y = np.full((labels.size, k), -0.1)
    Y[np.arange(labels.size), labels] += 1.0
    return Y


def fit(H, Y, ridge: float = 0.0) -> FittedPredictor:
    """Solve ``(H + ridge * I) alpha = Y`` with a Cholesky factorisation.

    Falls back to least squares (with a warning) if the factorisation fails
    on a full-rank system.  A rank-deficient ``H`` with ``ridge == 0`` raises
    :class:`SingularKernelError`.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    Hm = H.entries if isinstance(H, KernelMatrix) else np.asarray(H, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    n = Hm.shape[0]
    if Y.shape[0] != n:
        raise ValueError(f"label rows ({Y.shape[0]}) do not match kernel size ({n})")
    A = Hm + ridge * np.eye(n)
    eps = np.finfo(np.float64).eps
    try:
        factor = linalg.cho_factor(A, lower=True)
        pivots = np.diag(factor[0]) ** 2
        if ridge == 0 and pivots.min() <= n * eps * pivots.max():
            raise SingularKernelError(
                "kernel matrix is numerically rank deficient (duplicate inputs?); use a ridge > 0")
        alpha = linalg.cho_solve(factor, Y)
    except SingularKernelError:
        raise
    except linalg.LinAlgError:
        if ridge == 0 and np.linalg.matrix_rank(A) < n:
            raise SingularKernelError(
                "kernel matrix is rank deficient (duplicate inputs?); use a ridge > 0") from None
        warnings.warn("Cholesky factorisation failed; using least-squares solution instead",
                      RuntimeWarning, stacklevel=2)
        alpha = linalg.lstsq(A, Y)[0]
    if squeeze:
        alpha = alpha[:, 0]
    return FittedPredictor(alpha=alpha, ridge=float(ridge),
                           num_classes=1 if squeeze else Y.shape[1])


def predict(pred: FittedPredictor, k_rows) -> np.ndarray:
    """Scores ``k_rows @ alpha``; ``k_rows`` is one row of length n or an (m, n) block."""
    k_rows = np.asarray(k_rows, dtype=np.float64)
    n = pred.alpha.shape[0]
    if k_rows.shape[-1] != n:
        raise ValueError(f"kernel row length {k_rows.shape[-1]} does not match training size {n}")
    return k_rows @ pred.alpha


def classify(scores) -> np.ndarray | int:
    """Argmax over the last axis; ties go to the lowest class index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise ValueError("cannot classify empty scores")
    out = np.argmax(scores, axis=-1)
    return int(out) if out.ndim == 0 else out


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in shape")
    return float(np.mean(predictions == labels))


def per_class_accuracy(predictions, labels, k: int) -> list[float | None]:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    out = []
    for c in range(k):
        mask = labels == c
        out.append(float(np.mean(predictions[mask] == c)) if mask.any() else None)
    return out
