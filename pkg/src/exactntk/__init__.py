"""Exact neural tangent kernels for fully-connected and convolutional ReLU networks."""

__version__ = "0.1.0"

from .cntk import Arch, CntkConfig, cntk_matrix, cntk_pair
from .kernel_regression import KernelMatrix, encode_labels, fit, predict
from .ntk_fc import ntk_matrix, ntk_pair
from .tensor_core import PatchGeometry

__all__ = [
    "Arch", "CntkConfig", "KernelMatrix", "PatchGeometry", "cntk_matrix", "cntk_pair",
    "encode_labels", "fit", "ntk_matrix", "ntk_pair", "predict",
]
