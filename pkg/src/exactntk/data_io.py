"""Datasets (CIFAR-10 binary, synthetic) and the kernel-matrix file format.

Kernel file layout, all little-endian::

    b"CNTK"                 magic
    uint32                  format version (1)
    uint64                  n
    uint8                   kernel kind tag
    uint32                  depth
    float64[n * n]          entries, row-major
    uint64                  metadata length in bytes
    bytes                   UTF-8 JSON metadata
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .kernel_regression import SYMMETRY_RTOL, KernelMatrix

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10

MAGIC = b"CNTK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQBI")
_LEN = struct.Struct("<Q")

KIND_TAGS = {"fc-ntk": 0, "cntk-vanilla": 1, "cntk-gap": 2,
             "rf-mlp": 3, "rf-cnn-dense": 4, "rf-cnn-gap": 5, "unknown": 255}
TAG_KINDS = {v: k for k, v in KIND_TAGS.items()}


class KernelFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Images ``(n, P, Q, C)`` or vectors ``(n, d)`` with integer labels in ``[0, k)``."""

    images: np.ndarray
    labels: np.ndarray
    k: int
    provenance: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError(f"labels must lie in [0, {self.k})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def read_cifar10_bin(path, limit: int | None = None, normalize: bool = False,
                     classes=None) -> LabeledDataset:
    """Read CIFAR-10 binary records (label byte + 3x32x32 plane-major pixels).

    Pixels map to ``[0, 1]``; ``normalize`` rescales each image to unit norm.
    ``classes`` keeps only the listed labels (relabelled ``0..len(classes)-1``).
    """
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    raws = []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise ValueError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        raws.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    recs = np.concatenate(raws)
    labels = recs[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_CLASSES:
        raise ValueError(f"label byte {labels.max()} out of range")
    k = CIFAR_CLASSES
    if classes is not None:
        classes = list(classes)
        keep = np.isin(labels, classes)
        recs, labels = recs[keep], labels[keep]
        labels = np.searchsorted(np.array(sorted(classes)), labels)
        k = len(classes)
    if limit is not None:
        recs, labels = recs[:limit], labels[:limit]
    images = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float64) / 255.0
    ds = LabeledDataset(images, labels, k, provenance=f"cifar10-bin:{','.join(map(str, paths))}")
    return unit_normalize(ds) if normalize else ds


def write_cifar10_bin(path, images, labels) -> None:
    """Write ``(n, 32, 32, 3)`` uint8 images in CIFAR-10 binary layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    recs = np.empty((len(labels), CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = labels
    recs[:, 1:] = images.transpose(0, 3, 1, 2).reshape(len(labels), -1)
    Path(path).write_bytes(recs.tobytes())


def downsample(ds: LabeledDataset, factor: int) -> LabeledDataset:
    """Average-pool non-overlapping ``factor x factor`` blocks per channel."""
    if factor < 1:
        raise ValueError("factor must be positive")
    n, P, Q, C = ds.images.shape
    if P % factor or Q % factor:
        raise ValueError(f"factor {factor} does not divide image size {P}x{Q}")
    if factor == 1:
        return ds
    pooled = ds.images.reshape(n, P // factor, factor, Q // factor, factor, C).mean(axis=(2, 4))
    return replace(ds, images=pooled, provenance=f"{ds.provenance}|downsample:{factor}")


def unit_normalize(ds: LabeledDataset) -> LabeledDataset:
    flat = ds.images.reshape(len(ds), -1)
    norms = np.linalg.norm(flat, axis=1)
    norms[norms == 0] = 1.0
    images = (flat / norms[:, None]).reshape(ds.images.shape)
    return replace(ds, images=images, provenance=f"{ds.provenance}|unit-norm")


def synthetic_sphere_dataset(n: int, shape, k: int = 2, seed: int = 0) -> LabeledDataset:
    """Unit-norm Gaussian inputs labelled by ``argmax`` of ``k`` random linear scores.

    ``shape`` is an int (vectors) or a ``(P, Q, C)`` tuple (images).
    """
    if n < 1 or k < 1:
        raise ValueError("n and k must be positive")
    shape = (int(shape),) if np.isscalar(shape) else tuple(int(s) for s in shape)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, int(np.prod(shape))))
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    W = rng.standard_normal((k, X.shape[1]))
    labels = np.argmax(X @ W.T, axis=1) if k > 1 else np.zeros(n, dtype=np.int64)
    return LabeledDataset(X.reshape((n,) + shape), labels, k,
                          provenance=f"synthetic-sphere:n={n},shape={shape},k={k},seed={seed}")


# ---------------------------------------------------------------- kernel files

def _payload(K: KernelMatrix) -> bytes:
    return np.ascontiguousarray(K.entries, dtype="<f8").tobytes()


def write_kernel(path, K: KernelMatrix) -> None:
    if K.n and K.asymmetry() > SYMMETRY_RTOL * float(np.max(np.abs(K.entries))):
        raise ValueError("refusing to write a non-symmetric kernel matrix")
    payload = _payload(K)
    meta = dict(K.metadata)
    meta["kind"] = K.kind
    meta["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    tag = KIND_TAGS.get(K.kind, KIND_TAGS["unknown"])
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, K.n, tag, K.depth))
        fh.write(payload)
        fh.write(_LEN.pack(len(meta_bytes)))
        fh.write(meta_bytes)
    os.replace(tmp, path)


def read_kernel(path) -> KernelMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise KernelFormatError("file too short for header")
    magic, version, n, tag, depth = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise KernelFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise KernelFormatError(f"unsupported format version {version}")
    start = _HEADER.size
    end = start + 8 * n * n
    if len(raw) < end + _LEN.size:
        raise KernelFormatError(f"payload truncated for n={n}")
    payload = raw[start:end]
    (mlen,) = _LEN.unpack_from(raw, end)
    if len(raw) != end + _LEN.size + mlen:
        raise KernelFormatError("metadata length does not match file size")
    meta = json.loads(raw[end + _LEN.size:].decode("utf-8"))
    want = meta.get("payload_sha256")
    if want is not None and hashlib.sha256(payload).hexdigest() != want:
        raise KernelFormatError("payload checksum mismatch")
    entries = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, n)
    kind = meta.pop("kind", TAG_KINDS.get(tag, "unknown"))
    meta.pop("payload_sha256", None)
    return KernelMatrix(entries, kind=kind, depth=depth, metadata=meta)
