"""Neighbourhood-consensus scoring of dense correspondences.

The correlation volume ``c`` between descriptor maps A (``hA x wA``) and
B (``hB x wB``) is a single-channel array of shape ``(hA, wA, hB, wB)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FileFormatError
from .tensor4d import Conv4Stack, check_capacity, conv4d_stack, relu, transpose_pairs

_EPS = 1e-12


class DescriptorMap:
    """Grid of unit-norm descriptors, one per 16x16 pixel block.

    Descriptors are renormalised on construction.  Zero vectors cannot be
    normalised and are replaced by the uniform unit vector.
    """

    cell = 16

    def __init__(self, descriptors):
        d = np.array(descriptors, dtype=np.float64)
        if d.ndim != 3 or d.shape[0] < 1 or d.shape[1] < 1 or d.shape[2] < 1:
            raise ContractViolation(f"descriptor map must be (h, w, dim), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ContractViolation("descriptor map contains non-finite values")
        self.descriptors = normalize_rows(d)

    @property
    def shape(self):
        return self.descriptors.shape[:2]

    @property
    def dim(self) -> int:
        return self.descriptors.shape[2]

    def __repr__(self):
        h, w = self.shape
        return f"DescriptorMap(h={h}, w={w}, dim={self.dim})"


def normalize_rows(d: np.ndarray) -> np.ndarray:
    """L2-normalise along the last axis; all-zero vectors become uniform."""
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    uniform = np.full(d.shape[-1], 1.0 / np.sqrt(d.shape[-1]))
    safe = np.where(norm > _EPS, norm, 1.0)
    return np.where(norm > _EPS, d / safe, uniform)


@dataclass(frozen=True)
class ScoreTensors:
    """Softmax match scores: ``sA`` normalised over A locations, ``sB`` over B."""

    sA: np.ndarray
    sB: np.ndarray


def correlate(fA: DescriptorMap, fB: DescriptorMap, max_elements: int | None = None) -> np.ndarray:
    """Dot products between every cell of A and every cell of B."""
    if fA.dim != fB.dim:
        raise ContractViolation(f"descriptor length mismatch: {fA.dim} vs {fB.dim}")
    check_capacity(fA.shape + fB.shape, max_elements)
    return np.einsum("ijn,kln->ijkl", fA.descriptors, fB.descriptors)


def soft_mutual_nn(c: np.ndarray) -> np.ndarray:
    """Rescale each score by its ratios to the A-side and B-side slice maxima."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 4:
        raise ContractViolation(f"expected a single-channel 4-D volume, got {c.shape}")
    if np.any(c < 0):
        raise ContractViolation("soft mutual filtering requires non-negative scores")
    max_a = c.max(axis=(0, 1), keepdims=True)
    max_b = c.max(axis=(2, 3), keepdims=True)
    ra = np.divide(c, max_a, out=np.zeros_like(c), where=max_a > 0)
    rb = np.divide(c, max_b, out=np.zeros_like(c), where=max_b > 0)
    return ra * rb * c


def symmetric_consensus(c: np.ndarray, stack: Conv4Stack, workers: int = 1,
                        max_elements: int | None = None) -> np.ndarray:
    """``N(c) + T(N(T(c)))`` where ``T`` swaps the two images."""
    c = np.asarray(c, dtype=np.float64)
    fwd = conv4d_stack(c[..., None], stack, workers=workers, max_elements=max_elements)[..., 0]
    bwd = conv4d_stack(transpose_pairs(c)[..., None], stack, workers=workers,
                       max_elements=max_elements)[..., 0]
    return fwd + transpose_pairs(bwd)


def check_stack_capacity(shape, stack: Conv4Stack, max_elements: int | None = None) -> None:
    """Fail early if the widest layer output would exceed the element cap."""
    widest = max(layer.out_channels for layer in stack.layers)
    check_capacity(tuple(shape) + (widest,), max_elements)


def ncn_filter(c: np.ndarray, stack: Conv4Stack, repeats: int = 1, workers: int = 1,
               max_elements: int | None = None) -> np.ndarray:
    """Symmetric 4D consensus, rectification, then soft mutual filtering.

    ``repeats`` runs the whole sequence that many times.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 4:
        raise ContractViolation(f"expected a single-channel 4-D volume, got {c.shape}")
    check_stack_capacity(c.shape, stack, max_elements)
    for _ in range(repeats):
        n = relu(symmetric_consensus(c, stack, workers=workers, max_elements=max_elements))
        c = soft_mutual_nn(n)
    return c


def _softmax(c: np.ndarray, axes) -> np.ndarray:
    z = c - c.max(axis=axes, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axes, keepdims=True)


def match_scores(c: np.ndarray, literal_sb: bool = False) -> ScoreTensors:
    """Softmax scores over image-A locations (``sA``) and image-B locations (``sB``).

    With ``literal_sb=True`` the B scores reuse the A-side denominator
    (sum over the first two axes), which makes ``sB`` identical to ``sA``.
    That form is kept only for comparison against the printed formula.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 4:
        raise ContractViolation(f"expected a single-channel 4-D volume, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractViolation("scores must be finite")
    sA = _softmax(c, (0, 1))
    sB = sA.copy() if literal_sb else _softmax(c, (2, 3))
    return ScoreTensors(sA, sB)


def pair_loss(s: ScoreTensors, label: int, reduction: str = "all") -> float:
    """Weakly supervised loss ``-y * (mean(sA) + mean(sB))``.

    ``reduction="all"`` averages over every cell.  Because each softmax slice
    sums to one, that value depends only on the grid sizes.  The ``"max"``
    reduction averages the per-slice maxima instead and does respond to how
    peaked the scores are.
    """
    if label not in (0, 1):
        raise ContractViolation(f"pair label must be 0 or 1, got {label!r}")
    if label == 0:
        return 0.0
    if reduction == "all":
        ma, mb = s.sA.mean(), s.sB.mean()
    elif reduction == "max":
        ma = s.sA.max(axis=(0, 1)).mean()
        mb = s.sB.max(axis=(2, 3)).mean()
    else:
        raise ContractViolation(f"unknown reduction {reduction!r}")
    return -float(ma + mb)


# --- descriptor map files ---------------------------------------------------
# "DMAP", u32 h, w, dim, then float32 descriptors row-major (h, w, dim).

_DMAP_MAGIC = b"DMAP"


def save_descriptor_map(fmap: DescriptorMap, path) -> None:
    h, w = fmap.shape
    with open(path, "wb") as fh:
        fh.write(_DMAP_MAGIC)
        fh.write(struct.pack("<III", h, w, fmap.dim))
        fh.write(fmap.descriptors.astype("<f4").tobytes())


def load_descriptor_map(path) -> DescriptorMap:
    data = Path(path).read_bytes()
    if data[:4] != _DMAP_MAGIC or len(data) < 16:
        raise FileFormatError(f"{path}: not a DMAP descriptor file")
    h, w, dim = struct.unpack_from("<III", data, 4)
    n = h * w * dim
    if n == 0 or len(data) != 16 + 4 * n:
        raise FileFormatError(f"{path}: expected {n} float32 values for {h}x{w}x{dim}")
    desc = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, dim)
    return DescriptorMap(desc)
