"""Dense 4D tensors and 4D convolution.

A 4D tensor is stored as a numpy array of shape ``(a, b, c, d, channels)``,
row-major, so that ``t[i, j, k, l, ch]`` is the score of location ``(i, j)``
in image A paired with location ``(k, l)`` in image B.  Single-channel
volumes handled by :mod:`ncmatch.consensus` drop the trailing axis.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import CapacityError, ContractViolation, FileFormatError

#: Default cap on the number of values a single tensor may hold.
MAX_ELEMENTS = 2**30

# Per-task im2col buffer is kept below this many values.
_CHUNK_VALUES = 1 << 22


@dataclass(frozen=True)
class Conv4Kernel:
    """Weights ``(out, in, k, k, k, k)`` and bias ``(out,)`` of one 4D layer."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 6:
            raise ContractViolation(f"kernel weights must be 6-D, got shape {w.shape}")
        k = w.shape[2]
        if w.shape[2:] != (k, k, k, k):
            raise ContractViolation(f"kernel must be k^4 with equal sides, got {w.shape[2:]}")
        if k % 2 != 1:
            raise ContractViolation(f"kernel size must be odd, got {k}")
        if b.shape != (w.shape[0],):
            raise ContractViolation(f"bias length {b.size} != out_channels {w.shape[0]}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def delta(cls, k: int = 3, channels: int = 1) -> "Conv4Kernel":
        """Identity kernel: unit centre tap from each channel to itself."""
        w = np.zeros((channels, channels) + (k,) * 4)
        c = k // 2
        for ch in range(channels):
            w[ch, ch, c, c, c, c] = 1.0
        return cls(w, np.zeros(channels))

    @classmethod
    def zeros(cls, k: int = 3, in_channels: int = 1, out_channels: int = 1) -> "Conv4Kernel":
        return cls(np.zeros((out_channels, in_channels) + (k,) * 4), np.zeros(out_channels))


@dataclass(frozen=True)
class Conv4Stack:
    """Ordered 4D convolution layers with a rectifier between consecutive layers."""

    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ContractViolation("a Conv4Stack needs at least one layer")
        if layers[0].in_channels != 1 or layers[-1].out_channels != 1:
            raise ContractViolation("stack must map 1 channel to 1 channel")
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ContractViolation(
                    f"layer channel mismatch: {prev.out_channels} -> {nxt.in_channels}"
                )
        object.__setattr__(self, "layers", layers)

    @classmethod
    def seeded(cls, seed: int = 0, channels=(1, 16, 16, 1), k: int = 3) -> "Conv4Stack":
        """Reproducible default weights used when no weight file is supplied.

        Each layer is an identity-like centre tap plus small non-negative
        seeded noise spread over the neighbourhood, so untrained stacks
        smooth scores along consistent match surfaces instead of scrambling
        them.
        """
        rng = np.random.default_rng(seed)
        layers = []
        c = k // 2
        for cin, cout in zip(channels[:-1], channels[1:]):
            fan_in = cin * k**4
            w = rng.uniform(0.0, 1.0, size=(cout, cin) + (k,) * 4) * (0.5 / fan_in)
            w[:, :, c, c, c, c] += 1.0 / cin
            layers.append(Conv4Kernel(w, np.zeros(cout)))
        return cls(tuple(layers))

    @classmethod
    def delta(cls, k: int = 3) -> "Conv4Stack":
        return cls((Conv4Kernel.delta(k),))


def check_capacity(shape, max_elements: int | None = None) -> None:
    cap = MAX_ELEMENTS if max_elements is None else max_elements
    n = int(np.prod([int(s) for s in shape], dtype=object))
    if n > cap:
        raise CapacityError(
            f"tensor of shape {tuple(shape)} holds {n} values, above the cap of {cap}"
        )


def _as_tensor4(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise ContractViolation(f"expected (a, b, c, d, channels) array, got shape {x.shape}")
    return x


def conv4d(x, kernel: Conv4Kernel, workers: int = 1, max_elements: int | None = None) -> np.ndarray:
    """Zero-padded, stride-1 4D cross-correlation plus bias.

    ``x`` has shape ``(a, b, c, d, in)``; the result has shape
    ``(a, b, c, d, out)``.  For each offset ``(p, q)`` on the first two
    axes the ``(s, t, in)`` neighbourhoods are gathered into columns and
    multiplied by the matching weight slice; offsets are accumulated in a
    fixed order.  Work is split into chunks of the first axis that do not
    depend on ``workers`` and each chunk is owned by one thread, so the
    output is bit-identical for any worker count.
    """
    x = _as_tensor4(x)
    a, b, c, d, cin = x.shape
    if cin != kernel.in_channels:
        raise ContractViolation(f"input has {cin} channels, kernel expects {kernel.in_channels}")
    cout = kernel.out_channels
    check_capacity((a, b, c, d, cout), max_elements)
    k = kernel.size
    r = k // 2
    padded = np.pad(x, ((r, r),) * 4 + ((0, 0),))
    # (a+2r, b+2r, c, d, k, k, in): channel axis innermost keeps the gather local
    windows = sliding_window_view(padded, (k, k), axis=(2, 3)).transpose(0, 1, 2, 3, 5, 6, 4)
    # wmats[p, q] is the (k*k*in, out) matrix for offset (p, q)
    wmats = kernel.weights.transpose(2, 3, 4, 5, 1, 0).reshape(k, k, k * k * cin, cout)
    out = np.empty((a, b, c, d, cout))

    plane = b * c * d * max(k * k * cin, cout)
    rows = max(1, _CHUNK_VALUES // max(plane, 1))
    chunks = [(i0, min(i0 + rows, a)) for i0 in range(0, a, rows)]

    def run(chunk):
        i0, i1 = chunk
        n = (i1 - i0) * b * c * d
        acc = np.empty((n, cout))
        acc[:] = kernel.bias
        for p in range(k):
            for q in range(k):
                w = wmats[p, q]
                if not w.any():
                    continue
                cols = windows[i0 + p:i1 + p, q:q + b].reshape(n, -1)
                acc += cols @ w
        out[i0:i1] = acc.reshape(i1 - i0, b, c, d, cout)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    else:
        for ch in chunks:
            run(ch)
    return out


def conv4d_naive(x, kernel: Conv4Kernel) -> np.ndarray:
    """Direct nested-loop 4D cross-correlation, used as a test oracle."""
    x = _as_tensor4(x)
    a, b, c, d, cin = x.shape
    if cin != kernel.in_channels:
        raise ContractViolation("channel mismatch")
    k = kernel.size
    r = k // 2
    w = kernel.weights
    out = np.zeros((a, b, c, d, kernel.out_channels))
    for i in range(a):
        for j in range(b):
            for m in range(c):
                for n in range(d):
                    acc = kernel.bias.copy()
                    for p in range(k):
                        ii = i + p - r
                        if not 0 <= ii < a:
                            continue
                        for q in range(k):
                            jj = j + q - r
                            if not 0 <= jj < b:
                                continue
                            for s in range(k):
                                mm = m + s - r
                                if not 0 <= mm < c:
                                    continue
                                for t in range(k):
                                    nn = n + t - r
                                    if not 0 <= nn < d:
                                        continue
                                    acc += w[:, :, p, q, s, t] @ x[ii, jj, mm, nn]
                    out[i, j, m, n] = acc
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def conv4d_stack(x, stack: Conv4Stack, workers: int = 1, max_elements: int | None = None) -> np.ndarray:
    """Apply every layer in order with a rectifier after all but the last."""
    x = _as_tensor4(x)
    if x.shape[-1] != 1:
        raise ContractViolation("conv4d_stack expects a single-channel input")
    last = len(stack.layers) - 1
    for n, layer in enumerate(stack.layers):
        x = conv4d(x, layer, workers=workers, max_elements=max_elements)
        if n != last:
            x = relu(x)
    return x


def transpose_pairs(x) -> np.ndarray:
    """Swap the image-A axes (a, b) with the image-B axes (c, d).

    Accepts 4-D single-channel volumes or 5-D channelled tensors.
    """
    x = np.asarray(x)
    if x.ndim == 4:
        return np.ascontiguousarray(x.transpose(2, 3, 0, 1))
    if x.ndim == 5:
        return np.ascontiguousarray(x.transpose(2, 3, 0, 1, 4))
    raise ContractViolation(f"expected a 4-D or 5-D tensor, got {x.ndim}-D")


# --- weight files -----------------------------------------------------------
# "NCNW", then per layer until end of file: u32 k, in, out; float32 weights in
# (out, in, k, k, k, k) order; float32 bias (out,).  All little-endian.

_WEIGHT_MAGIC = b"NCNW"


def save_stack(stack: Conv4Stack, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_WEIGHT_MAGIC)
        for layer in stack.layers:
            fh.write(struct.pack("<III", layer.size, layer.in_channels, layer.out_channels))
            fh.write(layer.weights.astype("<f4").tobytes())
            fh.write(layer.bias.astype("<f4").tobytes())


def load_stack(path) -> Conv4Stack:
    data = Path(path).read_bytes()
    if data[:4] != _WEIGHT_MAGIC:
        raise FileFormatError(f"{path}: not an NCNW weight file")
    try:
        off = 4
        layers = []
        while off < len(data):
            k, cin, cout = struct.unpack_from("<III", data, off)
            off += 12
            nw = cout * cin * k**4
            w = np.frombuffer(data, dtype="<f4", count=nw, offset=off)
            off += 4 * nw
            bias = np.frombuffer(data, dtype="<f4", count=cout, offset=off)
            off += 4 * cout
            layers.append(Conv4Kernel(w.reshape((cout, cin) + (k,) * 4), bias))
    except (struct.error, ValueError) as exc:
        raise FileFormatError(f"{path}: truncated or corrupt weight file ({exc})") from exc
    if not layers:
        raise FileFormatError(f"{path}: weight file has no layers")
    return Conv4Stack(tuple(layers))
