"""Keypoint response decoding, non-maximum suppression and per-block selection.

A cell keypoint tensor has shape ``(H/8, W/8, 65)``.  Channel ``8*dy + dx``
holds the logit for pixel ``(dx, dy)`` of the cell's 8x8 block; channel 64
is the "no keypoint" dustbin.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, FileFormatError

CELL = 8
CHANNELS = CELL * CELL + 1


@dataclass(frozen=True)
class Keypoint:
    """A detected keypoint in pixel coordinates.

    ``descriptor`` is optional; producers that already know a keypoint's
    descriptor (e.g. synthetic scenes) can attach it and refinement will use
    it instead of interpolating the coarse map.
    """

    x: float
    y: float
    response: float
    descriptor: np.ndarray | None = field(default=None, compare=False, repr=False)


def decode_response(logits) -> np.ndarray:
    """Per-cell 65-way softmax, dustbin dropped, scattered to full resolution."""
    t = np.asarray(logits, dtype=np.float64)
    if t.ndim != 3 or t.shape[2] != CHANNELS or t.shape[0] < 1 or t.shape[1] < 1:
        raise ContractViolation(f"cell tensor must be (h8, w8, 65), got {t.shape}")
    z = t - t.max(axis=2, keepdims=True)
    e = np.exp(z)
    prob = e / e.sum(axis=2, keepdims=True)
    h8, w8 = t.shape[:2]
    pix = prob[..., :64].reshape(h8, w8, CELL, CELL)  # (cy, cx, dy, dx)
    return pix.transpose(0, 2, 1, 3).reshape(h8 * CELL, w8 * CELL)


def nms(response, radius: int = 4, threshold: float = 0.015) -> list[Keypoint]:
    """Greedy suppression in a Chebyshev window of the given radius.

    Candidates are visited by descending response, ties broken by ``(y, x)``.
    """
    if radius < 1:
        raise ContractViolation("nms radius must be >= 1")
    if not 0.0 <= threshold <= 1.0:
        raise ContractViolation("nms threshold must lie in [0, 1]")
    r = np.asarray(response, dtype=np.float64)
    H, W = r.shape
    ys, xs = np.nonzero(r >= threshold)
    if ys.size == 0:
        return []
    vals = r[ys, xs]
    order = np.lexsort((xs, ys, -vals))
    suppressed = np.zeros((H, W), dtype=bool)
    out = []
    for n in order:
        y, x = int(ys[n]), int(xs[n])
        if suppressed[y, x]:
            continue
        # zero-valued pixels never qualify even at threshold 0
        if vals[n] <= 0.0:
            continue
        out.append(Keypoint(x, y, float(vals[n])))
        suppressed[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = True
    return out


def keypoint_map(shape, keypoints) -> np.ndarray:
    """Response map holding only the given keypoints."""
    m = np.zeros(shape)
    for kp in keypoints:
        m[int(kp.y), int(kp.x)] = kp.response
    return m


def top_k_per_block(shape, keypoints, block: int = 16, k: int = 4) -> dict:
    """Group keypoints by ``block``-sized tiles and keep the ``k`` strongest.

    ``shape`` is the ``(H, W)`` of the response map.  Returns a dict mapping
    every tile index ``(row, col)`` to a list sorted by descending response.
    """
    H, W = shape
    rows, cols = -(-H // block), -(-W // block)
    groups = {(i, j): [] for i in range(rows) for j in range(cols)}
    for kp in keypoints:
        key = (int(kp.y) // block, int(kp.x) // block)
        if key not in groups:
            raise ContractViolation(f"keypoint ({kp.x}, {kp.y}) outside a {H}x{W} map")
        groups[key].append(kp)
    for key, kps in groups.items():
        kps.sort(key=lambda p: (-p.response, p.y, p.x))
        del kps[k:]
    return groups


# --- cell keypoint tensor files --------------------------------------------
# "KPT6", u32 h8, w8, then float32 logits row-major (h8, w8, 65).

_KPT_MAGIC = b"KPT6"


def save_cell_tensor(logits, path) -> None:
    t = np.asarray(logits)
    with open(path, "wb") as fh:
        fh.write(_KPT_MAGIC)
        fh.write(struct.pack("<II", t.shape[0], t.shape[1]))
        fh.write(t.astype("<f4").tobytes())


def load_cell_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _KPT_MAGIC or len(data) < 12:
        raise FileFormatError(f"{path}: not a KPT6 keypoint tensor file")
    h8, w8 = struct.unpack_from("<II", data, 4)
    n = h8 * w8 * CHANNELS
    if n == 0 or len(data) != 12 + 4 * n:
        raise FileFormatError(f"{path}: expected {n} float32 values for {h8}x{w8}x65")
    t = np.frombuffer(data, dtype="<f4", offset=12).reshape(h8, w8, CHANNELS).astype(np.float64)
    if not np.all(np.isfinite(t)):
        raise FileFormatError(f"{path}: non-finite logits")
    return t
