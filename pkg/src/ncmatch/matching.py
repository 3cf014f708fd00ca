"""Cell-level matches, pixel-level refinement and a KNN ratio-test baseline."""

from __future__ import annotations

import json
from typing import NamedTuple

import numpy as np

from .consensus import DescriptorMap, normalize_rows
from .errors import ContractViolation


class CoarseMatch(NamedTuple):
    cellA: tuple
    cellB: tuple
    score: float


class Correspondence(NamedTuple):
    pA: tuple
    pB: tuple
    score: float


def coarse_matches(filtered, min_score: float = 0.0) -> list[CoarseMatch]:
    """For every A cell, the B cell with the highest filtered score.

    ``argmax`` returns the first maximum in row-major order, which gives the
    ``(k, l)`` ascending tie-break.
    """
    f = np.asarray(filtered, dtype=np.float64)
    if f.ndim != 4:
        raise ContractViolation(f"expected a single-channel 4-D volume, got {f.shape}")
    hA, wA, hB, wB = f.shape
    flat = f.reshape(hA, wA, hB * wB)
    best = flat.argmax(axis=2)
    vals = np.take_along_axis(flat, best[..., None], axis=2)[..., 0]
    out = []
    for i in range(hA):
        for j in range(wA):
            if vals[i, j] >= min_score:
                k, l = divmod(int(best[i, j]), wB)
                out.append(CoarseMatch((i, j), (k, l), float(vals[i, j])))
    return out


def interpolate_descriptors(fmap: DescriptorMap, xs, ys) -> np.ndarray:
    """Bilinear sample of the descriptor grid at pixel positions, renormalised.

    Cell ``(i, j)`` is anchored at its block centre ``(16 j + 7.5, 16 i + 7.5)``;
    positions outside the span of centres clamp to the border cells.
    """
    desc = fmap.descriptors
    h, w = fmap.shape
    cell = fmap.cell
    u = np.clip((np.asarray(xs, dtype=np.float64) - (cell - 1) / 2) / cell, 0, w - 1)
    v = np.clip((np.asarray(ys, dtype=np.float64) - (cell - 1) / 2) / cell, 0, h - 1)
    u0 = np.minimum(np.floor(u).astype(int), max(w - 2, 0))
    v0 = np.minimum(np.floor(v).astype(int), max(h - 2, 0))
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    d = ((1 - dv) * ((1 - du) * desc[v0, u0] + du * desc[v0, u1])
         + dv * ((1 - du) * desc[v1, u0] + du * desc[v1, u1]))
    return normalize_rows(d)


def _keypoint_descriptors(kps, fmap):
    if all(kp.descriptor is not None for kp in kps):
        return normalize_rows(np.array([kp.descriptor for kp in kps], dtype=np.float64))
    return interpolate_descriptors(fmap, [kp.x for kp in kps], [kp.y for kp in kps])


def refine_matches(coarse, kpsA: dict, kpsB: dict, fA: DescriptorMap, fB: DescriptorMap,
                   mutual: bool = True) -> list[Correspondence]:
    """Match keypoints inside each pair of coarsely matched cells.

    ``kpsA``/``kpsB`` map cell indices to keypoint lists (see
    :func:`ncmatch.keypoints.top_k_per_block`).  With ``mutual=True`` only
    reciprocal nearest neighbours are kept; otherwise every A keypoint is
    paired with its nearest B keypoint.  Each correspondence is scored by
    coarse score times descriptor similarity.
    """
    out = []
    for m in coarse:
        a = kpsA.get(tuple(m.cellA), [])
        b = kpsB.get(tuple(m.cellB), [])
        if not a or not b:
            continue
        da = _keypoint_descriptors(a, fA)
        db = _keypoint_descriptors(b, fB)
        sim = da @ db.T
        nn_ab = sim.argmax(axis=1)
        nn_ba = sim.argmax(axis=0)
        for ia, ib in enumerate(nn_ab):
            if mutual and nn_ba[ib] != ia:
                continue
            out.append(Correspondence((a[ia].x, a[ia].y), (b[ib].x, b[ib].y),
                                      float(m.score * sim[ia, ib])))
    return out


def knn_ratio_match(descA, descB, ratio: float = 0.75) -> list[tuple[int, int]]:
    """Nearest-neighbour matching filtered by the distance-ratio test.

    A query is kept when its nearest distance is strictly below ``ratio``
    times the second-nearest.  Ties resolve to the lower B index.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractViolation(f"ratio must lie in (0, 1], got {ratio}")
    A = np.asarray(descA, dtype=np.float64)
    B = np.asarray(descB, dtype=np.float64)
    if len(A) == 0 or len(B) < 2:
        return []
    # squared distances, clipped against tiny negative round-off
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    order = np.argsort(dist, axis=1, kind="stable")
    rows = np.arange(len(A))
    d1 = dist[rows, order[:, 0]]
    d2nd = dist[rows, order[:, 1]]
    keep = d1 < ratio * d2nd
    return [(int(i), int(order[i, 0])) for i in np.nonzero(keep)[0]]


def write_correspondences(corrs, fh) -> None:
    """One JSON object per line: ``{xA, yA, xB, yB, score}``."""
    for c in corrs:
        fh.write(json.dumps({"xA": c.pA[0], "yA": c.pA[1], "xB": c.pB[0],
                             "yB": c.pB[1], "score": c.score}) + "\n")


def read_correspondences(fh) -> list[Correspondence]:
    out = []
    for line in fh:
        if line.strip():
            r = json.loads(line)
            out.append(Correspondence((r["xA"], r["yA"]), (r["xB"], r["yB"]), r["score"]))
    return out
