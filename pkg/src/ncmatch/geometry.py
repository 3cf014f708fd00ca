"""Relative pose from calibrated correspondences, and pose error metrics.

Conventions: a point ``X1`` in camera-1 coordinates maps to camera 2 as
``X2 = R @ X1 + t``.  Normalised image points ``x1``, ``x2`` (homogeneous)
then satisfy ``x2.T @ E @ x1 == 0`` with ``E = [t]x @ R``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import (AmbiguityError, ContractViolation, DegenerateConfigurationError,
                     EstimationFailedError)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractViolation("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ContractViolation("R is not a proper rotation matrix")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0, -z, y], [z, 0, -x], [-y, x, 0.0]])


def essential_from_pose(R, t) -> np.ndarray:
    return skew(t) @ R


def rotation_about(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


def normalize_points(pixels, K: CameraIntrinsics) -> np.ndarray:
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return np.column_stack([(p[:, 0] - K.cx) / K.fx, (p[:, 1] - K.cy) / K.fy])


def _homog(p):
    p = np.asarray(p, dtype=np.float64)
    return np.column_stack([p, np.ones(len(p))])


# --- five-point solver -------------------------------------------------------
#
# E = x X + y Y + z Z + W spans the null space of the 5x9 epipolar design
# matrix.  The rank-2 and trace constraints give ten cubics in (x, y, z),
# expressed over the 20 monomials below.  The ordering puts the monomials
# eliminated by Gauss-Jordan first, so that rows 4..9 of the reduced system
# have leading terms x^2 z, x^2, y^2 z, y^2, x y z, x y.

_MONOMIALS = [
    (3, 0, 0), (0, 3, 0), (2, 1, 0), (1, 2, 0), (2, 0, 1), (2, 0, 0), (0, 2, 1), (0, 2, 0),
    (1, 1, 1), (1, 1, 0),
    # remaining columns: x z^2, x z, x, y z^2, y z, y, z^3, z^2, z, 1
    (1, 0, 2), (1, 0, 1), (1, 0, 0), (0, 1, 2), (0, 1, 1), (0, 1, 0),
    (0, 0, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0),
]
_LINEAR = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_QUADRATIC = sorted({tuple(map(sum, zip(a, b))) for a in _LINEAR for b in _LINEAR}, reverse=True)


def _product_table(left, right, result):
    index = {m: n for n, m in enumerate(result)}
    table = np.zeros((len(left), len(right), len(result)))
    for (i, a), (j, b) in product(enumerate(left), enumerate(right)):
        table[i, j, index[tuple(map(sum, zip(a, b)))]] = 1.0
    return table


_LIN_LIN = _product_table(_LINEAR, _LINEAR, _QUADRATIC)
_QUAD_LIN = _product_table(_QUADRATIC, _LINEAR, _MONOMIALS)
_LEVI = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _LEVI[_i, _j, _k], _LEVI[_i, _k, _j] = 1.0, -1.0


def _constraint_matrix(basis: np.ndarray) -> np.ndarray:
    """Ten cubic constraints over ``_MONOMIALS`` for ``E = sum basis[n] * m_n``.

    ``basis`` has shape (4, 3, 3) for the linear monomials x, y, z, 1.
    """
    # E E^T, quadratic: (3, 3, 10)
    eet = np.einsum("arc,bsc,abq->rsq", basis, basis, _LIN_LIN)
    trace = eet[0, 0] + eet[1, 1] + eet[2, 2]
    # 2 E E^T E - tr(E E^T) E, cubic: (3, 3, 20)
    eete = np.einsum("rsq,ast,qam->rtm", eet, basis, _QUAD_LIN)
    tr_e = np.einsum("q,art,qam->rtm", trace, basis, _QUAD_LIN)
    trace_eq = 2.0 * eete - tr_e
    # det(E) = e0 . (e1 x e2)
    cross = np.einsum("ijk,aj,bk,abq->iq", _LEVI, basis[:, 1, :], basis[:, 2, :], _LIN_LIN)
    det = np.einsum("ai,iq,qam->m", basis[:, 0, :], cross, _QUAD_LIN)
    return np.vstack([det[None, :], trace_eq.reshape(9, 20)])


def _design_null_space(x1, x2):
    A = np.einsum("ni,nj->nij", x2, x1).reshape(len(x1), 9)
    _, s, vt = np.linalg.svd(A)
    if s[4] <= 1e-10 * s[0]:
        raise DegenerateConfigurationError(
            "epipolar design matrix has rank < 5 (coincident points or degenerate rays)")
    return vt[5:].reshape(4, 3, 3)


def _det3_poly(B):
    """Determinant of a 3x3 matrix of polynomial coefficient arrays (highest power first)."""
    mul, sub = np.convolve, np.polysub
    return (mul(B[0][0], sub(mul(B[1][1], B[2][2]), mul(B[1][2], B[2][1])))
            - mul(B[0][1], sub(mul(B[1][0], B[2][2]), mul(B[1][2], B[2][0])))
            + mul(B[0][2], sub(mul(B[1][0], B[2][1]), mul(B[1][1], B[2][0]))))


def _polish(coeffs, roots, steps: int = 2):
    """Newton steps on real roots; a step is kept only where it shrinks |p|."""
    dcoeffs = np.polyder(coeffs)
    z = roots.copy()
    for _ in range(steps):
        p = np.polyval(coeffs, z)
        d = np.polyval(dcoeffs, z)
        zn = z - np.divide(p, d, out=np.zeros_like(p), where=d != 0)
        better = np.abs(np.polyval(coeffs, zn)) < np.abs(p)
        z = np.where(better, zn, z)
    return z


_EXPONENTS = np.array(_MONOMIALS, dtype=float)  # (20, 3)


def _monomials_and_jacobian(v):
    """Monomial values (20,) and their gradients (20, 3) at ``v = (x, y, z)``."""
    mono = np.prod(v[None, :] ** _EXPONENTS, axis=1)
    jac = np.empty((20, 3))
    for a in range(3):
        e = _EXPONENTS.copy()
        coef = e[:, a].copy()
        e[:, a] = np.maximum(e[:, a] - 1, 0)
        jac[:, a] = coef * np.prod(v[None, :] ** e, axis=1)
    return mono, jac


def _gauss_newton(M, v, iters: int = 3, tol: float = 1e-12):
    """Polish a root of the ten cubic constraints ``M @ monomials(v) = 0``.

    Skipped when the relative residual is already below ``tol``.
    """
    r0 = np.linalg.norm(M @ _monomials_and_jacobian(v)[0])
    if r0 <= tol * np.linalg.norm(M):
        return v
    for _ in range(iters):
        mono, jac = _monomials_and_jacobian(v)
        step = np.linalg.lstsq(M @ jac, -(M @ mono), rcond=None)[0]
        vn = v + step
        rn = np.linalg.norm(M @ _monomials_and_jacobian(vn)[0])
        if not rn < r0:
            break
        v, r0 = vn, rn
    return v


def five_point(x1, x2, imag_tol: float = 1e-8) -> list[np.ndarray]:
    """Essential matrices consistent with exactly five normalised correspondences.

    Returns up to ten Frobenius-normalised candidates.  Raises
    :class:`DegenerateConfigurationError` when the points do not constrain
    a four-dimensional solution space.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != (5, 2) or x2.shape != (5, 2):
        raise ContractViolation("five_point needs exactly five 2-D correspondences per image")
    x1h, x2h = _homog(x1), _homog(x2)
    basis = _design_null_space(x1h, x2h)

    M = _constraint_matrix(basis)
    try:
        reduced = np.linalg.solve(M[:, :10], M[:, 10:])
    except np.linalg.LinAlgError as exc:
        raise DegenerateConfigurationError("singular elimination system") from exc

    # rows e..j; columns: xz^2 xz x yz^2 yz y z^3 z^2 z 1
    e, f, g, h, i, j = reduced[4:10]

    def subtract(p, q):
        # p - z q for the pair whose leading terms differ by a factor z;
        # coefficient arrays padded to degree 4
        return [
            np.array([0.0, -q[0], p[0] - q[1], p[1] - q[2], p[2]]),
            np.array([0.0, -q[3], p[3] - q[4], p[4] - q[5], p[5]]),
            np.array([-q[6], p[6] - q[7], p[7] - q[8], p[8] - q[9], p[9]]),
        ]

    B = [subtract(e, f), subtract(g, h), subtract(i, j)]
    coeffs = np.trim_zeros(_det3_poly(B), "f")
    if coeffs.size < 2:
        return []
    # companion-matrix eigenvalues
    roots = np.roots(coeffs)
    scale = np.maximum(1.0, np.abs(roots))
    roots = np.unique(roots[np.abs(roots.imag) <= imag_tol * scale].real)
    if roots.size == 0:
        return []
    roots = _polish(coeffs, roots)

    Bc = np.array(B)  # (3, 3, 5)
    powers = roots[:, None] ** np.arange(4, -1, -1)[None, :]
    Bz = np.einsum("rcp,np->nrc", Bc, powers)  # (n_roots, 3, 3)
    # [x, y, 1] spans the null space of B(z): best-conditioned cross product of two rows
    cands = np.stack([np.cross(Bz[:, 0], Bz[:, 1]), np.cross(Bz[:, 0], Bz[:, 2]),
                      np.cross(Bz[:, 1], Bz[:, 2])], axis=1)
    pick = np.abs(cands[:, :, 2]).argmax(axis=1)
    v = cands[np.arange(len(roots)), pick]
    good = np.abs(v[:, 2]) > 1e-300
    xs = v[good, 0] / v[good, 2]
    ys = v[good, 1] / v[good, 2]
    out = []
    for v in np.column_stack([xs, ys, roots[good]]):
        x, y, z = _gauss_newton(M, v)
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        out.append(E / np.linalg.norm(E))
    return out


# --- robust estimation -------------------------------------------------------


def sampson_distance(E, x1, x2) -> np.ndarray:
    """Square root of the Sampson error, in normalised image units."""
    x1h, x2h = _homog(x1), _homog(x2)
    Ex1 = x1h @ E.T
    Etx2 = x2h @ E
    num = np.einsum("ni,ni->n", x2h, Ex1)
    den = Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2
    return np.abs(num) / np.sqrt(np.maximum(den, 1e-300))


def _project_essential(E):
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt / math.sqrt(2.0)


def refine_essential(E, x1, x2) -> np.ndarray:
    """Least-squares Sampson refinement on the essential manifold.

    ``E`` is parametrised as ``U diag(1, 1, 0) V^T`` with small rotations
    applied to ``U`` and ``V``.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    S = np.diag([1.0, 1.0, 0.0])

    def build(p):
        Ur = U @ Rotation.from_rotvec(p[:3]).as_matrix()
        Vr = Vt.T @ Rotation.from_rotvec(p[3:]).as_matrix()
        Ep = Ur @ S @ Vr.T
        return Ep / np.linalg.norm(Ep)

    def resid(p):
        return sampson_distance(build(p), x1, x2)

    sol = least_squares(resid, np.zeros(6), method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                        max_nfev=200)
    return build(sol.x)


def _iterations_needed(inlier_ratio, confidence, sample=5):
    good = inlier_ratio**sample
    if good <= 0:
        return math.inf
    if good >= 1:
        return 1
    return math.log(1 - confidence) / math.log(1 - good)


def ransac_essential(x1, x2, threshold: float = 1e-3, confidence: float = 0.999,
                     max_iter: int = 1000, seed: int = 0, refine: bool = True):
    """Robust essential-matrix estimate with five-point hypotheses.

    Hypotheses are scored by the number of correspondences whose Sampson
    distance is below ``threshold``, ties broken by the truncated residual
    sum.  The sampling sequence is fixed by ``seed``.  The best model is
    refined on its inliers and the refit is kept only if it loses no
    support and does not raise the truncated residual sum.

    Returns ``(E, inlier_mask)``.  Raises :class:`DegenerateConfigurationError`
    if every sample was degenerate and :class:`EstimationFailedError` if no
    hypothesis reached five inliers.
    """
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    n = len(x1)
    if n < 5 or len(x2) != n:
        raise ContractViolation(f"need at least 5 matched pairs, got {n}")
    if threshold <= 0 or not 0 < confidence < 1:
        raise ContractViolation("threshold must be > 0 and confidence in (0, 1)")
    rng = np.random.default_rng(seed)
    best_E, best_mask, best_count, best_cost = None, None, -1, math.inf
    needed = max_iter
    it = n_degenerate = 0
    while it < min(needed, max_iter):
        it += 1
        idx = rng.choice(n, 5, replace=False)
        try:
            cands = five_point(x1[idx], x2[idx])
        except DegenerateConfigurationError:
            n_degenerate += 1
            continue
        for E in cands:
            d = sampson_distance(E, x1, x2)
            mask = d < threshold
            count = int(mask.sum())
            cost = float(np.minimum(d, threshold).sum())
            if count > best_count or (count == best_count and cost < best_cost):
                best_E, best_mask, best_count, best_cost = E, mask, count, cost
                needed = _iterations_needed(count / n, confidence)
    if n_degenerate == it:
        raise DegenerateConfigurationError(f"all {it} minimal samples were degenerate")
    if best_E is None or best_count < 5:
        raise EstimationFailedError(f"no model with at least 5 inliers ({max(best_count, 0)} found)")

    # a minimal set fits exactly and leaves the 6-parameter refit underdetermined
    if refine and best_count > 5:
        E_ref = refine_essential(best_E, x1[best_mask], x2[best_mask])
        d = sampson_distance(E_ref, x1, x2)
        mask = d < threshold
        # a least-squares refit can be dragged by near-threshold outliers, so it
        # has to win under the same score as the hypotheses
        if mask.sum() >= best_count and np.minimum(d, threshold).sum() <= best_cost:
            best_E, best_mask = E_ref, mask
    return best_E, best_mask


# --- decomposition -----------------------------------------------------------


def _depths(R, t, x1h, x2h):
    """Depths (l1, l2) solving l2 x2 = l1 R x1 + t in the least-squares sense."""
    a = x1h @ R.T  # R x1
    b = -x2h
    # normal equations for [a b] [l1 l2]^T = -t
    aa = np.einsum("ni,ni->n", a, a)
    bb = np.einsum("ni,ni->n", b, b)
    ab = np.einsum("ni,ni->n", a, b)
    at = a @ -t
    bt = b @ -t
    det = aa * bb - ab * ab
    safe = np.where(np.abs(det) > 1e-15, det, np.nan)
    l1 = (bb * at - ab * bt) / safe
    l2 = (aa * bt - ab * at) / safe
    return l1, l2


def pose_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    Wm = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]])
    R1 = U @ Wm @ Vt
    R2 = U @ Wm.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_essential(E, x1, x2) -> Pose:
    """The candidate (R, t) placing the most inliers in front of both cameras."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    if len(x1) < 1 or len(x1) != len(x2):
        raise ContractViolation("decomposition needs at least one inlier pair")
    x1h, x2h = _homog(x1), _homog(x2)
    counts = []
    cands = pose_candidates(np.asarray(E, dtype=np.float64))
    for R, t in cands:
        l1, l2 = _depths(R, t, x1h, x2h)
        counts.append(int(np.sum((l1 > 0) & (l2 > 0))))
    order = np.argsort(counts)[::-1]
    if counts[order[0]] == counts[order[1]]:
        raise AmbiguityError(
            f"cheirality tie between pose candidates (counts {counts})",
            [(cands[k], counts[k]) for k in order if counts[k] == counts[order[0]]],
        )
    R, t = cands[order[0]]
    return Pose(R, t / np.linalg.norm(t))


# --- error metrics -----------------------------------------------------------


def rotation_error(R, R_hat) -> float:
    """Angle of ``dR = R^-1 R_hat`` in radians, i.e. ``acos((tr(dR) - 1) / 2)``.

    Evaluated as ``atan2(sin, cos)`` with the sine taken from the
    antisymmetric part of ``dR``; ``acos`` alone loses all precision for
    angles below about 1e-8.
    """
    dR = np.asarray(R).T @ np.asarray(R_hat)
    cos = (np.trace(dR) - 1.0) / 2.0
    sin = 0.5 * math.sqrt((dR[2, 1] - dR[1, 2]) ** 2 + (dR[0, 2] - dR[2, 0]) ** 2
                          + (dR[1, 0] - dR[0, 1]) ** 2)
    return float(math.atan2(sin, min(1.0, max(-1.0, cos))))


def rotation_error_acos(R, R_hat) -> float:
    """The same angle through the clamped arccos of the trace."""
    dR = np.asarray(R).T @ np.asarray(R_hat)
    cos = (np.trace(dR) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, cos))))


def translation_error(T, T_hat) -> float:
    """Distance between ``T`` and ``T_hat`` rescaled to the length of ``T``.

    A zero ground-truth translation gives 0 by convention.
    """
    T = np.asarray(T, dtype=np.float64)
    T_hat = np.asarray(T_hat, dtype=np.float64)
    nh = np.linalg.norm(T_hat)
    if nh == 0:
        raise ContractViolation("estimated translation has zero length")
    n = np.linalg.norm(T)
    if n == 0:
        return 0.0
    return float(np.linalg.norm(T_hat * (n / nh) - T))


@dataclass(frozen=True)
class PoseErrors:
    r_err: float
    t_err: float


@dataclass(frozen=True)
class BinRatio:
    lo: float
    hi: float
    n_pairs: int
    rot_success: float | None
    trans_success: float | None

    @property
    def empty(self) -> bool:
        return self.n_pairs == 0


def success_ratios(results, theta_r: float, theta_t: float, bins) -> list[BinRatio]:
    """Fraction of successful estimates per ground-truth distance bin.

    ``results`` holds ``(PoseErrors | None, gt_distance)``; ``None`` marks a
    failed estimation and counts as a failure.  Bins are half-open
    ``[lo, hi)``; empty bins report ``None`` ratios.
    """
    edges = list(bins)
    if any(b >= a for a, b in zip(edges[1:], edges[:-1])) or len(edges) < 2:
        raise ContractViolation("bin edges must be strictly increasing")
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = [(e, dist) for e, dist in results if lo <= dist < hi]
        if not sel:
            out.append(BinRatio(lo, hi, 0, None, None))
            continue
        rot = sum(1 for e, _ in sel if e is not None and e.r_err < theta_r)
        tr = sum(1 for e, dist in sel if e is not None and e.t_err < theta_t * dist)
        out.append(BinRatio(lo, hi, len(sel), rot / len(sel), tr / len(sel)))
    return out


ERROR_COLUMNS = ["pair_id", "distance_m", "r_err_deg", "t_err_m", "n_matches", "n_inliers",
                 "status"]


def write_error_rows(rows, fh) -> None:
    """Per-pair CSV; ``rows`` are dicts keyed by :data:`ERROR_COLUMNS`."""
    w = csv.DictWriter(fh, fieldnames=ERROR_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in ERROR_COLUMNS})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
