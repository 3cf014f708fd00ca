"""Posed images, pair selection, hand-crafted dense features and synthetic scenes."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from .consensus import DescriptorMap
from .errors import FileFormatError, GenerationError
from .geometry import CameraIntrinsics, Pose, rotation_error
from .keypoints import CELL, CHANNELS

REFERENCE_TRAVERSAL = "overcast-reference"
BLOCK = 16


# --- images ------------------------------------------------------------------


def load_pgm(path) -> np.ndarray:
    """8-bit grayscale PGM as floats in [0, 1], zero-padded to multiples of 16."""
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "L":
                raise FileFormatError(f"{path}: expected an 8-bit grayscale PGM, got {im.format}/{im.mode}")
            img = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise FileFormatError(f"{path}: cannot read image ({exc})") from exc
    return pad_to_block(img)


def save_pgm(img, path) -> None:
    a = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(a, mode="L").save(path, format="PPM")


def pad_to_block(img, block: int = BLOCK) -> np.ndarray:
    H, W = img.shape
    return np.pad(img, ((0, -H % block), (0, -W % block)))


# --- poses -------------------------------------------------------------------


@dataclass(frozen=True)
class PosedImage:
    """Image metadata with a world-to-camera pose."""

    id: str
    pose: Pose
    intrinsics: CameraIntrinsics
    traversal: str


def camera_center(p: Pose) -> np.ndarray:
    return -p.R.T @ p.t


def optical_axis(p: Pose) -> np.ndarray:
    """Viewing direction in world coordinates (third row of R)."""
    return p.R[2].copy()


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Transform taking camera-``a`` coordinates to camera-``b`` coordinates."""
    R = b.R @ a.R.T
    return Pose(_orthonormalize(R), b.t - R @ a.t)


def _orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


@dataclass(frozen=True)
class ImagePair:
    """Reference image A and query image B with their ground-truth relative pose."""

    ref: PosedImage
    query: PosedImage

    @property
    def gt_relative(self) -> Pose:
        return relative_pose(self.ref.pose, self.query.pose)

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(camera_center(self.ref.pose) - camera_center(self.query.pose)))


def axis_angle(a: Pose, b: Pose) -> float:
    c = float(np.dot(optical_axis(a), optical_axis(b)))
    return math.acos(min(1.0, max(-1.0, c)))


def select_close_pairs(reference, query, d_max: float = 10.0, a_max: float = math.pi / 4):
    """All (reference, query) pairs with centres closer than ``d_max`` metres
    and optical axes within ``a_max`` radians."""
    out = []
    for q in query:
        cq = camera_center(q.pose)
        for r in reference:
            if (np.linalg.norm(cq - camera_center(r.pose)) < d_max
                    and axis_angle(q.pose, r.pose) < a_max):
                out.append(ImagePair(r, q))
    return out


def label_pair(a: PosedImage, b: PosedImage, d_thr: float = 5.0,
               r_thr: float = math.radians(30.0)) -> int:
    """1 for a similar pair (both thresholds met), else 0."""
    dist = np.linalg.norm(camera_center(a.pose) - camera_center(b.pose))
    ang = rotation_error(a.pose.R, b.pose.R)
    return int(dist < d_thr and ang < r_thr)


POSE_COLUMNS = ["id", "traversal", "qw", "qx", "qy", "qz", "tx", "ty", "tz",
                "fx", "fy", "cx", "cy"]


def read_poses(path) -> list[PosedImage]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != POSE_COLUMNS:
            raise FileFormatError(f"{path}: header must be {','.join(POSE_COLUMNS)}")
        for n, row in enumerate(reader, start=2):
            try:
                q = np.array([float(row[k]) for k in ("qw", "qx", "qy", "qz")])
                t = np.array([float(row[k]) for k in ("tx", "ty", "tz")])
                K = CameraIntrinsics(*(float(row[k]) for k in ("fx", "fy", "cx", "cy")))
            except (TypeError, ValueError) as exc:
                raise FileFormatError(f"{path}:{n}: {exc}") from exc
            if abs(np.linalg.norm(q) - 1.0) > 1e-6:
                raise FileFormatError(f"{path}:{n}: quaternion is not unit length")
            R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
            out.append(PosedImage(row["id"].strip(), Pose(R, t), K, row["traversal"].strip()))
    return out


def write_poses(images, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_COLUMNS)
        for im in images:
            x, y, z, qw = Rotation.from_matrix(im.pose.R).as_quat()
            if qw < 0:
                x, y, z, qw = -x, -y, -z, -qw
            K = im.intrinsics
            w.writerow([im.id, im.traversal] + [repr(float(v)) for v in
                        (qw, x, y, z, *im.pose.t, K.fx, K.fy, K.cx, K.cy)])


# --- hand-crafted dense features --------------------------------------------


def _gaussian_window(sigma):
    c = (BLOCK - 1) / 2
    g = np.exp(-((np.arange(BLOCK) - c) ** 2) / (2 * sigma**2))
    return np.outer(g, g)


def handcrafted_descriptor_map(img, n_orient: int = 8, grid: int = 4) -> DescriptorMap:
    """Gradient-orientation histograms per 16x16 block, 256 values per cell.

    Each block is split into ``grid x grid`` sub-cells with ``n_orient``
    orientation bins.  The 128-bin histogram is computed twice, once under a
    wide and once under a narrow Gaussian centred on the block, and the two
    are concatenated.  The result is normalised, clamped at 0.2 and
    normalised again.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    if H % BLOCK or W % BLOCK or H == 0 or W == 0:
        raise ValueError(f"image dims must be positive multiples of {BLOCK}, got {img.shape}")
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    ori = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    obin = np.minimum((ori * n_orient / (2 * np.pi)).astype(int), n_orient - 1)
    h, w = H // BLOCK, W // BLOCK
    sub = BLOCK // grid
    py, px = np.mgrid[0:BLOCK, 0:BLOCK]
    sub_idx = (py // sub) * grid + (px // sub)  # per in-block pixel
    nbins = grid * grid * n_orient

    def blocks(a):
        return a.reshape(h, BLOCK, w, BLOCK).transpose(0, 2, 1, 3)

    cell_idx = np.arange(h * w).reshape(h, w)[:, :, None, None]
    flat_idx = (cell_idx * nbins + sub_idx * n_orient + blocks(obin)).ravel()
    hists = []
    for sigma in (BLOCK / 2, BLOCK / 5):
        weights = (blocks(mag) * _gaussian_window(sigma)).ravel()
        hists.append(np.bincount(flat_idx, weights, minlength=h * w * nbins).reshape(h, w, nbins))
    d = np.concatenate(hists, axis=2)
    norm = np.linalg.norm(d, axis=2, keepdims=True)
    d = np.divide(d, norm, out=np.zeros_like(d), where=norm > 1e-12)
    d = np.minimum(d, 0.2)
    # DescriptorMap renormalises and maps all-zero cells to the uniform vector
    return DescriptorMap(d)


def handcrafted_cell_logits(img, gain: float = 10.0, dustbin: float = 3.0,
                            sigma: float = 1.5, k: float = 0.04) -> np.ndarray:
    """Corner-response stand-in for a learned ``(H/8, W/8, 65)`` keypoint head.

    Pixel logits are ``gain`` times the Harris response scaled to [0, 1];
    the dustbin logit is constant, so flat regions decode to responses of
    ``1 / (64 + e^dustbin)``.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape
    if H % CELL or W % CELL:
        raise ValueError(f"image dims must be multiples of {CELL}")
    gy, gx = np.gradient(img)
    sxx = gaussian_filter(gx * gx, sigma)
    syy = gaussian_filter(gy * gy, sigma)
    sxy = gaussian_filter(gx * gy, sigma)
    resp = np.maximum(sxx * syy - sxy**2 - k * (sxx + syy) ** 2, 0.0)
    resp = resp / (resp.max() + 1e-10)
    h8, w8 = H // CELL, W // CELL
    pix = (gain * resp).reshape(h8, CELL, w8, CELL).transpose(0, 2, 1, 3).reshape(h8, w8, 64)
    return np.concatenate([pix, np.full((h8, w8, 1), dustbin)], axis=2)


# --- synthetic scenes ----------------------------------------------------------

SYNTH_SIZE = (256, 192)  # width, height
SYNTH_INTRINSICS = CameraIntrinsics(400.0, 400.0, 127.5, 95.5)


@dataclass
class SyntheticScene:
    """A posed image pair with planted pixel correspondences.

    ``xA``/``xB`` are ``(n, 2)`` pixel arrays; ``inlier`` marks
    correspondences that are true projections (possibly noisy) of one 3D
    point.  ``descriptors`` are per-correspondence unit vectors shared by both
    views.
    """

    pair: ImagePair
    xA: np.ndarray
    xB: np.ndarray
    inlier: np.ndarray
    descriptors: np.ndarray
    points: np.ndarray = field(repr=False)


def _project(R, t, X, K):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    return np.column_stack([u, v]), z


def _visible(px, z, size):
    W, H = size
    return (z > 0) & (px[:, 0] >= 0) & (px[:, 0] <= W - 1) & (px[:, 1] >= 0) & (px[:, 1] <= H - 1)


def synth_scene(seed: int, n_points: int = 200, noise_px: float = 0.0,
                outlier_ratio: float = 0.0, desc_dim: int = 16,
                origin=(0.0, 0.0, 0.0), pair_id: str = "pair",
                max_attempts: int = 100) -> SyntheticScene:
    """Two random cameras (baseline 0.5-10 m, relative rotation <= 30 deg)
    observing ``n_points`` random 3D points visible in both.

    Pixel noise is isotropic Gaussian with standard deviation ``noise_px``
    in both images.  A fraction ``outlier_ratio`` of the correspondences has
    its B position replaced by a uniformly random pixel.
    """
    if n_points < 8:
        raise ValueError("n_points must be at least 8")
    rng = np.random.default_rng(seed)
    K = SYNTH_INTRINSICS
    origin = np.asarray(origin, dtype=np.float64)
    for _ in range(max_attempts):
        RA = Rotation.from_rotvec(rng.normal(size=3) * 0.5).as_matrix()
        CA = origin + rng.normal(size=3)
        depth = rng.uniform(12.0, 40.0)
        target = CA + RA[2] * depth + rng.normal(size=3)
        baseline = rng.uniform(0.5, 10.0)
        d = rng.normal(size=3)
        CB = CA + baseline * d / np.linalg.norm(d)
        # RA[1] is the camera "down" axis in world coordinates
        up_A = -RA[1]
        z = target - CB
        z /= np.linalg.norm(z)
        x = np.cross(-up_A, z)
        if np.linalg.norm(x) < 1e-9:
            continue
        x /= np.linalg.norm(x)
        RB = np.vstack([x, np.cross(z, x), z])
        RB = Rotation.from_rotvec([0, 0, rng.uniform(-0.2, 0.2)]).as_matrix() @ RB
        if rotation_error(RA, RB) > math.radians(30.0):
            continue
        tA, tB = -RA @ CA, -RB @ CB

        # candidate points: random pixel rays of A at random depths
        m = 20 * n_points
        uv = rng.uniform([0, 0], [SYNTH_SIZE[0] - 1, SYNTH_SIZE[1] - 1], size=(m, 2))
        zs = rng.uniform(0.4 * depth, 2.0 * depth, size=m)
        rays = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(m)])
        X = (rays * zs[:, None] - tA) @ RA  # camera A -> world
        pB, zB = _project(RB, tB, X, K)
        ok = _visible(pB, zB, SYNTH_SIZE)
        if ok.sum() < n_points:
            continue
        X = X[ok][:n_points]
        xA, _ = _project(RA, tA, X, K)
        xB, _ = _project(RB, tB, X, K)
        if noise_px > 0:
            xA = xA + rng.normal(scale=noise_px, size=xA.shape)
            xB = xB + rng.normal(scale=noise_px, size=xB.shape)
        inlier = np.ones(n_points, dtype=bool)
        n_out = int(round(outlier_ratio * n_points))
        if n_out:
            idx = rng.choice(n_points, n_out, replace=False)
            xB[idx] = rng.uniform([0, 0], [SYNTH_SIZE[0] - 1, SYNTH_SIZE[1] - 1], size=(n_out, 2))
            inlier[idx] = False
        desc = rng.normal(size=(n_points, desc_dim))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        ref = PosedImage(f"{pair_id}_ref", Pose(RA, tA), K, REFERENCE_TRAVERSAL)
        qry = PosedImage(f"{pair_id}_qry", Pose(RB, tB), K, "synthetic")
        return SyntheticScene(ImagePair(ref, qry), xA, xB, inlier, desc, X)
    raise GenerationError(f"no overlapping camera pair found in {max_attempts} attempts")


CORRESPONDENCE_FILE = "correspondences.jsonl"
POSE_FILE = "poses.csv"


def write_synthetic_dump(scenes, out_dir) -> None:
    """Pose CSV plus one JSON line per planted correspondence."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for sc in scenes:
        images += [sc.pair.ref, sc.pair.query]
    write_poses(images, out / POSE_FILE)
    with open(out / CORRESPONDENCE_FILE, "w", encoding="utf-8") as fh:
        for sc in scenes:
            for n in range(len(sc.xA)):
                fh.write(json.dumps({
                    "ref_id": sc.pair.ref.id, "query_id": sc.pair.query.id,
                    "xA": float(sc.xA[n, 0]), "yA": float(sc.xA[n, 1]),
                    "xB": float(sc.xB[n, 0]), "yB": float(sc.xB[n, 1]),
                    "inlier": bool(sc.inlier[n]),
                    "descriptor": [float(v) for v in sc.descriptors[n]],
                }) + "\n")


def read_planted(path) -> dict:
    """Planted correspondences grouped by ``(ref_id, query_id)``.

    Each value is a dict of arrays ``xA``, ``xB``, ``inlier``, ``descriptors``.
    """
    groups: dict = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                key = (r["ref_id"], r["query_id"])
                g = groups.setdefault(key, {"xA": [], "xB": [], "inlier": [], "descriptors": []})
                g["xA"].append((float(r["xA"]), float(r["yA"])))
                g["xB"].append((float(r["xB"]), float(r["yB"])))
                g["inlier"].append(bool(r.get("inlier", True)))
                g["descriptors"].append([float(v) for v in r["descriptor"]])
            except (KeyError, TypeError, ValueError) as exc:
                raise FileFormatError(f"{path}:{n}: {exc}") from exc
    return {k: {name: np.array(v) for name, v in g.items()} for k, g in groups.items()}
