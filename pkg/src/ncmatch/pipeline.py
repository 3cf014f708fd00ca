"""End-to-end matching and relative-pose evaluation built from the library modules."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import consensus, dataset, geometry, keypoints, matching
from .consensus import DescriptorMap
from .errors import (AmbiguityError, ContractViolation, DegenerateConfigurationError,
                     EstimationFailedError, FileFormatError)
from .tensor4d import MAX_ELEMENTS, Conv4Stack, load_stack


class NoPairsError(RuntimeError):
    """Pair selection produced nothing to evaluate."""


@dataclass
class RunConfig:
    descriptors: str = "handcrafted"  # or "file:DIR"
    ncn_weights: str = "seed:0"  # or "file:PATH"
    ncn_repeats: int = 1
    nms_radius: int = 4
    nms_threshold: float = 0.015
    n_keypoints: int = 1000
    per_block: int = 4
    mutual: bool = True
    min_score: float = 0.0
    ratio: float = 0.75
    ransac_seed: int = 0
    ransac_threshold: float = 1e-3
    ransac_confidence: float = 0.999
    ransac_max_iter: int = 1000
    theta_r_deg: float = 5.0
    theta_t: float = 0.1
    bins: tuple = (0.0, 1.0, 2.0, 3.0, 5.0, 7.0, 10.0)
    max_elements: int = MAX_ELEMENTS
    workers: int = 1

    def __post_init__(self):
        self.bins = tuple(float(b) for b in self.bins)
        checks = [
            (self.descriptors == "handcrafted" or self.descriptors.startswith("file:"),
             "descriptors must be 'handcrafted' or 'file:DIR'"),
            (self.ncn_weights.startswith(("seed:", "file:")), "ncn_weights must be 'seed:N' or 'file:PATH'"),
            (self.ncn_repeats >= 1, "ncn_repeats must be >= 1"),
            (self.nms_radius >= 1, "nms_radius must be >= 1"),
            (0.0 <= self.nms_threshold <= 1.0, "nms_threshold must lie in [0, 1]"),
            (self.n_keypoints >= 1, "n_keypoints must be >= 1"),
            (self.per_block >= 1, "per_block must be >= 1"),
            (0.0 < self.ratio <= 1.0, "ratio must lie in (0, 1]"),
            (self.ransac_threshold > 0, "ransac_threshold must be > 0"),
            (0.0 < self.ransac_confidence < 1.0, "ransac_confidence must lie in (0, 1)"),
            (self.ransac_max_iter >= 1, "ransac_max_iter must be >= 1"),
            (0.0 < self.theta_r_deg <= 180.0, "theta_r_deg must lie in (0, 180]"),
            (self.theta_t > 0, "theta_t must be > 0"),
            (len(self.bins) >= 2 and all(b > a for a, b in zip(self.bins, self.bins[1:])),
             "bins must be strictly increasing with at least two edges"),
            (self.max_elements >= 1, "max_elements must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ContractViolation(msg)

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        """Read flat ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FileFormatError(f"{path}:{n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in types:
                raise FileFormatError(f"{path}:{n}: unknown key {key!r}")
            values[key] = _parse_value(types[key], val, f"{path}:{n}")
        values.update(overrides)
        return cls(**values)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @property
    def theta_r(self) -> float:
        return math.radians(self.theta_r_deg)


def _parse_value(typ, val, where):
    try:
        if typ == "bool":
            if val.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(val)
            return val.lower() in ("true", "1", "yes")
        if typ == "int":
            return int(val)
        if typ == "float":
            return float(val)
        if typ == "tuple":
            return tuple(float(x) for x in val.split(",") if x.strip())
        return val
    except ValueError as exc:
        raise FileFormatError(f"{where}: bad value {val!r}") from exc


def load_ncn_stack(spec: str) -> Conv4Stack:
    kind, _, arg = spec.partition(":")
    if kind == "seed":
        return Conv4Stack.seeded(int(arg))
    if kind == "file":
        return load_stack(arg)
    raise ContractViolation(f"unknown ncn weight source {spec!r}")


# --- image matching ------------------------------------------------------------


@dataclass
class MatchResult:
    correspondences: list
    coarse: list
    summary: dict = field(default_factory=dict)


def image_features(img, name: str, config: RunConfig):
    """Descriptor map and 65-channel keypoint logits for a padded image."""
    if config.descriptors == "handcrafted":
        return dataset.handcrafted_descriptor_map(img), dataset.handcrafted_cell_logits(img)
    root = Path(config.descriptors[len("file:"):])
    fmap = consensus.load_descriptor_map(root / f"{name}.dmap")
    kpt = root / f"{name}.kpt"
    logits = keypoints.load_cell_tensor(kpt) if kpt.exists() else dataset.handcrafted_cell_logits(img)
    return fmap, logits


def match_features(fA: DescriptorMap, fB: DescriptorMap, kpsA: list, kpsB: list,
                   shapeA, shapeB, config: RunConfig, stack: Conv4Stack | None = None) -> MatchResult:
    """Coarse consensus matching followed by in-cell keypoint refinement."""
    stack = stack if stack is not None else load_ncn_stack(config.ncn_weights)
    consensus.check_stack_capacity(fA.shape + fB.shape, stack, config.max_elements)
    corr = consensus.correlate(fA, fB, config.max_elements)
    filtered = consensus.ncn_filter(corr, stack, repeats=config.ncn_repeats,
                                    workers=config.workers, max_elements=config.max_elements)
    coarse = matching.coarse_matches(filtered, config.min_score)
    blocksA = keypoints.top_k_per_block(shapeA, kpsA, DescriptorMap.cell, config.per_block)
    blocksB = keypoints.top_k_per_block(shapeB, kpsB, DescriptorMap.cell, config.per_block)
    corrs = matching.refine_matches(coarse, blocksA, blocksB, fA, fB, mutual=config.mutual)
    n_identity = sum(1 for m in coarse if m.cellA == m.cellB)
    summary = {
        "cells_a": list(fA.shape),
        "cells_b": list(fB.shape),
        "coarse_matches": len(coarse),
        "coarse_identity_fraction": n_identity / len(coarse) if coarse else 0.0,
        "keypoints_a": len(kpsA),
        "keypoints_b": len(kpsB),
        "correspondences": len(corrs),
    }
    return MatchResult(corrs, coarse, summary)


def match_images(imgA, imgB, config: RunConfig, names=("a", "b"), stack=None) -> MatchResult:
    fA, logitsA = image_features(imgA, names[0], config)
    fB, logitsB = image_features(imgB, names[1], config)
    respA = keypoints.decode_response(logitsA)
    respB = keypoints.decode_response(logitsB)
    kpsA = keypoints.nms(respA, config.nms_radius, config.nms_threshold)
    kpsB = keypoints.nms(respB, config.nms_radius, config.nms_threshold)
    return match_features(fA, fB, kpsA, kpsB, respA.shape, respB.shape, config, stack)


def knn_match_images(imgA, imgB, config: RunConfig, names=("a", "b")):
    """Baseline: strongest ``n_keypoints`` per image, ratio-test matching."""
    out = []
    feats = []
    for img, name in zip((imgA, imgB), names):
        fmap, logits = image_features(img, name, config)
        resp = keypoints.decode_response(logits)
        kps = keypoints.nms(resp, config.nms_radius, config.nms_threshold)[:config.n_keypoints]
        desc = matching.interpolate_descriptors(fmap, [k.x for k in kps], [k.y for k in kps]) \
            if kps else np.zeros((0, fmap.dim))
        feats.append((kps, desc))
    (ka, da), (kb, db) = feats
    for ia, ib in matching.knn_ratio_match(da, db, config.ratio):
        out.append(matching.Correspondence((ka[ia].x, ka[ia].y), (kb[ib].x, kb[ib].y), 1.0))
    return out


# --- pose estimation and evaluation -------------------------------------------


@dataclass
class PairOutcome:
    pair_id: str
    distance: float
    n_matches: int
    status: str
    n_inliers: int = 0
    errors: geometry.PoseErrors | None = None
    pose: geometry.Pose | None = None

    def row(self) -> dict:
        e = self.errors
        return {
            "pair_id": self.pair_id,
            "distance_m": self.distance,
            "r_err_deg": math.degrees(e.r_err) if e else None,
            "t_err_m": e.t_err if e else None,
            "n_matches": self.n_matches,
            "n_inliers": self.n_inliers,
            "status": self.status,
        }


def estimate_pair(pair: dataset.ImagePair, corrs, config: RunConfig, pair_id: str) -> PairOutcome:
    """RANSAC essential matrix, pose decomposition and errors against ground truth."""
    gt = pair.gt_relative
    out = PairOutcome(pair_id, pair.baseline, len(corrs), "failed")
    if len(corrs) < 5:
        return out
    x1 = geometry.normalize_points([c.pA for c in corrs], pair.ref.intrinsics)
    x2 = geometry.normalize_points([c.pB for c in corrs], pair.query.intrinsics)
    try:
        E, mask = geometry.ransac_essential(
            x1, x2, config.ransac_threshold, config.ransac_confidence,
            config.ransac_max_iter, config.ransac_seed)
        pose = geometry.decompose_essential(E, x1[mask], x2[mask])
    except DegenerateConfigurationError:
        out.status = "degenerate"
        return out
    except (EstimationFailedError, AmbiguityError):
        return out
    out.status = "ok"
    out.n_inliers = int(mask.sum())
    out.pose = pose
    out.errors = geometry.PoseErrors(geometry.rotation_error(gt.R, pose.R),
                                     geometry.translation_error(gt.t, pose.t))
    return out


def _pair_id(pair):
    return f"{pair.ref.id}:{pair.query.id}"


def _synthetic_size(K: geometry.CameraIntrinsics):
    return int(round(2 * K.cy + 1)), int(round(2 * K.cx + 1))


def _planted_descriptor_map(xy, desc, shape, seed):
    """Cell map from planted point descriptors; empty cells get random fill."""
    H, W = shape
    h, w = -(-H // DescriptorMap.cell), -(-W // DescriptorMap.cell)
    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(h, w, desc.shape[1])) * 1e-3
    filled = np.zeros((h, w), dtype=bool)
    for (x, y), d in zip(xy, desc):
        i, j = int(y) // DescriptorMap.cell, int(x) // DescriptorMap.cell
        if 0 <= i < h and 0 <= j < w:
            if not filled[i, j]:
                grid[i, j] = 0.0
                filled[i, j] = True
            grid[i, j] += d
    return DescriptorMap(grid)


def planted_correspondences(pair, planted, method: str, config: RunConfig, index: int,
                            stack=None) -> list:
    """Run a matcher on planted per-point descriptors of a synthetic pair.

    B-side points are presented in a seeded shuffled order so that neither
    matcher can rely on list position.
    """
    xA, xB, desc = planted["xA"], planted["xB"], planted["descriptors"]
    rng = np.random.default_rng([config.ransac_seed, index])
    perm = rng.permutation(len(xB))
    xBp, descB = xB[perm], desc[perm]
    if method == "knn":
        pairs = matching.knn_ratio_match(desc, descB, config.ratio)
        return [matching.Correspondence(tuple(xA[i]), tuple(xBp[j]), 1.0) for i, j in pairs]
    shapeA = _synthetic_size(pair.ref.intrinsics)
    shapeB = _synthetic_size(pair.query.intrinsics)
    fA = _planted_descriptor_map(xA, desc, shapeA, [index, 0])
    fB = _planted_descriptor_map(xBp, descB, shapeB, [index, 1])

    def kps(xy, d, shape):
        H, W = shape
        return [keypoints.Keypoint(float(x), float(y), 1.0, dd) for (x, y), dd in zip(xy, d)
                if 0 <= x < W and 0 <= y < H]

    res = match_features(fA, fB, kps(xA, desc, shapeA), kps(xBp, descB, shapeB),
                         shapeA, shapeB, config, stack)
    return res.correspondences


def _image_path(root: Path, image_id: str) -> Path:
    for cand in (root / "images" / f"{image_id}.pgm", root / f"{image_id}.pgm"):
        if cand.exists():
            return cand
    raise FileFormatError(f"no image found for id {image_id!r} under {root}")


def evaluate_dataset(dataset_dir, method: str, config: RunConfig):
    """Select close pairs, match, estimate poses; returns (outcomes, bin ratios)."""
    if method not in ("superncn", "knn"):
        raise ContractViolation(f"unknown method {method!r}")
    root = Path(dataset_dir)
    pose_file = root / dataset.POSE_FILE
    if not pose_file.exists():
        raise FileFormatError(f"{pose_file} not found")
    images = dataset.read_poses(pose_file)
    ref = [im for im in images if im.traversal == dataset.REFERENCE_TRAVERSAL]
    qry = [im for im in images if im.traversal != dataset.REFERENCE_TRAVERSAL]
    pairs = dataset.select_close_pairs(ref, qry) if ref and qry else []

    planted = None
    if (root / dataset.CORRESPONDENCE_FILE).exists():
        planted = dataset.read_planted(root / dataset.CORRESPONDENCE_FILE)
        pairs = [p for p in pairs if (p.ref.id, p.query.id) in planted]
    if not pairs:
        raise NoPairsError(f"no close reference/query pairs in {root}")
    pairs.sort(key=_pair_id)
    stack = load_ncn_stack(config.ncn_weights) if method == "superncn" else None
    # pair-level threads replace conv-level threads
    inner = dataclasses.replace(config, workers=1)

    def run(item):
        index, pair = item
        if planted is not None:
            corrs = planted_correspondences(pair, planted[(pair.ref.id, pair.query.id)],
                                            method, inner, index, stack)
        else:
            imgA = dataset.load_pgm(_image_path(root, pair.ref.id))
            imgB = dataset.load_pgm(_image_path(root, pair.query.id))
            names = (pair.ref.id, pair.query.id)
            if method == "knn":
                corrs = knn_match_images(imgA, imgB, inner, names)
            else:
                corrs = match_images(imgA, imgB, inner, names, stack).correspondences
        return estimate_pair(pair, corrs, inner, _pair_id(pair))

    items = list(enumerate(pairs))
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(run, items))
    else:
        outcomes = [run(it) for it in items]
    outcomes.sort(key=lambda o: o.pair_id)
    ratios = geometry.success_ratios([(o.errors, o.distance) for o in outcomes],
                                     config.theta_r, config.theta_t, config.bins)
    return outcomes, ratios


SUCCESS_COLUMNS = ["bin_lo", "bin_hi", "n_pairs", "rot_success", "trans_success", "flag"]


def write_success_table(ratios, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SUCCESS_COLUMNS)
    for r in ratios:
        w.writerow([repr(r.lo), repr(r.hi), r.n_pairs,
                    "" if r.rot_success is None else repr(r.rot_success),
                    "" if r.trans_success is None else repr(r.trans_success),
                    "empty" if r.empty else "ok"])


def write_summary(summary: dict, path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
