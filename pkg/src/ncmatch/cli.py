"""Command-line entry point: ``ncmatch {match,evaluate,synth}``.

Exit codes: 0 success, 2 bad input, 3 tensor capacity exceeded,
4 no close pairs to evaluate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataset, geometry, matching
from .errors import CapacityError, ContractViolation, FileFormatError, GenerationError
from .pipeline import (NoPairsError, RunConfig, evaluate_dataset, match_images,
                       write_success_table, write_summary)

log = logging.getLogger("ncmatch")

EXIT_OK, EXIT_INPUT, EXIT_CAPACITY, EXIT_EMPTY = 0, 2, 3, 4

# flag name -> RunConfig field
_CONFIG_FLAGS = {
    "--n-keypoints": ("n_keypoints", int),
    "--ratio": ("ratio", float),
    "--theta-r-deg": ("theta_r_deg", float),
    "--theta-t": ("theta_t", float),
    "--ransac-seed": ("ransac_seed", int),
    "--ransac-threshold": ("ransac_threshold", float),
    "--ransac-confidence": ("ransac_confidence", float),
    "--ransac-max-iter": ("ransac_max_iter", int),
    "--descriptors": ("descriptors", str),
    "--ncn-weights": ("ncn_weights", str),
    "--ncn-repeats": ("ncn_repeats", int),
    "--nms-radius": ("nms_radius", int),
    "--nms-threshold": ("nms_threshold", float),
    "--min-score": ("min_score", float),
    "--max-elements": ("max_elements", int),
    "--workers": ("workers", int),
}


def _bins(text):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad bin list {text!r}") from exc


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="key = value config file")
    for flag, (name, typ) in _CONFIG_FLAGS.items():
        p.add_argument(flag, dest=name, type=typ, default=None)
    p.add_argument("--bins", dest="bins", type=_bins, default=None,
                   help="comma-separated distance bin edges in metres")
    p.add_argument("--no-mutual", dest="mutual", action="store_false", default=None,
                   help="keep one-way nearest neighbours inside matched cells")


def _config(args) -> RunConfig:
    overrides = {name: getattr(args, name) for name, _ in _CONFIG_FLAGS.values()}
    overrides["bins"] = args.bins
    overrides["mutual"] = args.mutual
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.config is not None:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig(**overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ncmatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match two grayscale PGM images")
    p.add_argument("image_a", type=Path)
    p.add_argument("image_b", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="relative-pose evaluation over a dataset")
    p.add_argument("dataset_dir", type=Path)
    p.add_argument("--method", choices=("superncn", "knn"), default="superncn")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("synth", help="write a synthetic posed dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-pairs", type=int, default=10)
    p.add_argument("--n-points", type=int, default=200)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--outlier-ratio", type=float, default=0.0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def cmd_match(image_a, image_b, config: RunConfig, out_dir) -> dict:
    imgA = dataset.load_pgm(image_a)
    imgB = dataset.load_pgm(image_b)
    res = match_images(imgA, imgB, config, (Path(image_a).stem, Path(image_b).stem))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "correspondences.jsonl", "w", encoding="utf-8") as fh:
        matching.write_correspondences(res.correspondences, fh)
    summary = dict(res.summary, image_a=str(image_a), image_b=str(image_b))
    write_summary(summary, out / "summary.json")
    return summary


def cmd_evaluate(dataset_dir, method: str, config: RunConfig, out_dir):
    outcomes, ratios = evaluate_dataset(dataset_dir, method, config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pairs.csv", "w", encoding="utf-8") as fh:
        geometry.write_error_rows([o.row() for o in outcomes], fh)
    with open(out / "success.csv", "w", encoding="utf-8") as fh:
        write_success_table(ratios, fh)
    return outcomes, ratios


def cmd_synth(seed: int, n_pairs: int, noise_px: float, out_dir, n_points: int = 200,
              outlier_ratio: float = 0.0):
    """Independent pairs placed 1 km apart so no cross-pair is ever close."""
    if n_pairs < 0:
        raise ContractViolation("n_pairs must be >= 0")
    seeds = np.random.SeedSequence(seed).generate_state(max(n_pairs, 1))
    scenes = []
    for n in range(n_pairs):
        try:
            scenes.append(dataset.synth_scene(
                int(seeds[n]), n_points, noise_px, outlier_ratio,
                origin=(1000.0 * n, 0.0, 0.0), pair_id=f"p{n:04d}"))
        except GenerationError as exc:
            raise GenerationError(f"pair {n}: {exc}") from exc
    dataset.write_synthetic_dump(scenes, out_dir)
    return scenes


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "match":
            summary = cmd_match(args.image_a, args.image_b, _config(args), args.out)
            log.info("%d coarse matches, %d correspondences",
                     summary["coarse_matches"], summary["correspondences"])
        elif args.command == "evaluate":
            outcomes, _ = cmd_evaluate(args.dataset_dir, args.method, _config(args), args.out)
            log.info("evaluated %d pairs", len(outcomes))
        else:
            cmd_synth(args.seed, args.n_pairs, args.noise_px, args.out, args.n_points,
                      args.outlier_ratio)
    except CapacityError as exc:
        print(f"ncmatch: {exc}; downsample the inputs (e.g. to 512x512) or raise "
              f"--max-elements", file=sys.stderr)
        return EXIT_CAPACITY
    except NoPairsError as exc:
        print(f"ncmatch: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (FileFormatError, ContractViolation, GenerationError, OSError, ValueError) as exc:
        print(f"ncmatch: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
