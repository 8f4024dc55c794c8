"""Command-line entry point.

One subcommand per pipeline stage plus `run` (everything), `validate`
(config linting), and `synth` (bundled synthetic scene). Failures print a
stage-tagged message to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

from . import __version__
from .chroma import ChromaParams, chroma_filter
from .cloud import SourceTag, load_ply, save_ply
from .errors import SplatPrepError
from .frames import FrameParams, select_frames
from .image import load_grayscale, load_image, save_image
from .metrics import MetricsRecord, build_report, evaluate_dir, pair_filenames
from .pipeline import StageError, load_config, run, validate_config
from .registration import (
    IcpParams,
    PointCloud,
    estimate_similarity,
    icp,
    read_pairs,
)
from .synth import SceneSpec, generate_scene
from .undistort import parse_intrinsics, undistort_image


def _setup_logging():
    level = os.environ.get("SPLATPREP_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatprep",
        description="Preprocess LiDAR clouds and camera frames into splatting training inputs.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("chroma", help="outlier removal + color-capped subsampling of a PLY")
    p.add_argument("--input", required=True, help="input PLY")
    p.add_argument("--output", required=True, help="output PLY")
    p.add_argument("--n", type=int, default=10, help="max points kept per color bucket")
    p.add_argument("--knn", type=int, default=20, help="neighbors for outlier statistics")
    p.add_argument("--alpha", type=float, default=2.0, help="outlier cut at mean + alpha*std")
    p.add_argument("--quantize", type=int, default=1, help="channel divisor before bucketing")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ascii", action="store_true", help="write ascii PLY instead of binary")
    p.add_argument("--with-normals", action="store_true", help="emit zero nx/ny/nz properties")

    p = sub.add_parser("frames", help="select frames by pairwise overlap")
    p.add_argument("--input", required=True, help="directory of .png/.ppm frames")
    p.add_argument("--output", required=True, help="directory for the selected frames")
    p.add_argument("--overlap", type=float, default=80.0, help="target overlap percent")
    p.add_argument("--fast-threshold", type=int, default=20)
    p.add_argument("--n-contig", type=int, default=9)
    p.add_argument("--max-features", type=int, default=500)
    p.add_argument("--ransac-iterations", type=int, default=2000)
    p.add_argument("--ransac-threshold", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write a selection report JSON here")

    p = sub.add_parser("undistort", help="remove lens distortion from frames")
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", required=True, help="output file or directory")
    p.add_argument("--intrinsics", required=True, help="text file: fx fy cx cy k1 k2 k3 p1 p2")

    p = sub.add_parser("align", help="similarity + ICP alignment of LiDAR onto SfM")
    p.add_argument("--lidar", required=True, help="LiDAR PLY (already filtered)")
    p.add_argument("--sfm", required=True, help="SfM PLY")
    p.add_argument("--pairs", required=True, help="correspondence file, 6 reals per line")
    p.add_argument("--output", required=True, help="aligned LiDAR PLY")
    p.add_argument("--fused", help="also fuse and write the combined PLY here")
    p.add_argument("--report", help="write an alignment report JSON here")
    p.add_argument("--max-iterations", type=int, default=50)
    p.add_argument("--cap-phase1", type=float, default=None)
    p.add_argument("--cap-phase2", type=float, default=None)
    p.add_argument("--fraction-phase1", type=float, default=0.90)
    p.add_argument("--fraction-phase2", type=float, default=0.99)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--subsample-limit", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="PSNR/SSIM/loss for same-named image pairs")
    p.add_argument("--observed", required=True, help="ground-truth image directory")
    p.add_argument("--rendered", required=True, help="rendered image directory")
    p.add_argument("--output", required=True, help="report JSON path")
    p.add_argument("--lam", type=float, default=0.2, help="weight of the SSIM term")
    p.add_argument("--density", default="", help="column label stored in the records")

    p = sub.add_parser("report", help="aggregate eval records into comparison tables")
    p.add_argument("--records", required=True, nargs="+", help="record JSON files to merge")
    p.add_argument("--baseline", default="vanilla", help="baseline density column")
    p.add_argument("--output", required=True, help="tables JSON path")
    p.add_argument("--csv", help="also write a long-format CSV here")

    p = sub.add_parser("run", help="execute the full pipeline from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--output-dir", help="override config output_dir")
    p.add_argument("--overlap", type=float, help="override frames.target_overlap")
    p.add_argument("--n", type=int, help="override chroma.max_points_per_color")

    p = sub.add_parser("validate", help="check a config without running")
    p.add_argument("--config", required=True)

    p = sub.add_parser("synth", help="generate the bundled synthetic scene")
    p.add_argument("--output", required=True, help="scene directory")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--step", type=float, default=0.02, help="pan step as a frame-width share")
    p.add_argument("--lidar-points", type=int, default=60_000)
    p.add_argument("--sfm-points", type=int, default=12_000)
    p.add_argument("--outliers", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_chroma(args) -> int:
    cloud = load_ply(args.input, SourceTag.LIDAR)
    params = ChromaParams(
        max_points_per_color=args.n,
        knn=args.knn,
        alpha=args.alpha,
        quantize=args.quantize,
        seed=args.seed,
    )
    filtered = chroma_filter(cloud, params)
    save_ply(filtered, args.output, binary=not args.ascii, with_normals=args.with_normals)
    print(f"chroma: {len(cloud)} -> {len(filtered)} points")
    return 0


def _cmd_frames(args) -> int:
    src = Path(args.input)
    files = sorted(
        (p for p in src.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm")),
        key=lambda p: p.name,
    )
    if not files:
        raise SplatPrepError(f"no .png/.ppm/.pgm frames under {src}")
    grays = [load_grayscale(p) for p in files]
    params = FrameParams(
        fast_threshold=args.fast_threshold,
        n_contig=args.n_contig,
        max_features=args.max_features,
        ransac_iterations=args.ransac_iterations,
        ransac_threshold=args.ransac_threshold,
        seed=args.seed,
    )
    result = select_frames(grays, args.overlap, params)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    import shutil

    for idx in result.selected:
        shutil.copyfile(files[idx], out / files[idx].name)
    if args.report:
        report = {
            "target_overlap": args.overlap,
            "selected": [files[i].name for i in result.selected],
            "selected_indices": result.selected,
            "skipped_indices": result.skipped,
            "pairs": [
                {
                    "anchor": pr.anchor,
                    "candidate": pr.candidate,
                    "overlap": pr.overlap,
                    "matches": pr.n_matches,
                    "inliers": pr.n_inliers,
                    "status": pr.status,
                }
                for pr in result.pairs
            ],
        }
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n", encoding="ascii")
    print(f"frames: kept {len(result.selected)} of {len(files)}")
    return 0


def _cmd_undistort(args) -> int:
    model = parse_intrinsics(args.intrinsics)
    src = Path(args.input)
    if src.is_dir():
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        names = sorted(
            p for p in src.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm")
        )
        if not names:
            raise SplatPrepError(f"no images under {src}")
        for path in names:
            save_image(undistort_image(model, load_image(path)), out / path.name)
        print(f"undistort: {len(names)} images")
    else:
        save_image(undistort_image(model, load_image(src)), args.output)
        print("undistort: 1 image")
    return 0


def _cmd_align(args) -> int:
    lidar = load_ply(args.lidar, SourceTag.LIDAR)
    sfm = load_ply(args.sfm, SourceTag.SFM)
    lidar_pts, sfm_pts = read_pairs(args.pairs)
    coarse = estimate_similarity(lidar_pts, sfm_pts)
    params = IcpParams(
        max_iterations=args.max_iterations,
        cap_phase1=args.cap_phase1,
        cap_phase2=args.cap_phase2,
        fraction_phase1=args.fraction_phase1,
        fraction_phase2=args.fraction_phase2,
        epsilon=args.epsilon,
        subsample_limit=args.subsample_limit,
        seed=args.seed,
    )
    report = icp(lidar, sfm, coarse, params)
    aligned = PointCloud(report.transform.apply(lidar.positions), lidar.colors, SourceTag.LIDAR)
    save_ply(aligned, args.output)
    if args.fused:
        from .registration import fuse

        save_ply(fuse(sfm, aligned), args.fused)
    if args.report:
        payload = {
            "coarse_scale": coarse.scale,
            "transform": report.transform.as_matrix().tolist(),
            "final_rms": report.final_rms,
            "final_matched_fraction": report.final_matched_fraction,
            "converged": report.converged,
            "iterations": [
                {"phase": it.phase, "rms": it.rms_error, "fraction": it.matched_fraction}
                for it in report.iterations
            ],
        }
        Path(args.report).write_text(json.dumps(payload, indent=2) + "\n", encoding="ascii")
    print(
        f"align: rms {report.final_rms:.6g}, matched {report.final_matched_fraction:.4f}"
        + ("" if report.converged else " (below target)")
    )
    return 0


def _record_to_dict(rec: MetricsRecord) -> dict:
    return {
        "label": rec.label,
        "density": rec.density,
        "psnr": "inf" if math.isinf(rec.psnr) else rec.psnr,
        "ssim": rec.ssim,
        "loss": rec.loss,
        "l1": rec.l1,
        "train_time": rec.train_time,
    }


def _record_from_dict(d: dict) -> MetricsRecord:
    psnr_val = d["psnr"]
    if isinstance(psnr_val, str):
        psnr_val = math.inf
    return MetricsRecord(
        label=str(d["label"]),
        density=str(d.get("density", "")),
        psnr=float(psnr_val),
        ssim=float(d["ssim"]),
        loss=float(d["loss"]),
        l1=d.get("l1"),
        train_time=d.get("train_time"),
    )


def _cmd_eval(args) -> int:
    records = evaluate_dir(args.observed, args.rendered, lam=args.lam, density=args.density)
    _, unmatched = pair_filenames(args.observed, args.rendered)
    payload = {
        "observed": str(args.observed),
        "rendered": str(args.rendered),
        "lambda": args.lam,
        "skipped": unmatched,
        "records": [_record_to_dict(r) for r in records],
    }
    Path(args.output).write_text(json.dumps(payload, indent=2) + "\n", encoding="ascii")
    summary = records[-1]
    psnr_txt = "inf" if math.isinf(summary.psnr) else f"{summary.psnr:.4f}"
    print(f"eval: {len(records) - 1} pairs, avg psnr {psnr_txt} dB, avg ssim {summary.ssim:.6f}")
    return 0


def _cmd_report(args) -> int:
    records: list[MetricsRecord] = []
    for path in args.records:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        rows = payload["records"] if isinstance(payload, dict) else payload
        records.extend(_record_from_dict(d) for d in rows)
    report = build_report(records, baseline=args.baseline)
    Path(args.output).write_text(
        json.dumps(report.to_dict(), indent=2) + "\n", encoding="ascii"
    )
    if args.csv:
        with open(args.csv, "w", newline="", encoding="ascii") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "row", "column", "value"])
            for name, table in report.tables.items():
                for row in table.rows:
                    for col in table.columns:
                        writer.writerow([name, row, col, table.cells[row][col]])
                for col in table.columns:
                    writer.writerow([name, "average", col, table.averages[col]])
    print(f"report: {len(records)} records, metrics: {', '.join(report.tables)}")
    return 0


def _cmd_run(args) -> int:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    if args.overlap is not None:
        overrides["frames.target_overlap"] = args.overlap
    if args.n is not None:
        overrides["chroma.max_points_per_color"] = args.n
    config = load_config(args.config, overrides)
    manifest = run(config)
    fused = manifest.counts("fuse")
    print(
        f"run: fused {fused['fused_points']} points "
        f"({fused['sfm_points']} sfm + {fused['lidar_points']} lidar), "
        f"output at {config['output_dir']}"
    )
    return 0


def _cmd_validate(args) -> int:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        print(f"config: file not found: {path}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"config: not valid JSON: {exc}", file=sys.stderr)
        return 1
    from .pipeline import DEFAULT_CONFIG, _merge

    merged, problems = _merge(DEFAULT_CONFIG, raw if isinstance(raw, dict) else {})
    if not isinstance(raw, dict):
        problems.insert(0, "config root must be a JSON object")
    problems += validate_config(merged, base_dir=path.parent)
    if problems:
        for item in problems:
            print(item, file=sys.stderr)
        return 1
    print("config ok")
    return 0


def _cmd_synth(args) -> int:
    spec = SceneSpec(
        n_frames=args.frames,
        frame_width=args.width,
        frame_height=args.height,
        step_fraction=args.step,
        lidar_points=args.lidar_points,
        sfm_points=args.sfm_points,
        outliers=args.outliers,
        seed=args.seed,
    )
    truth = generate_scene(args.output, spec)
    print(
        f"synth: {truth['n_frames']} frames, {truth['lidar_points']} lidar points, "
        f"{truth['sfm_points']} sfm points under {args.output}"
    )
    return 0


_COMMANDS = {
    "chroma": _cmd_chroma,
    "frames": _cmd_frames,
    "undistort": _cmd_undistort,
    "align": _cmd_align,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "run": _cmd_run,
    "validate": _cmd_validate,
    "synth": _cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except StageError as exc:
        print(f"splatprep {args.command}: {exc}", file=sys.stderr)
        return 1
    except SplatPrepError as exc:
        print(f"splatprep {args.command}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"splatprep {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
