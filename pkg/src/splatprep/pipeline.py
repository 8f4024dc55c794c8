"""End-to-end batch pipeline: frames and LiDAR in, training inputs out.

Stage order: optional undistortion, overlap-based frame selection, load of
the externally produced SfM cloud, chroma filtering of the LiDAR cloud,
coarse similarity + ICP alignment, and fusion. Every stage writes its
artifact under the output directory and contributes counts to the run
manifest. A fixed seed makes the whole run reproducible byte for byte.
"""
from __future__ import annotations

import copy
import hashlib
import json
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .chroma import ChromaParams, chroma_filter
from .cloud import PointCloud, SourceTag, load_ply, save_ply
from .errors import ConfigError, SplatPrepError
from .frames import FrameParams, select_frames
from .image import load_grayscale, load_image, resize_image, save_image
from .registration import IcpParams, estimate_similarity, fuse, icp, read_pairs
from .undistort import parse_intrinsics, undistort_image

DEFAULT_CONFIG: dict = {
    "lidar_ply": None,
    "sfm_ply": None,
    "pairs_file": None,
    "frames_dir": None,
    "intrinsics": None,
    "output_dir": "out",
    "seed": 0,
    "chroma": {"max_points_per_color": 10, "knn": 20, "alpha": 2.0, "quantize": 1},
    "frames": {
        "target_overlap": 80.0,
        "fast_threshold": 20,
        "n_contig": 9,
        "max_features": 500,
        "ransac_iterations": 2000,
        "ransac_threshold": 3.0,
    },
    "icp": {
        "max_iterations": 50,
        "cap_phase1": None,
        "cap_phase2": None,
        "fraction_phase1": 0.90,
        "fraction_phase2": 0.99,
        "epsilon": 1e-8,
        "subsample_limit": 100_000,
    },
    "resize": None,
}

_PATH_KEYS = ("lidar_ply", "sfm_ply", "pairs_file", "frames_dir", "intrinsics", "output_dir")


class StageError(SplatPrepError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class StageRecord:
    name: str
    seconds: float
    counts: dict


@dataclass
class RunManifest:
    config: dict
    stages: list[StageRecord] = field(default_factory=list)
    hashes: dict = field(default_factory=dict)

    def counts(self, stage: str) -> dict:
        for rec in self.stages:
            if rec.name == stage:
                return rec.counts
        raise KeyError(stage)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "stages": [asdict(s) for s in self.stages],
            "hashes": self.hashes,
        }


def _merge(base: dict, override: dict, prefix: str = "") -> tuple[dict, list[str]]:
    """Defaults overlaid with user values; unknown keys reported, not applied."""
    problems = []
    merged = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            problems.append(f"{path}: unknown key")
            continue
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key], sub = _merge(base[key], value, prefix=f"{path}.")
            problems.extend(sub)
        else:
            merged[key] = value
    return merged, problems


def load_config(path, overrides: dict | None = None) -> dict:
    """Read a JSON config, apply defaults and dotted-key overrides.

    Relative paths are taken from the config file's directory and resolved
    to absolute ones. Raises ConfigError listing every problem found.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    merged, problems = _merge(DEFAULT_CONFIG, raw)
    for dotted, value in (overrides or {}).items():
        node = merged
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    problems += validate_config(merged, base_dir=path.parent)
    if problems:
        raise ConfigError("; ".join(problems))
    return resolve_config(merged, base_dir=path.parent)


def resolve_config(cfg: dict, base_dir) -> dict:
    out = copy.deepcopy(cfg)
    for key in _PATH_KEYS:
        if out.get(key):
            out[key] = str((Path(base_dir) / out[key]).resolve())
    return out


def validate_config(cfg: dict, base_dir) -> list[str]:
    """Every problem found, each naming the offending key. Empty means valid."""
    problems = []
    base = Path(base_dir)

    def check_file(key: str, required: bool):
        value = cfg.get(key)
        if not value:
            if required:
                problems.append(f"{key}: required path is missing")
            return
        if not (base / value).exists():
            problems.append(f"{key}: no such path {str(value)!r}")

    check_file("lidar_ply", required=True)
    check_file("pairs_file", required=True)
    check_file("frames_dir", required=True)
    check_file("intrinsics", required=False)
    if not cfg.get("sfm_ply"):
        problems.append(
            "sfm_ply: required path is missing (export the reconstruction as a PLY "
            "and point sfm_ply at it)"
        )
    elif not (base / cfg["sfm_ply"]).exists():
        problems.append(f"sfm_ply: no such path {cfg['sfm_ply']!r}")
    if not cfg.get("output_dir"):
        problems.append("output_dir: required path is missing")

    if not isinstance(cfg.get("seed"), int):
        problems.append("seed: must be an integer")

    ch = cfg.get("chroma", {})
    if ch.get("max_points_per_color", 1) < 1:
        problems.append("chroma.max_points_per_color: must be >= 1")
    if ch.get("knn", 1) < 1:
        problems.append("chroma.knn: must be >= 1")
    if ch.get("alpha", 0) < 0:
        problems.append("chroma.alpha: must be >= 0")
    if ch.get("quantize", 1) < 1:
        problems.append("chroma.quantize: must be >= 1")

    fr = cfg.get("frames", {})
    overlap = fr.get("target_overlap", 80.0)
    if not 0 < overlap <= 100:
        problems.append("frames.target_overlap: must be in (0, 100]")
    if fr.get("fast_threshold", 0) < 0:
        problems.append("frames.fast_threshold: must be >= 0")
    if not 1 <= fr.get("n_contig", 9) <= 16:
        problems.append("frames.n_contig: must be in 1..16")
    if fr.get("max_features", 4) < 4:
        problems.append("frames.max_features: must be >= 4")
    if fr.get("ransac_iterations", 1) < 1:
        problems.append("frames.ransac_iterations: must be >= 1")
    if fr.get("ransac_threshold", 1.0) <= 0:
        problems.append("frames.ransac_threshold: must be positive")

    ic = cfg.get("icp", {})
    if ic.get("max_iterations", 1) < 1:
        problems.append("icp.max_iterations: must be >= 1")
    for key in ("cap_phase1", "cap_phase2"):
        cap = ic.get(key)
        if cap is not None and cap <= 0:
            problems.append(f"icp.{key}: must be positive when set")
    for key in ("fraction_phase1", "fraction_phase2"):
        frac = ic.get(key, 0.9)
        if not 0 < frac <= 1:
            problems.append(f"icp.{key}: must be in (0, 1]")
    if ic.get("epsilon", 1e-8) <= 0:
        problems.append("icp.epsilon: must be positive")
    if ic.get("subsample_limit", 1) < 1:
        problems.append("icp.subsample_limit: must be >= 1")

    resize = cfg.get("resize")
    if resize is not None:
        ok = (
            isinstance(resize, (list, tuple))
            and len(resize) == 2
            and all(isinstance(v, int) and v > 0 for v in resize)
        )
        if not ok:
            problems.append("resize: must be null or [width, height] of positive integers")
    return problems


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _dir_sha256(root: Path) -> str:
    digest = hashlib.sha256()
    for item in sorted(root.iterdir()):
        if item.is_file():
            digest.update(item.name.encode())
            digest.update(_sha256(item).encode())
    return digest.hexdigest()


def _sorted_frames(frames_dir: Path) -> list[Path]:
    files = [p for p in frames_dir.iterdir() if p.suffix.lower() in (".png", ".ppm", ".pgm")]
    if not files:
        raise ConfigError(f"frames_dir {frames_dir} holds no .png/.ppm/.pgm files")
    return sorted(files, key=lambda p: p.name)


def _run_stage(manifest: RunManifest, name: str, body) -> dict:
    start = time.perf_counter()
    try:
        counts = body()
    except StageError:
        raise
    except (SplatPrepError, OSError, ValueError) as exc:
        raise StageError(name, exc) from exc
    manifest.stages.append(StageRecord(name, time.perf_counter() - start, counts))
    return counts


def run(config: dict) -> RunManifest:
    """Execute the pipeline described by a resolved config dict.

    Returns the manifest (also written to output_dir/run_manifest.json).
    Raises StageError naming the failing stage on any error.
    """
    manifest = RunManifest(config=copy.deepcopy(config))
    out_dir = Path(config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(config["seed"])
    frames_dir = Path(config["frames_dir"])
    state: dict = {}  # artifacts handed between stages

    if config.get("intrinsics"):
        def undistort_stage() -> dict:
            model = parse_intrinsics(config["intrinsics"])
            target = out_dir / "undistorted"
            target.mkdir(exist_ok=True)
            names = _sorted_frames(frames_dir)
            for path in names:
                save_image(undistort_image(model, load_image(path)), target / path.name)
            return {"images": len(names)}

        _run_stage(manifest, "undistort", undistort_stage)
        frames_dir = out_dir / "undistorted"

    def frames_stage() -> dict:
        files = _sorted_frames(frames_dir)
        grays = [load_grayscale(p) for p in files]
        fr = config["frames"]
        params = FrameParams(
            fast_threshold=int(fr["fast_threshold"]),
            n_contig=int(fr["n_contig"]),
            max_features=int(fr["max_features"]),
            ransac_iterations=int(fr["ransac_iterations"]),
            ransac_threshold=float(fr["ransac_threshold"]),
            seed=seed,
        )
        result = select_frames(grays, float(fr["target_overlap"]), params)
        images_dir = out_dir / "images"
        if images_dir.exists():
            shutil.rmtree(images_dir)
        images_dir.mkdir()
        for idx in result.selected:
            src = files[idx]
            if config.get("resize"):
                w, h = config["resize"]
                save_image(resize_image(load_image(src), w, h), images_dir / src.name)
            else:
                shutil.copyfile(src, images_dir / src.name)
        report = {
            "target_overlap": fr["target_overlap"],
            "selected": [files[i].name for i in result.selected],
            "selected_indices": result.selected,
            "skipped_indices": result.skipped,
            "pairs": [
                {
                    "anchor": p.anchor,
                    "candidate": p.candidate,
                    "overlap": p.overlap,
                    "matches": p.n_matches,
                    "inliers": p.n_inliers,
                    "status": p.status,
                }
                for p in result.pairs
            ],
        }
        (out_dir / "frames_report.json").write_text(
            json.dumps(report, indent=2) + "\n", encoding="ascii"
        )
        return {
            "images_in": len(files),
            "images_selected": len(result.selected),
            "images_skipped": len(result.skipped),
        }

    _run_stage(manifest, "frames", frames_stage)

    def sfm_stage() -> dict:
        path = config.get("sfm_ply")
        if not path or not Path(path).exists():
            raise ConfigError(
                "no SfM cloud at 'sfm_ply'; run your reconstruction on the selected "
                "images and export a PLY, then point sfm_ply at it"
            )
        state["sfm"] = load_ply(path, SourceTag.SFM)
        return {"sfm_points": len(state["sfm"])}

    _run_stage(manifest, "sfm", sfm_stage)

    def chroma_stage() -> dict:
        cloud = load_ply(config["lidar_ply"], SourceTag.LIDAR)
        ch = config["chroma"]
        params = ChromaParams(
            max_points_per_color=int(ch["max_points_per_color"]),
            knn=int(ch["knn"]),
            alpha=float(ch["alpha"]),
            quantize=int(ch["quantize"]),
            seed=seed,
        )
        filtered = chroma_filter(cloud, params)
        save_ply(filtered, out_dir / "lidar_filtered.ply")
        state["filtered"] = filtered
        return {"lidar_points_raw": len(cloud), "lidar_points_filtered": len(filtered)}

    _run_stage(manifest, "chroma", chroma_stage)

    def align_stage() -> dict:
        lidar_pts, sfm_pts = read_pairs(config["pairs_file"])
        coarse = estimate_similarity(lidar_pts, sfm_pts)
        ic = config["icp"]
        params = IcpParams(
            max_iterations=int(ic["max_iterations"]),
            cap_phase1=ic["cap_phase1"],
            cap_phase2=ic["cap_phase2"],
            fraction_phase1=float(ic["fraction_phase1"]),
            fraction_phase2=float(ic["fraction_phase2"]),
            epsilon=float(ic["epsilon"]),
            subsample_limit=int(ic["subsample_limit"]),
            seed=seed,
        )
        report = icp(state["filtered"], state["sfm"], coarse, params)
        aligned = PointCloud(
            report.transform.apply(state["filtered"].positions),
            state["filtered"].colors,
            SourceTag.LIDAR,
        )
        save_ply(aligned, out_dir / "lidar_aligned.ply")
        state["aligned"] = aligned
        align_report = {
            "coarse_scale": coarse.scale,
            "transform": report.transform.as_matrix().tolist(),
            "final_rms": report.final_rms,
            "final_matched_fraction": report.final_matched_fraction,
            "phase_fractions": list(report.phase_fractions),
            "converged": report.converged,
            "iterations": [
                {"phase": it.phase, "rms": it.rms_error, "fraction": it.matched_fraction}
                for it in report.iterations
            ],
        }
        (out_dir / "align_report.json").write_text(
            json.dumps(align_report, indent=2) + "\n", encoding="ascii"
        )
        return {
            "pairs": len(lidar_pts),
            "icp_iterations": len(report.iterations),
            "final_rms": report.final_rms,
            "final_matched_fraction": report.final_matched_fraction,
        }

    _run_stage(manifest, "align", align_stage)

    def fuse_stage() -> dict:
        fused = fuse(state["sfm"], state["aligned"])
        save_ply(fused, out_dir / "fused.ply")
        sidecar = {
            "sfm_points": len(state["sfm"]),
            "lidar_points": len(state["aligned"]),
            "fused_points": len(fused),
            "source_tags": {
                "sfm": [0, len(state["sfm"])],
                "lidar": [len(state["sfm"]), len(fused)],
            },
        }
        (out_dir / "fused.manifest.json").write_text(
            json.dumps(sidecar, indent=2) + "\n", encoding="ascii"
        )
        return sidecar

    _run_stage(manifest, "fuse", fuse_stage)

    manifest.hashes = {
        "fused.ply": _sha256(out_dir / "fused.ply"),
        "lidar_filtered.ply": _sha256(out_dir / "lidar_filtered.ply"),
        "lidar_aligned.ply": _sha256(out_dir / "lidar_aligned.ply"),
        "images": _dir_sha256(out_dir / "images"),
    }
    (out_dir / "run_manifest.json").write_text(
        json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="ascii"
    )
    return manifest
