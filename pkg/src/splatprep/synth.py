"""Self-contained synthetic scene for exercising the whole pipeline.

Generates a panning frame sequence over a seeded texture, a dense colored
LiDAR-style cloud with planted outliers, a sparser "SfM" cloud of the same
scene expressed in a different similarity frame, an exact correspondence
file, and a ready-to-run pipeline config. Ground truth lands in truth.json.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cloud import PointCloud, SourceTag, save_ply
from .image import resize_image, save_image
from .registration import SimilarityTransform


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int = 200
    frame_width: int = 256
    frame_height: int = 192
    step_fraction: float = 0.02  # pan step per frame, as a share of frame width
    lidar_points: int = 60_000
    sfm_points: int = 12_000
    outliers: int = 150
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 2:
            raise ValueError("need at least 2 frames")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must be in (0, 1)")
        if min(self.frame_width, self.frame_height) < 64:
            raise ValueError("frames must be at least 64 pixels per side")


# Rectangular surfaces spanning a small room: origin, edge u, edge v, base RGB.
_SURFACES = (
    ((0.0, 0.0, 0.0), (8.0, 0.0, 0.0), (0.0, 6.0, 0.0), (110, 110, 105)),  # floor
    ((0.0, 0.0, 0.0), (8.0, 0.0, 0.0), (0.0, 0.0, 3.0), (190, 70, 50)),    # long wall
    ((0.0, 0.0, 0.0), (0.0, 6.0, 0.0), (0.0, 0.0, 3.0), (60, 120, 185)),   # side wall
    ((2.0, 2.0, 0.8), (1.2, 0.0, 0.0), (0.0, 1.2, 0.0), (220, 200, 90)),   # crate top
    ((2.0, 2.0, 0.0), (1.2, 0.0, 0.0), (0.0, 0.0, 0.8), (205, 185, 80)),   # crate side
    ((5.5, 1.0, 0.0), (0.9, 0.9, 0.0), (0.0, 0.0, 1.6), (90, 170, 100)),   # panel
)


def _sample_surfaces(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    origins = np.array([s[0] for s in _SURFACES])
    us = np.array([s[1] for s in _SURFACES])
    vs = np.array([s[2] for s in _SURFACES])
    base = np.array([s[3] for s in _SURFACES], dtype=np.int64)
    areas = np.linalg.norm(np.cross(us, vs), axis=1)
    pick = rng.choice(len(_SURFACES), size=n, p=areas / areas.sum())
    ab = rng.random((n, 2))
    pos = origins[pick] + ab[:, :1] * us[pick] + ab[:, 1:] * vs[pick]
    jitter = rng.integers(-12, 13, size=(n, 3))
    colors = np.clip(base[pick] + jitter, 0, 255).astype(np.uint8)
    return pos, colors


def _scene_transform() -> SimilarityTransform:
    """World (LiDAR) frame -> SfM frame: scale, two-axis rotation, offset."""
    az = np.deg2rad(30.0)
    tilt = np.deg2rad(10.0)
    rz = np.array(
        [[np.cos(az), -np.sin(az), 0.0], [np.sin(az), np.cos(az), 0.0], [0.0, 0.0, 1.0]]
    )
    rx = np.array(
        [[1.0, 0.0, 0.0], [0.0, np.cos(tilt), -np.sin(tilt)], [0.0, np.sin(tilt), np.cos(tilt)]]
    )
    return SimilarityTransform(0.73, rz @ rx, np.array([4.0, -2.0, 1.0]))


def _texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Blobby speckle with a bimodal histogram; plenty of corners to track."""
    coarse = rng.integers(20, 236, size=(height // 12 + 2, width // 12 + 2), dtype=np.int64)
    smooth = resize_image(coarse.astype(np.uint8), width, height).astype(np.int64)
    fine = rng.integers(-25, 26, size=(height, width))
    return np.clip(smooth + fine, 0, 255).astype(np.uint8)


def generate_scene(out_dir, spec: SceneSpec = SceneSpec()) -> dict:
    """Write the full scene under out_dir and return the ground-truth dict."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed & 0xFFFFFFFFFFFFFFFF)

    # Panning frames: fixed-size windows sliding across one wide texture.
    step = max(1, round(spec.step_fraction * spec.frame_width))
    tex_w = spec.frame_width + step * (spec.n_frames - 1)
    texture = _texture(rng, spec.frame_height, tex_w)
    for i in range(spec.n_frames):
        frame = texture[:, i * step : i * step + spec.frame_width]
        save_image(frame, out / "frames" / f"frame_{i:04d}.png")

    # Dense cloud with planted stray returns far off the surfaces.
    pos, colors = _sample_surfaces(rng, spec.lidar_points)
    stray_pos = rng.uniform(-4.0, 12.0, size=(spec.outliers, 3))
    stray_pos[:, 2] = rng.uniform(6.0, 12.0, size=spec.outliers)
    stray_col = rng.integers(0, 256, size=(spec.outliers, 3)).astype(np.uint8)
    lidar = PointCloud(
        np.vstack([pos, stray_pos]),
        np.vstack([colors, stray_col]),
        SourceTag.LIDAR,
    )
    save_ply(lidar, out / "lidar.ply")

    transform = _scene_transform()
    sfm_world, sfm_colors = _sample_surfaces(rng, spec.sfm_points)
    sfm = PointCloud(transform.apply(sfm_world), sfm_colors, SourceTag.SFM)
    save_ply(sfm, out / "sfm.ply")

    # Exact correspondences at surface corners.
    corners = []
    for origin, u, v, _ in _SURFACES[:4]:
        o = np.asarray(origin)
        corners.append(o)
        corners.append(o + np.asarray(u))
        corners.append(o + np.asarray(v))
    world_pts = np.array(corners[:8])
    sfm_pts = transform.apply(world_pts)
    with open(out / "pairs.txt", "w", encoding="ascii") as fh:
        fh.write("# lidar x y z -> sfm x y z\n")
        for w, s in zip(world_pts, sfm_pts):
            fh.write(
                f"{w[0]:.17g} {w[1]:.17g} {w[2]:.17g} {s[0]:.17g} {s[1]:.17g} {s[2]:.17g}\n"
            )

    config = {
        "lidar_ply": "lidar.ply",
        "sfm_ply": "sfm.ply",
        "pairs_file": "pairs.txt",
        "frames_dir": "frames",
        "intrinsics": None,
        "output_dir": "out",
        "seed": spec.seed,
        "chroma": {"max_points_per_color": 10, "knn": 20, "alpha": 2.0, "quantize": 1},
        "frames": {
            "target_overlap": 80.0,
            "fast_threshold": 20,
            "n_contig": 9,
            "max_features": 400,
            "ransac_iterations": 2000,
            "ransac_threshold": 3.0,
        },
        "icp": {
            "max_iterations": 50,
            "cap_phase1": None,
            "cap_phase2": None,
            "fraction_phase1": 0.90,
            "fraction_phase2": 0.95,
            "epsilon": 1e-8,
            "subsample_limit": 100000,
        },
        "resize": None,
    }
    with open(out / "config.json", "w", encoding="ascii") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")

    expected_stride = (1.0 - config["frames"]["target_overlap"] / 100.0) / (
        step / spec.frame_width
    )
    truth = {
        "seed": spec.seed,
        "n_frames": spec.n_frames,
        "frame_size": [spec.frame_width, spec.frame_height],
        "pan_step_px": step,
        "expected_selection_stride": expected_stride,
        "lidar_points": int(len(lidar)),
        "planted_outliers": spec.outliers,
        "sfm_points": int(len(sfm)),
        "world_to_sfm": transform.as_matrix().tolist(),
        "scale": transform.scale,
    }
    with open(out / "truth.json", "w", encoding="ascii") as fh:
        json.dump(truth, fh, indent=2)
        fh.write("\n")
    return truth
