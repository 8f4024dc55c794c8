"""Aligning the LiDAR cloud to the SfM frame and fusing the two.

Coarse alignment is a closed-form similarity (scale, rotation, translation)
from a handful of hand-picked correspondences. Refinement is two-phase ICP:
a loose correspondence cap to pull major structure together, then a tight
cap to polish, with scale frozen after the coarse step. Fusion concatenates
the SfM cloud with the aligned LiDAR cloud.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, SourceTag, SpatialIndex
from .errors import DegenerateGeometryError, NoOverlapError

logger = logging.getLogger(__name__)

_ORTHO_TOL = 1e-9


def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.abs(r.T @ r - np.eye(3)).max() > _ORTHO_TOL:
        raise ValueError("matrix is not orthonormal")
    if np.linalg.det(r) < 0:
        raise ValueError("matrix is a reflection, not a rotation")
    return r


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation: p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class SimilarityTransform:
    """Uniform scale, rotation, translation: p -> s R p + t."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", _check_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation

    def compose_rigid(self, rigid: RigidTransform) -> "SimilarityTransform":
        """rigid after self, folded into one similarity."""
        return SimilarityTransform(
            self.scale,
            rigid.rotation @ self.rotation,
            rigid.rotation @ self.translation + rigid.translation,
        )

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m


def estimate_similarity(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Closed-form least-squares similarity mapping src points onto dst.

    Needs at least 3 non-collinear correspondences. Exact inputs (dst being
    a true similarity image of src) are recovered to machine precision.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("need matching (N, 3) arrays")
    n = len(src)
    if n < 3:
        raise DegenerateGeometryError(f"need at least 3 correspondences, got {n}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    var_s = (cs**2).sum() / n
    if var_s == 0:
        raise DegenerateGeometryError("source points are coincident")
    cov = cd.T @ cs / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometryError("correspondences are collinear")
    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rotation = u @ sign @ vt
    scale = float(np.trace(np.diag(d) @ sign) / var_s)
    if scale <= 0:
        raise DegenerateGeometryError("recovered scale is not positive")
    translation = mu_d - scale * rotation @ mu_s
    return SimilarityTransform(scale, rotation, translation)


def best_rigid(src_pts: np.ndarray, dst_pts: np.ndarray) -> RigidTransform:
    """Least-squares rotation + translation mapping src_pts onto dst_pts.

    SVD solution with the determinant sign corrected so the result is a
    proper rotation. Requires >= 3 pairs that are not all collinear.
    """
    src_pts = np.asarray(src_pts, dtype=np.float64)
    dst_pts = np.asarray(dst_pts, dtype=np.float64)
    if src_pts.shape != dst_pts.shape or src_pts.ndim != 2 or src_pts.shape[1] != 3:
        raise ValueError("need matching (N, 3) arrays")
    if len(src_pts) < 3:
        raise DegenerateGeometryError(f"need at least 3 pairs, got {len(src_pts)}")
    mu_s = src_pts.mean(axis=0)
    mu_d = dst_pts.mean(axis=0)
    h = (src_pts - mu_s).T @ (dst_pts - mu_d)
    u, d, vt = np.linalg.svd(h)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise DegenerateGeometryError("pairs are collinear")
    sign = np.eye(3)
    if np.linalg.det(vt.T @ u.T) < 0:
        sign[2, 2] = -1.0
    rotation = vt.T @ sign @ u.T
    translation = mu_d - rotation @ mu_s
    return RigidTransform(rotation, translation)


def nearest_correspondences(
    src_pts: np.ndarray, index: SpatialIndex, cap: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest destination point for each source point, filtered by distance.

    Returns (src_indices, dst_indices, distances) for pairs within the cap.
    """
    idx, dist = index.nearest(src_pts)
    keep = np.flatnonzero(dist <= cap)
    return keep, idx[keep], dist[keep]


@dataclass(frozen=True)
class IcpParams:
    """Two-phase ICP settings.

    Caps default to 5% (phase 1) and 1% (phase 2) of the destination
    bounding-box diagonal when left as None. The source is randomly
    subsampled (seeded) to at most subsample_limit points per iteration.
    """

    max_iterations: int = 50
    cap_phase1: float | None = None
    cap_phase2: float | None = None
    fraction_phase1: float = 0.90
    fraction_phase2: float = 0.99
    epsilon: float = 1e-8
    subsample_limit: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for cap in (self.cap_phase1, self.cap_phase2):
            if cap is not None and cap <= 0:
                raise ValueError("caps must be positive")
        for frac in (self.fraction_phase1, self.fraction_phase2):
            if not 0 < frac <= 1:
                raise ValueError("fraction targets must be in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.subsample_limit < 1:
            raise ValueError("subsample_limit must be >= 1")


@dataclass(frozen=True)
class IcpIteration:
    phase: int
    rms_error: float
    matched_fraction: float


@dataclass(frozen=True)
class IcpReport:
    """Everything needed to audit a refinement run."""

    transform: SimilarityTransform
    iterations: list[IcpIteration]
    final_rms: float
    final_matched_fraction: float
    phase_fractions: tuple[float, float]
    converged: bool

    @property
    def rms_sequence(self) -> list[float]:
        return [it.rms_error for it in self.iterations]


def icp(
    source: PointCloud,
    destination: PointCloud,
    init: SimilarityTransform,
    params: IcpParams = IcpParams(),
) -> IcpReport:
    """Refine a coarse similarity so the source cloud lands on the destination.

    Scale stays frozen at the coarse estimate; iterations only update
    rotation and translation. Phase 1 runs under the loose cap until its
    match-fraction target is reached (or improvement stalls); phase 2 runs
    under the tight cap until the error plateaus. Iterations that fail to
    reduce the RMS correspondence error are rolled back, so the reported
    error sequence is nonincreasing within each phase.
    """
    if len(source) == 0 or len(destination) == 0:
        raise ValueError("clouds must be non-empty")
    dest_index = SpatialIndex(destination)
    diag = destination.bbox_diagonal()
    if diag == 0:
        raise DegenerateGeometryError("destination cloud has zero extent")
    caps = (
        params.cap_phase1 if params.cap_phase1 is not None else 0.05 * diag,
        params.cap_phase2 if params.cap_phase2 is not None else 0.01 * diag,
    )
    targets = (params.fraction_phase1, params.fraction_phase2)

    base = init.apply(source.positions)
    rng = np.random.default_rng(params.seed & 0xFFFFFFFFFFFFFFFF)
    if len(base) > params.subsample_limit:
        work_idx = np.sort(rng.choice(len(base), size=params.subsample_limit, replace=False))
        work = base[work_idx]
    else:
        work = base

    rigid = RigidTransform.identity()
    history: list[IcpIteration] = []
    phase_best = [0.0, 0.0]

    for phase in range(2):
        cap = caps[phase]
        prev_err = np.inf
        for _ in range(params.max_iterations):
            moved = rigid.apply(work)
            si, di, _ = nearest_correspondences(moved, dest_index, cap)
            fraction = len(si) / len(moved)
            phase_best[phase] = max(phase_best[phase], fraction)
            if len(si) == 0:
                if phase == 0 and not history:
                    raise NoOverlapError(
                        f"no correspondences within {cap:.6g} at the initial alignment"
                    )
                break
            if len(si) < 3:
                break
            step = best_rigid(moved[si], destination.positions[di])
            candidate = step.compose(rigid)
            residual = candidate.apply(work[si]) - destination.positions[di]
            err = float(np.sqrt((residual**2).sum(axis=1).mean()))
            if err >= prev_err:
                break  # no improvement; keep the previous transform
            rigid = candidate
            history.append(IcpIteration(phase, err, fraction))
            improved = (prev_err - err) / prev_err if np.isfinite(prev_err) else 1.0
            prev_err = err
            if phase == 0 and fraction >= targets[0]:
                break
            if improved < params.epsilon:
                break

    final = init.compose_rigid(rigid)
    moved_full = rigid.apply(base)
    si, di, dist = nearest_correspondences(moved_full, dest_index, caps[1])
    final_fraction = len(si) / len(moved_full)
    final_rms = float(np.sqrt((dist**2).mean())) if len(si) else np.inf
    converged = final_fraction >= targets[1]
    if not converged:
        logger.warning(
            "ICP matched fraction %.4f below target %.2f", final_fraction, targets[1]
        )
    return IcpReport(
        transform=final,
        iterations=history,
        final_rms=final_rms,
        final_matched_fraction=final_fraction,
        phase_fractions=(phase_best[0], phase_best[1]),
        converged=converged,
    )


def fuse(sfm: PointCloud, lidar_aligned: PointCloud) -> PointCloud:
    """Concatenate the SfM cloud with the aligned LiDAR cloud (SfM first)."""
    positions = np.vstack([sfm.positions, lidar_aligned.positions])
    colors = np.vstack([sfm.colors, lidar_aligned.colors])
    return PointCloud(positions, colors, SourceTag.FUSED)


def read_pairs(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a correspondence file: six reals per line, lidar xyz then sfm xyz.

    '#' starts a comment; blank lines are ignored. Returns (lidar_pts,
    sfm_pts) as (N, 3) arrays.
    """
    lidar = []
    sfm = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            body = raw.split("#", 1)[0].strip()
            if not body:
                continue
            tok = body.split()
            if len(tok) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 values, found {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
            lidar.append(vals[:3])
            sfm.append(vals[3:])
    return np.asarray(lidar, dtype=np.float64), np.asarray(sfm, dtype=np.float64)
