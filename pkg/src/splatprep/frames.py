"""Overlap-driven frame selection.

For each (anchor, candidate) pair the anchor frame is registered to the
candidate through a feature-matched homography and rendered onto a canvas
large enough to hold both frames. Overlap is the share of the warped
anchor's content that lands on candidate content. Selection walks the
sequence greedily, keeping the last frame before overlap drops under the
target.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import HomographyError, UndefinedOverlapError
from .features import PATCH_RADIUS, Keypoint, describe, detect_corners, match, orient
from .homography import Homography, RansacParams, estimate_homography, warp_image
from .image import binarize, otsu_threshold

logger = logging.getLogger(__name__)

_BORDER = PATCH_RADIUS + 2  # descriptor patch plus its smoothing window


@dataclass(frozen=True)
class FrameParams:
    """Feature and estimation knobs for pair overlap."""

    fast_threshold: int = 20
    n_contig: int = 9
    max_features: int = 500
    ransac_iterations: int = 2000
    ransac_threshold: float = 3.0
    min_matches: int = 8
    seed: int = 0


@dataclass(frozen=True)
class PairResult:
    """Outcome of one anchor/candidate comparison."""

    anchor: int
    candidate: int
    overlap: float | None
    n_matches: int
    n_inliers: int
    status: str  # "ok", "too-few-matches", "homography-failed", "no-warped-content"


@dataclass(frozen=True)
class SelectionResult:
    selected: list[int]
    skipped: list[int]
    pairs: list[PairResult] = field(repr=False)


def overlap_percent(warped: np.ndarray, adjacent: np.ndarray) -> float:
    """100 * |warped AND adjacent| / |warped| for two boolean masks.

    Raises UndefinedOverlapError when the warped mask is empty.
    """
    warped = np.asarray(warped, dtype=bool)
    adjacent = np.asarray(adjacent, dtype=bool)
    if warped.shape != adjacent.shape:
        raise ValueError(f"mask shapes differ: {warped.shape} vs {adjacent.shape}")
    denom = int(warped.sum())
    if denom == 0:
        raise UndefinedOverlapError("warped mask has no content")
    return 100.0 * int((warped & adjacent).sum()) / denom


def _pair_seed(seed: int, anchor: int, candidate: int) -> int:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, anchor, candidate])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _features(img: np.ndarray, params: FrameParams) -> tuple[list[Keypoint], np.ndarray]:
    h, w = img.shape
    kps = detect_corners(img, params.fast_threshold, params.n_contig)
    kps = [kp for kp in kps if _BORDER <= kp.x < w - _BORDER and _BORDER <= kp.y < h - _BORDER]
    kps = kps[: params.max_features]
    for kp in kps:
        kp.theta = orient(img, kp)
    return kps, describe(img, kps)


def pair_overlap(
    anchor_img: np.ndarray,
    candidate_img: np.ndarray,
    params: FrameParams,
    seed: int | None = None,
) -> tuple[float, int, int]:
    """Overlap percentage between two frames plus match/inlier counts.

    Raises HomographyError when there are not enough matches or estimation
    fails, UndefinedOverlapError when the warped anchor has no content.
    """
    kp_a, desc_a = _features(anchor_img, params)
    kp_c, desc_c = _features(candidate_img, params)
    pairs = match(desc_a, desc_c)
    if len(pairs) < max(4, params.min_matches):
        raise HomographyError(f"only {len(pairs)} matches")
    src = np.array([[kp_a[i].x, kp_a[i].y] for i in pairs[:, 0]], dtype=np.float64)
    dst = np.array([[kp_c[j].x, kp_c[j].y] for j in pairs[:, 1]], dtype=np.float64)
    ransac = RansacParams(
        iterations=params.ransac_iterations,
        threshold=params.ransac_threshold,
        seed=seed if seed is not None else params.seed,
    )
    h, inliers = estimate_homography(src, dst, ransac)

    ol = _canvas_overlap(anchor_img, candidate_img, h)
    return ol, len(pairs), len(inliers)


def _canvas_overlap(anchor_img: np.ndarray, candidate_img: np.ndarray, h: Homography) -> float:
    """Warp the anchor onto a union canvas and measure its content overlap."""
    ah, aw = anchor_img.shape
    ch, cw = candidate_img.shape
    corners = np.array(
        [[0, 0], [aw - 1, 0], [aw - 1, ah - 1], [0, ah - 1]], dtype=np.float64
    )
    warped_corners = h.apply(corners)
    x_lo = np.floor(min(warped_corners[:, 0].min(), 0.0))
    y_lo = np.floor(min(warped_corners[:, 1].min(), 0.0))
    x_hi = np.ceil(max(warped_corners[:, 0].max(), cw - 1.0))
    y_hi = np.ceil(max(warped_corners[:, 1].max(), ch - 1.0))
    out_w = int(x_hi - x_lo) + 1
    out_h = int(y_hi - y_lo) + 1

    warped, valid = warp_image(anchor_img, h, out_shape=(out_h, out_w), offset=(x_lo, y_lo))
    # Thresholds come from each frame's own histogram; the canvas padding
    # would otherwise skew them.
    warped_mask = (warped > otsu_threshold(anchor_img)) & valid
    adjacent_mask = np.zeros((out_h, out_w), dtype=bool)
    ox, oy = int(-x_lo), int(-y_lo)
    adjacent_mask[oy : oy + ch, ox : ox + cw] = binarize(candidate_img)
    return overlap_percent(warped_mask, adjacent_mask)


def select_frames(
    frames: list[np.ndarray],
    target_overlap: float = 80.0,
    params: FrameParams = FrameParams(),
) -> SelectionResult:
    """Greedy subsampling of an ordered frame sequence.

    Frame 0 is always kept. From the last kept frame, overlap is measured
    against each subsequent frame; the frame just before overlap first drops
    under the target becomes the next anchor. If the very first candidate is
    already under target it is selected anyway so the scan advances. Frames
    whose homography cannot be estimated are skipped and logged. If the end
    of the sequence is reached without a drop, the final frame closes the
    selection.
    """
    if not 0 < target_overlap <= 100:
        raise ValueError("target_overlap must be in (0, 100]")
    if len(frames) == 0:
        return SelectionResult([], [], [])
    selected = [0]
    skipped: list[int] = []
    pairs: list[PairResult] = []
    anchor = 0
    f = 1
    last_ok: int | None = None
    while f < len(frames):
        try:
            ol, n_matches, n_inliers = pair_overlap(
                frames[anchor], frames[f], params, seed=_pair_seed(params.seed, anchor, f)
            )
            pairs.append(PairResult(anchor, f, ol, n_matches, n_inliers, "ok"))
        except HomographyError as exc:
            status = "too-few-matches" if "matches" in str(exc) else "homography-failed"
            pairs.append(PairResult(anchor, f, None, 0, 0, status))
            logger.warning("frames %d->%d skipped: %s", anchor, f, exc)
            skipped.append(f)
            f += 1
            continue
        except UndefinedOverlapError as exc:
            pairs.append(PairResult(anchor, f, None, 0, 0, "no-warped-content"))
            logger.warning("frames %d->%d skipped: %s", anchor, f, exc)
            skipped.append(f)
            f += 1
            continue

        if ol >= target_overlap:
            last_ok = f
            f += 1
            continue
        chosen = last_ok if last_ok is not None else f
        selected.append(chosen)
        anchor = chosen
        f = chosen + 1
        last_ok = None

    final = len(frames) - 1
    while final > selected[-1] and final in skipped:
        final -= 1
    if final > selected[-1]:
        selected.append(final)
    return SelectionResult(selected, skipped, pairs)
