"""Corner detection, orientation, binary descriptors, and matching.

The detector is the 16-pixel segment test: a pixel is a corner when n_contig
consecutive circle pixels are all brighter than center + t or all darker
than center - t. Orientation comes from first-order patch moments, and the
descriptor is a 256-bit brightness-comparison string sampled from a fixed
pattern rotated to the keypoint orientation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy).
CIRCLE_16 = (
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
)

PATCH_RADIUS = 15        # descriptor pattern and orientation patch live in this disc
_SMOOTH_RADIUS = 2       # 5x5 box window feeding the descriptor comparisons
DESCRIPTOR_BITS = 256
ANGLE_STEP = 1.0 / 30.0  # orientation snap for the rotated pattern, radians

_PATTERN_SEED = 20210831
_POPCOUNT = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint8)


@dataclass
class Keypoint:
    """Pixel-integer corner with detector score and patch orientation."""

    x: int
    y: int
    score: float = 0.0
    theta: float = 0.0


def _make_pattern(seed: int = _PATTERN_SEED) -> np.ndarray:
    """Fixed (256, 4) table of integer (px, py, qx, qy) comparison offsets.

    Pairs are drawn once from an isotropic Gaussian (sigma = patch/5) and
    kept only if both endpoints land inside the patch disc and differ, so
    every rotation of the pattern stays inside the patch.
    """
    rng = np.random.default_rng(seed)
    sigma = (2 * PATCH_RADIUS + 1) / 5.0
    rows = []
    while len(rows) < DESCRIPTOR_BITS:
        p = np.rint(rng.normal(0.0, sigma, size=2)).astype(np.int64)
        q = np.rint(rng.normal(0.0, sigma, size=2)).astype(np.int64)
        if p @ p > PATCH_RADIUS**2 or q @ q > PATCH_RADIUS**2:
            continue
        if p[0] == q[0] and p[1] == q[1]:
            continue
        rows.append((p[0], p[1], q[0], q[1]))
    return np.array(rows, dtype=np.int64)


_PATTERN = _make_pattern()
_ROTATED: dict[int, np.ndarray] = {}


def _rotated_pattern(theta_bin: int) -> np.ndarray:
    table = _ROTATED.get(theta_bin)
    if table is None:
        angle = theta_bin * ANGLE_STEP
        c, s = math.cos(angle), math.sin(angle)
        x, y = _PATTERN[:, (0, 2)], _PATTERN[:, (1, 3)]
        rx = np.rint(c * x - s * y).astype(np.int64)
        ry = np.rint(s * x + c * y).astype(np.int64)
        np.clip(rx, -PATCH_RADIUS, PATCH_RADIUS, out=rx)
        np.clip(ry, -PATCH_RADIUS, PATCH_RADIUS, out=ry)
        table = np.stack([rx[:, 0], ry[:, 0], rx[:, 1], ry[:, 1]], axis=1)
        _ROTATED[theta_bin] = table
    return table


def detect_corners(
    img: np.ndarray,
    threshold: int = 20,
    n_contig: int = 9,
    max_features: int | None = None,
) -> list[Keypoint]:
    """Segment-test corners with 3x3 non-maximum suppression.

    The corner score is the largest sum of |circle - center| over any
    qualifying arc of n_contig pixels. Suppression keeps a corner only if no
    8-neighbor scores higher; equal scores go to the earlier pixel in
    row-major order. Results are sorted by descending score (ties by y then
    x) and truncated to max_features.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("detector expects a grayscale image")
    if not 1 <= n_contig <= 16:
        raise ValueError("n_contig must be in 1..16")
    h, w = img.shape
    if h < 7 or w < 7:
        return []
    wide = img.astype(np.int32)
    center = wide[3 : h - 3, 3 : w - 3]
    circle = np.empty((16,) + center.shape, dtype=np.int32)
    for j, (dx, dy) in enumerate(CIRCLE_16):
        circle[j] = wide[3 + dy : h - 3 + dy, 3 + dx : w - 3 + dx]

    bright = circle > center + threshold
    dark = circle < center - threshold
    diff_b = circle - center
    diff_d = -diff_b

    score = np.zeros(center.shape, dtype=np.int64)
    for mask, diff in ((bright, diff_b), (dark, diff_d)):
        for start in range(16):
            run = mask[start].copy()
            sad = np.where(run, diff[start], 0).astype(np.int64)
            for j in range(1, n_contig):
                step = (start + j) % 16
                run &= mask[step]
                sad += diff[step]
            np.maximum(score, np.where(run, sad, 0), out=score)

    is_corner = score > 0
    if not is_corner.any():
        return []

    padded = np.full((score.shape[0] + 2, score.shape[1] + 2), -1, dtype=np.int64)
    padded[1:-1, 1:-1] = score
    keep = is_corner.copy()
    # Neighbors earlier in scan order win ties, later ones lose them.
    for dy, dx in ((-1, -1), (-1, 0), (-1, 1), (0, -1)):
        keep &= score > padded[1 + dy : padded.shape[0] - 1 + dy, 1 + dx : padded.shape[1] - 1 + dx]
    for dy, dx in ((0, 1), (1, -1), (1, 0), (1, 1)):
        keep &= score >= padded[1 + dy : padded.shape[0] - 1 + dy, 1 + dx : padded.shape[1] - 1 + dx]

    ys, xs = np.nonzero(keep)
    scores = score[ys, xs]
    order = np.lexsort((xs, ys, -scores))
    if max_features is not None:
        order = order[:max_features]
    return [
        Keypoint(int(xs[i] + 3), int(ys[i] + 3), float(scores[i]))
        for i in order
    ]


_DISC_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _disc_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    got = _DISC_CACHE.get(radius)
    if got is None:
        span = np.arange(-radius, radius + 1)
        dx, dy = np.meshgrid(span, span)
        inside = dx**2 + dy**2 <= radius**2
        got = (dx[inside], dy[inside])
        _DISC_CACHE[radius] = got
    return got


def orient(img: np.ndarray, kp: Keypoint, patch_radius: int = PATCH_RADIUS) -> float:
    """Patch orientation atan2(m01, m10) over the disc around the keypoint.

    m10 and m01 are intensity moments in keypoint-centered coordinates. A
    patch with zero moment in both axes (uniform or empty) returns 0.0.
    """
    img = np.asarray(img)
    h, w = img.shape
    if not (patch_radius <= kp.x < w - patch_radius and patch_radius <= kp.y < h - patch_radius):
        raise ValueError(f"keypoint ({kp.x}, {kp.y}) too close to the border for radius {patch_radius}")
    dx, dy = _disc_offsets(patch_radius)
    vals = img[kp.y + dy, kp.x + dx].astype(np.int64)
    m10 = int((dx * vals).sum())
    m01 = int((dy * vals).sum())
    return math.atan2(m01, m10)


def box_sums(img: np.ndarray, radius: int = _SMOOTH_RADIUS) -> np.ndarray:
    """Integer sum of the (2r+1)^2 window around each pixel, edges replicated.

    Keeping raw sums instead of means makes descriptor comparisons exact
    integer comparisons (and inverting the image exactly flips them).
    """
    img = np.asarray(img, dtype=np.int64)
    padded = np.pad(img, radius, mode="edge")
    sat = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    sat[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    k = 2 * radius + 1
    h, w = img.shape
    return (
        sat[k : k + h, k : k + w]
        - sat[0:h, k : k + w]
        - sat[k : k + h, 0:w]
        + sat[0:h, 0:w]
    )


def describe(img: np.ndarray, keypoints: list[Keypoint]) -> np.ndarray:
    """256-bit descriptors for oriented keypoints, packed as (N, 32) uint8.

    Bit i is 1 when the smoothed intensity at pattern point p_i is less than
    at q_i, with the pattern rotated by the keypoint orientation snapped to
    ANGLE_STEP. Keypoints must keep the whole patch inside the image.
    """
    img = np.asarray(img)
    h, w = img.shape
    sums = box_sums(img)
    out = np.empty((len(keypoints), DESCRIPTOR_BITS // 8), dtype=np.uint8)
    for row, kp in enumerate(keypoints):
        if not (PATCH_RADIUS <= kp.x < w - PATCH_RADIUS and PATCH_RADIUS <= kp.y < h - PATCH_RADIUS):
            raise ValueError(
                f"keypoint ({kp.x}, {kp.y}) too close to the border for radius {PATCH_RADIUS}"
            )
        table = _rotated_pattern(int(round(kp.theta / ANGLE_STEP)))
        p = sums[kp.y + table[:, 1], kp.x + table[:, 0]]
        q = sums[kp.y + table[:, 3], kp.x + table[:, 2]]
        out[row] = np.packbits(p < q)
    return out


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances between two packed descriptor blocks."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return _POPCOUNT[a[:, None, :] ^ b[None, :, :]].sum(axis=2, dtype=np.int32)


def match(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    cross_check: bool = True,
    ratio: float | None = None,
) -> np.ndarray:
    """Brute-force descriptor matching.

    Each query descriptor takes its global minimum-distance partner
    (argmin ties resolve to the lower index). The optional ratio test drops a
    match when best > ratio * second_best; the default symmetric cross-check
    keeps (i, j) only when i is also the best partner of j. Returns an
    (M, 3) int array of (index_a, index_b, distance) sorted by index_a.
    """
    if len(desc_a) == 0 or len(desc_b) == 0:
        return np.empty((0, 3), dtype=np.int64)
    dist = hamming_matrix(desc_a, desc_b)
    best_b = dist.argmin(axis=1)
    rows = np.arange(len(desc_a))
    keep = np.ones(len(desc_a), dtype=bool)
    if ratio is not None and dist.shape[1] > 1:
        part = np.partition(dist, 1, axis=1)
        keep &= part[:, 0] <= ratio * part[:, 1]
    if cross_check:
        best_a = dist.argmin(axis=0)
        keep &= best_a[best_b] == rows
    idx = np.flatnonzero(keep)
    out = np.stack([idx, best_b[idx], dist[idx, best_b[idx]]], axis=1)
    return out.astype(np.int64)
