"""Planar homography estimation and image warping.

Estimation is direct linear transform on normalized coordinates inside a
seeded RANSAC loop: minimal samples of 4 matches, collinearity-rejected,
scored by forward reprojection error, with a final least-squares refit on
the inlier set. Matrices are always normalized so h33 = 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import HomographyError

_COLLINEAR_EPS = 1e-9


@dataclass(frozen=True)
class Homography:
    """3x3 projective map with h33 fixed to 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("homography contains non-finite entries")
        if abs(m[2, 2]) < 1e-15:
            raise ValueError("h33 is zero; cannot normalize")
        object.__setattr__(self, "matrix", m / m[2, 2])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) pixel points through the homography."""
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 1
        pts = np.atleast_2d(pts)
        ones = np.ones((len(pts), 1))
        proj = np.hstack([pts, ones]) @ self.matrix.T
        w = proj[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise ValueError("point maps to infinity under this homography")
        out = proj[:, :2] / w[:, None]
        return out[0] if squeeze else out

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: (self @ other).apply(p) == self.apply(other.apply(p))."""
        return Homography(self.matrix @ other.matrix)


@dataclass(frozen=True)
class RansacParams:
    iterations: int = 2000
    threshold: float = 3.0
    confidence: float = 0.9999
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")


def _normalization(points: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin and mean radius to sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.linalg.norm(points - centroid, axis=1).mean()
    scale = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Least-squares homography from >= 4 correspondences (algebraic error)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 4:
        raise ValueError("need matching (N, 2) arrays with N >= 4")
    t_src = _normalization(src)
    t_dst = _normalization(dst)
    s = (np.hstack([src, np.ones((len(src), 1))]) @ t_src.T)[:, :2]
    d = (np.hstack([dst, np.ones((len(dst), 1))]) @ t_dst.T)[:, :2]
    n = len(s)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -s * d[:, :1]
    a[0::2, 8] = -d[:, 0]
    a[1::2, 3:5] = s
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -s * d[:, 1:2]
    a[1::2, 8] = -d[:, 1]
    _, _, vt = np.linalg.svd(a)
    h_norm = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(h[2, 2]) < 1e-15:
        raise HomographyError("degenerate solution (h33 = 0)")
    return Homography(h)


def _any_three_collinear(pts: np.ndarray) -> bool:
    scale = max(1.0, float(np.abs(pts).max()))
    for i in range(2):
        for j in range(i + 1, 3):
            for k in range(j + 1, 4):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                if abs(u[0] * v[1] - u[1] * v[0]) <= _COLLINEAR_EPS * scale * scale:
                    return True
    return False


def reprojection_errors(h: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Forward transfer error |dst - H(src)| per correspondence."""
    m = h.matrix
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    proj = np.hstack([src, np.ones((len(src), 1))]) @ m.T
    w = proj[:, 2]
    err = np.full(len(src), np.inf)
    ok = np.abs(w) > 1e-12
    diff = proj[ok, :2] / w[ok, None] - dst[ok]
    err[ok] = np.linalg.norm(diff, axis=1)
    return err


def estimate_homography(
    src: np.ndarray,
    dst: np.ndarray,
    params: RansacParams = RansacParams(),
) -> tuple[Homography, np.ndarray]:
    """Robust homography from noisy matches.

    Runs seeded RANSAC over minimal 4-point samples (samples with any three
    collinear points in either image are skipped), keeps the model with the
    most inliers (ties by smaller inlier error sum), then refits by DLT on
    the inlier set until the set stabilizes. The iteration budget shrinks
    adaptively as the observed inlier ratio rises, never exceeding
    params.iterations.

    Returns (homography, inlier index array). Raises HomographyError when
    fewer than 4 matches are given or no valid sample is found.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("need matching (N, 2) arrays")
    n = len(src)
    if n < 4:
        raise HomographyError(f"need at least 4 matches, got {n}")

    rng = np.random.default_rng(params.seed & 0xFFFFFFFFFFFFFFFF)
    best_inliers: np.ndarray | None = None
    best_score = (-1, np.inf)
    budget = params.iterations
    log_term = np.log1p(-params.confidence)

    it = 0
    while it < budget:
        it += 1
        sample = rng.choice(n, size=4, replace=False)
        if _any_three_collinear(src[sample]) or _any_three_collinear(dst[sample]):
            continue
        try:
            h = dlt_homography(src[sample], dst[sample])
        except (HomographyError, np.linalg.LinAlgError):
            continue
        err = reprojection_errors(h, src, dst)
        inliers = err <= params.threshold
        count = int(inliers.sum())
        score = (count, float(err[inliers].sum()))
        if count >= 4 and (count > best_score[0] or (count == best_score[0] and score[1] < best_score[1])):
            best_score = score
            best_inliers = np.flatnonzero(inliers)
            ratio = count / n
            if ratio < 1.0:
                needed = log_term / np.log1p(-(ratio**4))
                budget = min(params.iterations, max(it, int(np.ceil(needed))))
            else:
                budget = it

    if best_inliers is None:
        raise HomographyError("no valid minimal sample produced a model")

    # Refit on inliers and let the inlier set settle.
    inlier_idx = best_inliers
    h = dlt_homography(src[inlier_idx], dst[inlier_idx])
    for _ in range(10):
        err = reprojection_errors(h, src, dst)
        new_idx = np.flatnonzero(err <= params.threshold)
        if len(new_idx) < 4 or np.array_equal(new_idx, inlier_idx):
            break
        inlier_idx = new_idx
        h = dlt_homography(src[inlier_idx], dst[inlier_idx])
    return h, inlier_idx


def warp_image(
    img: np.ndarray,
    h: Homography,
    out_shape: tuple[int, int] | None = None,
    offset: tuple[float, float] = (0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Warp a grayscale image by H with bilinear sampling.

    Output pixel (x, y) is sampled from the source at H^-1 (x + ox, y + oy);
    out_shape defaults to the input shape and offset shifts the output
    canvas, which lets callers render onto an enlarged canvas. Returns
    (warped uint8 image, validity mask); pixels whose preimage falls outside
    the source are zero and invalid.
    """
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("warp expects a grayscale image")
    hh, ww = img.shape
    out_h, out_w = out_shape if out_shape is not None else (hh, ww)
    inv = h.inverse().matrix

    xs = np.arange(out_w, dtype=np.float64) + offset[0]
    ys = np.arange(out_h, dtype=np.float64) + offset[1]
    gx, gy = np.meshgrid(xs, ys)
    w = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    safe = np.abs(w) > 1e-12
    w_safe = np.where(safe, w, 1.0)
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / w_safe
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / w_safe

    valid = safe & (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1)
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, ww - 1)
    y1 = np.minimum(y0 + 1, hh - 1)
    fx = sx - x0
    fy = sy - y0

    flat = img.astype(np.float64)
    top = flat[y0, x0] * (1 - fx) + flat[y0, x1] * fx
    bot = flat[y1, x0] * (1 - fx) + flat[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    warped = np.where(valid, np.floor(out + 0.5), 0.0).astype(np.uint8)
    return warped, valid
