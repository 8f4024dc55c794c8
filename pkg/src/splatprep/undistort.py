"""Pinhole lens distortion correction.

The model is the five-coefficient radial/tangential form on normalized
coordinates: three radial terms (k1, k2, k3) and two tangential (p1, p2).
The forward map sends distorted to undistorted coordinates; resampling an
image inverts it per output pixel with vectorized Newton iteration.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

NEWTON_ITERATIONS = 20
NEWTON_TOL = 1e-8


@dataclass(frozen=True)
class DistortionModel:
    """Intrinsics and distortion coefficients.

    fx, fy are focal lengths in pixels, (cx, cy) the principal point.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def is_identity(self) -> bool:
        return self.k1 == self.k2 == self.k3 == self.p1 == self.p2 == 0.0


def distort_normalized(model: DistortionModel, xy: np.ndarray) -> np.ndarray:
    """Forward model on normalized (N, 2) coordinates: distorted -> undistorted."""
    xy = np.asarray(xy, dtype=np.float64)
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (model.k1 + r2 * (model.k2 + r2 * model.k3))
    xu = x * radial + 2.0 * model.p1 * x * y + model.p2 * (r2 + 2.0 * x * x)
    yu = y * radial + model.p1 * (r2 + 2.0 * y * y) + 2.0 * model.p2 * x * y
    return np.stack([xu, yu], axis=-1)


def _forward_jacobian(model: DistortionModel, x: np.ndarray, y: np.ndarray):
    """Partial derivatives of the forward model at (x, y)."""
    r2 = x * x + y * y
    radial = 1.0 + r2 * (model.k1 + r2 * (model.k2 + r2 * model.k3))
    dradial = model.k1 + r2 * (2.0 * model.k2 + 3.0 * model.k3 * r2)
    j00 = radial + 2.0 * x * x * dradial + 2.0 * model.p1 * y + 6.0 * model.p2 * x
    j01 = 2.0 * x * y * dradial + 2.0 * model.p1 * x + 2.0 * model.p2 * y
    j10 = 2.0 * x * y * dradial + 2.0 * model.p1 * x + 2.0 * model.p2 * y
    j11 = radial + 2.0 * y * y * dradial + 6.0 * model.p1 * y + 2.0 * model.p2 * x
    return j00, j01, j10, j11


def invert_normalized(model: DistortionModel, xy_undist: np.ndarray) -> np.ndarray:
    """Distorted coordinates whose forward image is xy_undist.

    Newton iteration from the undistorted point, at most NEWTON_ITERATIONS
    steps or until the residual drops under NEWTON_TOL.
    """
    target = np.asarray(xy_undist, dtype=np.float64)
    x = target[..., 0].copy()
    y = target[..., 1].copy()
    for _ in range(NEWTON_ITERATIONS):
        fwd = distort_normalized(model, np.stack([x, y], axis=-1))
        rx = fwd[..., 0] - target[..., 0]
        ry = fwd[..., 1] - target[..., 1]
        if max(np.abs(rx).max(initial=0.0), np.abs(ry).max(initial=0.0)) < NEWTON_TOL:
            break
        j00, j01, j10, j11 = _forward_jacobian(model, x, y)
        det = j00 * j11 - j01 * j10
        det = np.where(np.abs(det) < 1e-15, 1.0, det)
        x -= (j11 * rx - j01 * ry) / det
        y -= (j00 * ry - j10 * rx) / det
    return np.stack([x, y], axis=-1)


def undistort_point(model: DistortionModel, uv: np.ndarray) -> np.ndarray:
    """Map distorted pixel coordinates to undistorted pixel coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    norm = np.stack(
        [(uv[..., 0] - model.cx) / model.fx, (uv[..., 1] - model.cy) / model.fy], axis=-1
    )
    und = distort_normalized(model, norm)
    return np.stack(
        [und[..., 0] * model.fx + model.cx, und[..., 1] * model.fy + model.cy], axis=-1
    )


def undistort_image(model: DistortionModel, img: np.ndarray) -> np.ndarray:
    """Resample an image so straight scene lines become straight.

    Each output (undistorted) pixel pulls from the distorted source location
    found by inverting the forward model, with bilinear interpolation.
    Source locations outside the image produce black pixels. Color images
    are handled per channel with a shared mapping.
    """
    img = np.asarray(img)
    h, w = img.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    norm = np.stack([(gx - model.cx) / model.fx, (gy - model.cy) / model.fy], axis=-1)
    dist = invert_normalized(model, norm)
    sx = dist[..., 0] * model.fx + model.cx
    sy = dist[..., 1] * model.fy + model.cy

    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = sx - x0
    fy = sy - y0

    def sample(chan: np.ndarray) -> np.ndarray:
        c = chan.astype(np.float64)
        top = c[y0, x0] * (1 - fx) + c[y0, x1] * fx
        bot = c[y1, x0] * (1 - fx) + c[y1, x1] * fx
        out = top * (1 - fy) + bot * fy
        return np.where(valid, np.floor(out + 0.5), 0.0).astype(np.uint8)

    if img.ndim == 2:
        return sample(img)
    return np.stack([sample(img[:, :, c]) for c in range(img.shape[2])], axis=-1)


def parse_intrinsics(path) -> DistortionModel:
    """Read fx fy cx cy k1 k2 k3 p1 p2 from a small text file.

    Values are whitespace or newline separated, in that order; '#' starts a
    comment.
    """
    values: list[float] = []
    with open(path, "r", encoding="ascii") as fh:
        for raw in fh:
            body = raw.split("#", 1)[0]
            for tok in body.split():
                try:
                    values.append(float(tok))
                except ValueError:
                    raise ConfigError(f"intrinsics file {path}: bad number {tok!r}") from None
    if len(values) != 9:
        raise ConfigError(f"intrinsics file {path}: expected 9 values, found {len(values)}")
    fx, fy, cx, cy, k1, k2, k3, p1, p2 = values
    return DistortionModel(fx=fx, fy=fy, cx=cx, cy=cy, k1=k1, k2=k2, k3=k3, p1=p1, p2=p2)
