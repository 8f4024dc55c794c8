"""Image quality metrics and result-table arithmetic.

All metrics take 8-bit images. SSIM uses Gaussian-weighted local statistics
over every position where the window fits entirely inside the image; PSNR
pools squared error across channels. Identical images produce an infinite
PSNR sentinel that is serialized as the string "inf" and excluded from
averages.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .image import load_image

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.2


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    c1: float = (0.01 * 255.0) ** 2
    c2: float = (0.03 * 255.0) ** 2

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError("window must be a positive odd size")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class ImagePair:
    """Observed (ground-truth) and rendered images of identical shape."""

    observed: np.ndarray
    rendered: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=np.uint8)
        ren = np.asarray(self.rendered, dtype=np.uint8)
        if obs.shape != ren.shape:
            raise ValueError(f"image shapes differ: {obs.shape} vs {ren.shape}")
        if obs.ndim not in (2, 3):
            raise ValueError("images must be (H, W) or (H, W, C)")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "rendered", ren)

    def channels(self):
        if self.observed.ndim == 2:
            yield self.observed, self.rendered
        else:
            for c in range(self.observed.shape[2]):
                yield self.observed[:, :, c], self.rendered[:, :, c]


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2D Gaussian weights."""
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def l1_loss(pair: ImagePair) -> float:
    """Mean absolute error on intensities normalized to [0, 1]."""
    diff = np.abs(
        pair.observed.astype(np.float64) - pair.rendered.astype(np.float64)
    )
    return float(diff.mean() / 255.0)


def _ssim_channel(x: np.ndarray, y: np.ndarray, params: SsimParams) -> float:
    half = (params.window - 1) // 2
    g = np.exp(
        -((np.arange(params.window) - half) ** 2) / (2.0 * params.sigma**2)
    )
    g /= g.sum()

    def smooth(a: np.ndarray) -> np.ndarray:
        out = correlate1d(a, g, axis=0, mode="constant")
        out = correlate1d(out, g, axis=1, mode="constant")
        return out[half:-half, half:-half]

    x = x.astype(np.float64)
    y = y.astype(np.float64)
    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = smooth(x * x) - mu_x * mu_x
    var_y = smooth(y * y) - mu_y * mu_y
    cov = smooth(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + params.c1) * (2.0 * cov + params.c2)
    den = (mu_x**2 + mu_y**2 + params.c1) * (var_x + var_y + params.c2)
    return float((num / den).mean())


def ssim(pair: ImagePair, params: SsimParams = SsimParams()) -> float:
    """Mean structural similarity over all fully interior window positions.

    Local means, variances, and covariance are Gaussian-weighted; channels
    are scored independently and averaged.
    """
    h, w = pair.observed.shape[:2]
    if h < params.window or w < params.window:
        raise ValueError(f"images must be at least {params.window} pixels per side")
    scores = [_ssim_channel(x, y, params) for x, y in pair.channels()]
    return float(np.mean(scores))


def combined_loss(
    pair: ImagePair, lam: float = DEFAULT_LAMBDA, params: SsimParams = SsimParams()
) -> float:
    """(1 - lam) * L1 + lam * (1 - SSIM)."""
    if not 0 <= lam <= 1:
        raise ValueError("lam must be in [0, 1]")
    return (1.0 - lam) * l1_loss(pair) + lam * (1.0 - ssim(pair, params))


def psnr(pair: ImagePair) -> float:
    """Peak signal-to-noise ratio in dB against a 255 peak.

    Squared error is pooled over all pixels and channels. Identical images
    return math.inf.
    """
    diff = pair.observed.astype(np.float64) - pair.rendered.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


@dataclass(frozen=True)
class MetricsRecord:
    """One table cell: a run (or image) scored with every metric."""

    label: str    # row key: spherical-harmonic increment, or filename for per-image rows
    density: str  # column key: "vanilla" or a cap label like "n=10"
    psnr: float
    ssim: float
    loss: float
    l1: float | None = None
    train_time: float | None = None


@dataclass(frozen=True)
class MetricTable:
    """Values of one metric arranged rows x density columns, with summary rows."""

    metric: str
    higher_is_better: bool
    rows: list[str]
    columns: list[str]
    cells: dict[str, dict[str, float]]
    averages: dict[str, float]
    increase_abs: dict[str, float | None]
    increase_pct: dict[str, float | None]
    best: dict[str, str] = field(default_factory=dict)
    second: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class QualityReport:
    baseline: str
    tables: dict[str, MetricTable]

    def to_dict(self) -> dict:
        def enc(v):
            if v is None:
                return None
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            return v

        out: dict = {"baseline": self.baseline, "metrics": {}}
        for name, t in self.tables.items():
            out["metrics"][name] = {
                "higher_is_better": t.higher_is_better,
                "rows": t.rows,
                "columns": t.columns,
                "cells": {r: {c: enc(v) for c, v in cols.items()} for r, cols in t.cells.items()},
                "average": {c: enc(v) for c, v in t.averages.items()},
                "increase_abs": {c: enc(v) for c, v in t.increase_abs.items()},
                "increase_pct": {c: enc(v) for c, v in t.increase_pct.items()},
                "best_per_row": t.best,
                "second_per_row": t.second,
            }
        return out


def _column_average(values: list[float], metric: str, column: str) -> float:
    finite = [v for v in values if not math.isinf(v)]
    if len(finite) < len(values):
        logger.warning(
            "%s column %r: %d identical-image sentinel(s) excluded from the average",
            metric, column, len(values) - len(finite),
        )
    if not finite:
        return math.inf
    return float(np.mean(finite))


def build_report(records: list[MetricsRecord], baseline: str = "vanilla") -> QualityReport:
    """Arrange per-run records into metric tables with summary arithmetic.

    Column averages skip infinite PSNR sentinels. The increase rows compare
    each column average against the baseline column: absolute difference and
    100 * absolute / baseline. Per row, the best and second-best columns are
    flagged for each metric (direction-aware).
    """
    if not records:
        raise ValueError("no records given")
    rows = list(dict.fromkeys(r.label for r in records))
    columns = list(dict.fromkeys(r.density for r in records))
    if baseline not in columns:
        raise ValueError(f"baseline column {baseline!r} not present in records")

    metric_fields = [("psnr", True), ("ssim", True), ("loss", False)]
    if all(r.l1 is not None for r in records):
        metric_fields.append(("l1", False))
    if all(r.train_time is not None for r in records):
        metric_fields.append(("train_time", False))

    by_key = {(r.label, r.density): r for r in records}
    tables: dict[str, MetricTable] = {}
    for metric, higher in metric_fields:
        cells: dict[str, dict[str, float]] = {}
        for row in rows:
            cells[row] = {}
            for col in columns:
                rec = by_key.get((row, col))
                if rec is None:
                    raise ValueError(f"missing record for row {row!r}, column {col!r}")
                cells[row][col] = float(getattr(rec, metric))
        averages = {
            col: _column_average([cells[row][col] for row in rows], metric, col)
            for col in columns
        }
        base_avg = averages[baseline]
        increase_abs: dict[str, float | None] = {}
        increase_pct: dict[str, float | None] = {}
        for col in columns:
            if col == baseline or math.isinf(base_avg) or math.isinf(averages[col]):
                increase_abs[col] = None
                increase_pct[col] = None
            else:
                inc = averages[col] - base_avg
                increase_abs[col] = inc
                increase_pct[col] = 100.0 * inc / base_avg
        best: dict[str, str] = {}
        second: dict[str, str] = {}
        for row in rows:
            ordered = sorted(
                columns,
                key=lambda c: (-cells[row][c] if higher else cells[row][c], columns.index(c)),
            )
            best[row] = ordered[0]
            if len(ordered) > 1:
                second[row] = ordered[1]
        tables[metric] = MetricTable(
            metric, higher, rows, columns, cells, averages, increase_abs, increase_pct,
            best, second,
        )
    return QualityReport(baseline, tables)


def pair_filenames(observed_dir, rendered_dir) -> tuple[list[str], list[str]]:
    """Names present in both directories, and names present in only one."""
    obs = {p.name for p in Path(observed_dir).iterdir() if p.is_file()}
    ren = {p.name for p in Path(rendered_dir).iterdir() if p.is_file()}
    return sorted(obs & ren), sorted(obs ^ ren)


def evaluate_dir(
    observed_dir,
    rendered_dir,
    lam: float = DEFAULT_LAMBDA,
    params: SsimParams = SsimParams(),
    density: str = "",
) -> list[MetricsRecord]:
    """Score every same-named image pair under two directories.

    Returns one record per matched filename plus a final "average" summary
    record. Unmatched filenames are logged and skipped; infinite PSNR values
    are excluded from the summary average.
    """
    matched, unmatched = pair_filenames(observed_dir, rendered_dir)
    for name in unmatched:
        logger.warning("no counterpart for %r; skipped", name)
    if not matched:
        raise ValueError("no matching filenames between the two directories")
    records = []
    for name in matched:
        pair = ImagePair(
            load_image(Path(observed_dir) / name), load_image(Path(rendered_dir) / name)
        )
        s = ssim(pair, params)
        l1 = l1_loss(pair)
        records.append(
            MetricsRecord(
                label=name,
                density=density,
                psnr=psnr(pair),
                ssim=s,
                loss=(1.0 - lam) * l1 + lam * (1.0 - s),
                l1=l1,
            )
        )
    records.append(
        MetricsRecord(
            label="average",
            density=density,
            psnr=_column_average([r.psnr for r in records], "psnr", density or "eval"),
            ssim=float(np.mean([r.ssim for r in records])),
            loss=float(np.mean([r.loss for r in records])),
            l1=float(np.mean([r.l1 for r in records])),
        )
    )
    return records
