"""Density reduction for color-mapped LiDAR clouds.

Two stages, always in this order: statistical outlier removal based on mean
neighbor distance, then per-color subsampling that caps every exact RGB
bucket at n points. Both stages return subsets of the input; no coordinate
or color is ever rewritten.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, SpatialIndex


class CloudTooSmallWarning(UserWarning):
    """Outlier removal skipped because the cloud has too few points."""


@dataclass(frozen=True)
class ChromaParams:
    """Knobs for the full filter.

    max_points_per_color is the cap n; quantize divides each channel before
    bucketing (1 keeps exact 24-bit colors); knn/alpha drive outlier removal.
    """

    max_points_per_color: int = 10
    knn: int = 20
    alpha: float = 2.0
    quantize: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_points_per_color < 1:
            raise ValueError("max_points_per_color must be >= 1")
        if self.knn < 1:
            raise ValueError("knn must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.quantize < 1:
            raise ValueError("quantize must be >= 1")


def remove_outliers(cloud: PointCloud, k: int = 20, alpha: float = 2.0) -> PointCloud:
    """Drop points whose mean distance to their k nearest neighbors is high.

    A point survives when d(p) <= mean(d) + alpha * std(d), with d the mean
    distance to the k nearest other points and the statistics taken over the
    whole cloud (population standard deviation). Survivors keep their
    relative order. Clouds with fewer than k + 1 points are returned
    unchanged with a CloudTooSmallWarning.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if len(cloud) < k + 1:
        warnings.warn(
            f"cloud has {len(cloud)} points, need at least {k + 1} for k={k}; "
            "outlier removal skipped",
            CloudTooSmallWarning,
            stacklevel=2,
        )
        return cloud
    mean_d = SpatialIndex(cloud).neighbor_mean_distances(k)
    threshold = mean_d.mean() + alpha * mean_d.std()
    keep = np.flatnonzero(mean_d <= threshold)
    return cloud.select(keep)


def bucket_by_color(cloud: PointCloud, quantize: int = 1) -> dict[tuple[int, int, int], np.ndarray]:
    """Partition point indices by color.

    Returns a dict mapping an RGB key (each channel integer-divided by
    ``quantize``) to the sorted array of point indices holding that key.
    Every index lands in exactly one bucket.
    """
    if quantize < 1:
        raise ValueError("quantize must be >= 1")
    colors = cloud.colors.astype(np.int64)
    if quantize > 1:
        colors = colors // quantize
    # Single sort over packed keys; buckets come out index-sorted for free.
    packed = (colors[:, 0] << 16) | (colors[:, 1] << 8) | colors[:, 2]
    order = np.argsort(packed, kind="stable")
    sorted_keys = packed[order]
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    ends = np.r_[starts[1:], len(sorted_keys)]
    buckets: dict[tuple[int, int, int], np.ndarray] = {}
    for s, e in zip(starts, ends):
        key = int(sorted_keys[s])
        rgb = (key >> 16, (key >> 8) & 0xFF, key & 0xFF)
        buckets[rgb] = order[s:e]
    return buckets


def _bucket_rng(seed: int, key: tuple[int, int, int]) -> np.random.Generator:
    # One independent stream per bucket, derived from (seed, key) only, so
    # the draw for a bucket does not depend on how many other buckets exist.
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, *key])


def subsample_by_color(cloud: PointCloud, n: int, seed: int = 0, quantize: int = 1) -> PointCloud:
    """Cap every color bucket at n points, sampled uniformly without replacement.

    Buckets holding n or fewer points pass through whole. The output is a
    subset of the input in original point order, and is identical for
    identical (cloud, n, seed, quantize).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    buckets = bucket_by_color(cloud, quantize=quantize)
    chosen: list[np.ndarray] = []
    for key in sorted(buckets):
        idx = buckets[key]
        if len(idx) <= n:
            chosen.append(idx)
        else:
            pick = _bucket_rng(seed, key).choice(len(idx), size=n, replace=False)
            chosen.append(idx[pick])
    if not chosen:
        return cloud.select(np.empty(0, dtype=np.intp))
    keep = np.sort(np.concatenate(chosen))
    return cloud.select(keep)


def chroma_filter(cloud: PointCloud, params: ChromaParams) -> PointCloud:
    """Outlier removal followed by color-capped subsampling."""
    cleaned = remove_outliers(cloud, k=params.knn, alpha=params.alpha)
    return subsample_by_color(
        cleaned, params.max_points_per_color, seed=params.seed, quantize=params.quantize
    )
