"""Layout entropy of UI element centres and difficulty bucketing.

E_layout = N^w_N * (w_1D * mean_j H_1D(theta_j) + w_2D * H_2D), natural log,
0 log 0 := 0. Centres are fractions of the screen in [0, 1]^2.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import numpy as np

from errors import UndefinedEntropyError, ValidationError
from schema import NormPoint

logger = logging.getLogger(__name__)


class DifficultyBucket(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @property
    def level(self):
        return list(DifficultyBucket).index(self)


@dataclass(frozen=True)
class EntropyConfig:
    d: int = 4
    b: int = 16
    m: int = 8
    w_n: float = 0.5
    w_1d: float = 0.5
    w_2d: float = 0.5

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError(f"D={self.d} must be >= 1")
        if self.b < 2:
            raise ValidationError(f"B={self.b} must be >= 2")
        if self.m < 2:
            raise ValidationError(f"M={self.m} must be >= 2")
        if min(self.w_n, self.w_1d, self.w_2d) < 0:
            raise ValidationError("entropy weights must be non-negative")
        if self.w_1d + self.w_2d <= 0:
            raise ValidationError("w_1d + w_2d must be positive")

    @property
    def thetas(self):
        return [j * math.pi / self.d for j in range(self.d)]


@dataclass(frozen=True)
class EntropyReport:
    image_id: str
    n: int
    h1d_per_direction: tuple
    h1d_avg: float
    h2d: float
    e_layout: float
    total_pixels: int
    bucket: Optional[DifficultyBucket] = None
    degenerate: bool = False

    def to_dict(self):
        return {
            'image_id': self.image_id,
            'n': self.n,
            'h1d_per_direction': list(self.h1d_per_direction),
            'h1d_avg': self.h1d_avg,
            'h2d': self.h2d,
            'e_layout': self.e_layout,
            'total_pixels': self.total_pixels,
            'bucket': self.bucket.value if self.bucket else None,
            'degenerate': self.degenerate,
        }


def _entropy_from_counts(counts):
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise UndefinedEntropyError("entropy of an empty distribution")
    p = counts[counts > 0] / total
    return float(-np.sum(p * np.log(p)))


def project_center(p, theta):
    """z = x sin(theta) + y cos(theta); theta = 0 projects onto the vertical axis"""
    return p.x * math.sin(theta) + p.y * math.cos(theta)


def projection_range(theta):
    """Achievable projection interval of [0, 1]^2 onto direction theta"""
    s, c = math.sin(theta), math.cos(theta)
    return min(0.0, s) + min(0.0, c), max(0.0, s) + max(0.0, c)


def histogram_entropy(values, bins):
    """-sum p log p of values histogrammed into `bins` (edge array)"""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise UndefinedEntropyError("entropy of an empty value list")
    edges = np.asarray(bins, dtype=float)
    # Keep values that sit on the range ends inside the outer bins
    counts, _ = np.histogram(np.clip(values, edges[0], edges[-1]), bins=edges)
    return _entropy_from_counts(counts)


def _as_array(centers):
    return np.array([[c.x, c.y] for c in centers], dtype=float).reshape(-1, 2)


def h1d_avg(centers, cfg):
    """Per-direction projection entropies and their mean"""
    xy = _as_array(centers)
    if len(xy) == 0:
        raise UndefinedEntropyError("no centres to project")
    per_direction = []
    for theta in cfg.thetas:
        z = xy[:, 0] * math.sin(theta) + xy[:, 1] * math.cos(theta)
        lo, hi = projection_range(theta)
        per_direction.append(histogram_entropy(z, np.linspace(lo, hi, cfg.b + 1)))
    return per_direction, float(np.mean(per_direction))


def h2d_grid(centers, m):
    """Entropy of centre occupancy over an m x m grid"""
    xy = _as_array(centers)
    if len(xy) == 0:
        raise UndefinedEntropyError("no centres to grid")
    cells = np.minimum(np.floor(xy * m).astype(int), m - 1)
    counts = np.bincount(cells[:, 0] * m + cells[:, 1], minlength=m * m)
    return _entropy_from_counts(counts)


def resolution_priority(image_size):
    """Total pixels W*H, the resolution prioritization key"""
    width, height = image_size
    return int(width) * int(height)


def layout_entropy(centers, image_id, image_size, cfg):
    centers = list(centers)
    total_pixels = resolution_priority(image_size)
    if not centers:
        logger.warning(f"No element centres for {image_id}; reporting zero entropy")
        return EntropyReport(image_id, 0, tuple([0.0] * cfg.d), 0.0, 0.0, 0.0, total_pixels, degenerate=True)
    per_direction, mean_1d = h1d_avg(centers, cfg)
    h2d = h2d_grid(centers, cfg.m)
    n = len(centers)
    e_layout = n ** cfg.w_n * (cfg.w_1d * mean_1d + cfg.w_2d * h2d)
    return EntropyReport(image_id, n, tuple(per_direction), mean_1d, h2d, e_layout, total_pixels)


def _rank_cut(q, n):
    # nearest-rank quantile index; the epsilon keeps 0.3 * 100 from landing on 31
    return max(1, math.ceil(q * n - 1e-9)) - 1


def bucket_dataset(reports, quantiles=(1 / 3, 2 / 3)):
    """Assign Easy / Medium / Hard from E_layout quantiles; ties go to the lower bucket

    Easy: E <= Q(q_easy); Hard: E > Q(q_hard); otherwise Medium, with Q the
    nearest-rank quantile over a stable sort on (E, image_id).
    """
    q_easy, q_hard = quantiles
    if not 0.0 < q_easy < q_hard < 1.0:
        raise ValidationError(f"quantiles must satisfy 0 < q_easy < q_hard < 1, got {quantiles}")
    reports = list(reports)
    if not reports:
        return []
    ordered = sorted(reports, key=lambda r: (r.e_layout, r.image_id))
    n = len(ordered)
    easy_cut = ordered[_rank_cut(q_easy, n)].e_layout
    hard_cut = ordered[_rank_cut(q_hard, n)].e_layout

    def bucket(e):
        if e <= easy_cut:
            return DifficultyBucket.EASY
        if e > hard_cut:
            return DifficultyBucket.HARD
        return DifficultyBucket.MEDIUM

    bucketed = [replace(r, bucket=bucket(r.e_layout)) for r in reports]
    counts = {b.value: sum(r.bucket is b for r in bucketed) for b in DifficultyBucket}
    logger.info(f"Bucketed {n} reports: {counts}", extra={'stage': 'entropy', 'buckets': counts})
    return bucketed


def priority_order(reports):
    """Hardest bucket first, then larger images first (higher information density)"""
    return sorted(reports, key=lambda r: (-(r.bucket.level if r.bucket else -1),
                                          -r.total_pixels, r.image_id))


def centers_from_detections(dets):
    return dets.centers()


def centers_from_annotations(samples):
    """Annotation centres of all samples that share one image"""
    return [s.annotation if isinstance(s.annotation, NormPoint) else s.annotation.center for s in samples]
