"""Simulation of coarse elliptical annotations from fine lesion masks.

Pipeline: closing -> dilation -> 8-connected components -> DBSCAN over the
component centroids (eps calibrated so the ellipse count is the number of
components divided by the reduction factor) -> one enclosing ellipse per
cluster -> rasterized union.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage as ndi
from sklearn.cluster import DBSCAN

from .errors import ValidationError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
MIN_SEMI_AXIS = 2.0


@dataclass(frozen=True)
class SimConfig:
    smoothing_radius: int = 2
    dilation_radius: int = 3
    expansion: float = 1.3
    min_points: int = 1
    reduction_factor: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.smoothing_radius < 0 or self.dilation_radius < 0:
            raise ValidationError("smoothing and dilation radii must be >= 0")
        if self.expansion < 1.0:
            raise ValidationError(f"expansion ratio must be >= 1.0, got {self.expansion}")
        if self.reduction_factor < 1.0:
            raise ValidationError(f"reduction factor must be >= 1.0, got {self.reduction_factor}")
        if self.min_points < 1:
            raise ValidationError("min_points must be >= 1")


@dataclass(frozen=True)
class EllipseParams:
    """Ellipse in image coordinates: x is the column axis, y the row axis."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValidationError(f"ellipse axes must satisfy a >= b > 0, got a={self.a}, b={self.b}")

    def contains(self, x, y):
        """Vectorized inside-or-on test for points (x, y)."""
        x = np.asarray(x, dtype=np.float64) - self.cx
        y = np.asarray(y, dtype=np.float64) - self.cy
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = x * c + y * s
        v = -x * s + y * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0 + 1e-9

    def bbox(self):
        """Axis-aligned extent as (x_min, y_min, x_max, y_max)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hx = math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2)
        hy = math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)
        return self.cx - hx, self.cy - hy, self.cx + hx, self.cy + hy

    def to_dict(self):
        return asdict(self)


@dataclass
class CoarseMask:
    mask: np.ndarray
    ellipses: list[EllipseParams] = field(default_factory=list)
    exact_count: bool = True

    @property
    def shape(self):
        return self.mask.shape


class EpsCalibration(NamedTuple):
    eps: float
    n_clusters: int
    exact: bool


def _disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return xx**2 + yy**2 <= r * r


def connected_components(mask):
    """8-connected components as (N, 2) arrays of (row, col), ordered by (min-row, min-col)."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndi.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    splits = np.flatnonzero(np.diff(lab)) + 1
    comps = [np.stack([r, c], axis=1) for r, c in zip(np.split(rows, splits), np.split(cols, splits))]
    comps.sort(key=lambda p: (int(p[:, 0].min()), int(p[:, 1].min())))
    return comps


def centroids(components):
    return np.array([p.mean(axis=0) for p in components], dtype=np.float64).reshape(-1, 2)


def dbscan_components(components, eps, min_points=1):
    """Cluster components by centroid distance; DBSCAN noise becomes singleton clusters.

    Cluster ids are renumbered in order of first appearance.
    """
    n = len(components)
    if n == 0:
        return []
    if eps <= 0:
        return list(range(n))
    labels = DBSCAN(eps=eps, min_samples=min_points).fit(centroids(components)).labels_
    out, remap, next_id = [], {}, 0
    for lab in labels:
        if lab < 0:
            out.append(next_id)
            next_id += 1
            continue
        if lab not in remap:
            remap[lab] = next_id
            next_id += 1
        out.append(remap[lab])
    return out


def target_cluster_count(n_components, reduction_factor):
    """Number of ellipses: component count divided by the reduction factor, at least one."""
    if reduction_factor < 1.0:
        raise ValidationError(f"reduction factor must be >= 1.0, got {reduction_factor}")
    if n_components <= 0:
        return 0
    return max(1, int(math.floor(n_components / reduction_factor + 0.5)))


def calibrate_eps(components, target, min_points=1, diagonal=None):
    """Pick the DBSCAN eps giving `target` clusters.

    The cluster count only changes at pairwise centroid distances, so the
    search runs over the intervals between consecutive distinct distances.
    The count is non-increasing in eps; a bisection finds the last interval
    with count >= target. Among equally good intervals the larger eps wins.
    """
    if target < 1:
        raise ValidationError("target cluster count must be >= 1")
    n = len(components)
    cent = centroids(components)
    if n <= 1:
        return EpsCalibration(float(diagonal or 1.0), n, n == target)
    diff = cent[:, None, :] - cent[None, :, :]
    dists = np.sqrt((diff**2).sum(-1))[np.triu_indices(n, 1)]
    cuts = np.unique(dists)
    top = float(diagonal) if diagonal is not None else float(cuts[-1]) + 1.0
    top = max(top, float(cuts[-1]))

    def rep(k):
        # interval k covers [cuts[k-1], cuts[k]); interval 0 is [0, cuts[0])
        if k == 0:
            return float(cuts[0]) / 2.0
        if k == len(cuts):
            return top
        return float(cuts[k - 1] + cuts[k]) / 2.0

    def count(k):
        return len(set(dbscan_components(components, rep(k), min_points)))

    lo, hi = 0, len(cuts)
    if count(0) < target:
        return EpsCalibration(rep(0), count(0), False)
    # invariant: count(lo) >= target
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count(mid) >= target:
            lo = mid
        else:
            hi = mid - 1
    c_lo = count(lo)
    if c_lo == target:
        return EpsCalibration(rep(lo), c_lo, True)
    if lo + 1 <= len(cuts):
        c_hi = count(lo + 1)
        if abs(c_hi - target) <= abs(c_lo - target):
            return EpsCalibration(rep(lo + 1), c_hi, False)
    return EpsCalibration(rep(lo), c_lo, False)


def fit_enclosing_ellipse(points, expansion=1.0):
    """Moment ellipse of the pixel squares, scaled to enclose every pixel corner.

    `points` is an (N, 2) array of (row, col) pixel indices.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise ValidationError("cannot fit an ellipse to an empty point set")
    xy = pts[:, ::-1]
    center = xy.mean(axis=0)
    # second moments of unit squares: point covariance + 1/12 per axis
    cov = np.cov(xy, rowvar=False, bias=True) if len(xy) > 1 else np.zeros((2, 2))
    cov = cov + np.eye(2) / 12.0
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, 1]
    theta = math.atan2(major[1], major[0]) % math.pi
    sd_major, sd_minor = math.sqrt(evals[1]), math.sqrt(evals[0])

    corners = (xy[:, None, :] + np.array([[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])).reshape(-1, 2)
    rel = corners - center
    c, s = math.cos(theta), math.sin(theta)
    u = rel[:, 0] * c + rel[:, 1] * s
    v = -rel[:, 0] * s + rel[:, 1] * c
    scale = math.sqrt(float(np.max((u / sd_major) ** 2 + (v / sd_minor) ** 2)))
    a = max(sd_major * scale * expansion, MIN_SEMI_AXIS)
    b = max(sd_minor * scale * expansion, MIN_SEMI_AXIS)
    if b > a:
        a, b = b, a
        theta = (theta + math.pi / 2) % math.pi
    return EllipseParams(float(center[0]), float(center[1]), float(a), float(b), float(theta))


def rasterize_ellipses(ellipses, shape):
    """Union of ellipses over pixel centers, clipped to `shape`."""
    h, w = shape
    out = np.zeros((h, w), dtype=bool)
    for e in ellipses:
        x0, y0, x1, y1 = e.bbox()
        c0, c1 = max(0, int(math.floor(x0))), min(w - 1, int(math.ceil(x1)))
        r0, r1 = max(0, int(math.floor(y0))), min(h - 1, int(math.ceil(y1)))
        if c0 > c1 or r0 > r1:
            continue
        yy, xx = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
        out[r0 : r1 + 1, c0 : c1 + 1] |= e.contains(xx, yy)
    return out


def _smooth_and_dilate(fine, config):
    pad = config.smoothing_radius + config.dilation_radius + 1
    m = np.pad(fine, pad)
    if config.smoothing_radius > 0:
        m = ndi.binary_closing(m, structure=_disk(config.smoothing_radius))
    m |= np.pad(fine, pad)
    if config.dilation_radius > 0:
        m = ndi.binary_dilation(m, structure=_disk(config.dilation_radius))
    return m[pad:-pad, pad:-pad]


def simulate_coarse_mask(fine_mask, config=None):
    config = config or SimConfig()
    fine = np.asarray(fine_mask).astype(bool)
    if fine.ndim != 2:
        raise ValidationError(f"fine mask must be 2-D, got shape {fine.shape}")
    if not fine.any():
        return CoarseMask(np.zeros_like(fine), [])

    grown = _smooth_and_dilate(fine, config)
    comps = connected_components(grown)
    target = target_cluster_count(len(comps), config.reduction_factor)
    diag = math.hypot(*fine.shape)
    calib = calibrate_eps(comps, target, config.min_points, diagonal=diag)
    cluster_ids = dbscan_components(comps, calib.eps, config.min_points)

    ellipses = []
    for cid in sorted(set(cluster_ids)):
        pts = np.concatenate([p for p, k in zip(comps, cluster_ids) if k == cid])
        ellipses.append(fit_enclosing_ellipse(pts, config.expansion))
    return CoarseMask(rasterize_ellipses(ellipses, fine.shape), ellipses, calib.exact)


def coverage(fine_mask, coarse_mask):
    fine = np.asarray(fine_mask, dtype=bool)
    n = fine.sum()
    if n == 0:
        return 1.0
    return float((fine & np.asarray(coarse_mask, dtype=bool)).sum() / n)


def write_ellipse_sidecar(path, image_id, lesion_class, coarse, reduction_factor):
    doc = {
        "image_id": image_id,
        "class": lesion_class,
        "ellipses": [e.to_dict() for e in coarse.ellipses],
        "reduction_factor": reduction_factor,
        "shape": list(coarse.shape),
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def read_ellipse_sidecar(path, shape=None):
    doc = json.loads(Path(path).read_text())
    ellipses = [EllipseParams(**e) for e in doc["ellipses"]]
    shape = tuple(shape or doc["shape"])
    return doc, CoarseMask(rasterize_ellipses(ellipses, shape), ellipses)
