"""Masked SLIC over a feature map.

Clustering runs in feature space plus image coordinates, restricted to a
binary mask. Seeds sit at successive maxima of the in-mask distance to the
boundary and to earlier seeds, so the result is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from .errors import ValidationError

OUTSIDE = -1
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class SuperpixelLabeling:
    labels: np.ndarray  # (H, W) int, OUTSIDE off the mask
    n_eff: int
    n_iter: int
    cost_history: list[float] = field(default_factory=list)

    def regions(self):
        """Boolean (n_eff, H, W) stack, one region per label."""
        return self.labels[None] == np.arange(self.n_eff)[:, None, None]


def _as_hwc(features, shape):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 2:
        f = f[..., None]
    if f.ndim != 3 or f.shape[:2] != tuple(shape):
        raise ValidationError(f"features {f.shape} do not match mask {tuple(shape)}")
    return f


def place_seeds(mask, n):
    """Indices (into the masked-pixel list) of `n` seeds.

    Each new seed maximizes min(distance to the mask boundary, distance to
    prior seeds); ties go to the first pixel in raster order.
    """
    rows, cols = np.nonzero(mask)
    boundary = ndi.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1][rows, cols]
    to_seed = np.full(len(rows), np.inf)
    seeds = []
    for _ in range(n):
        k = int(np.argmax(np.minimum(boundary, to_seed)))
        seeds.append(k)
        to_seed = np.minimum(to_seed, np.hypot(rows - rows[k], cols - cols[k]))
    return np.array(seeds, dtype=int)


def _distances(feat, pos, centers_f, centers_x, spatial_w):
    df = np.sqrt(((feat[:, None, :] - centers_f[None]) ** 2).sum(-1))
    dx = np.sqrt(((pos[:, None, :] - centers_x[None]) ** 2).sum(-1))
    return df + spatial_w * dx


def _geomedian_step(points, center, weights_floor=1e-12):
    d = np.sqrt(((points - center) ** 2).sum(-1))
    w = 1.0 / np.maximum(d, weights_floor)
    return (points * w[:, None]).sum(0) / w.sum()


def _update_center(points, old):
    """Best of {old, mean, one Weiszfeld step} under the summed Euclidean cost."""
    cands = [old, points.mean(0), _geomedian_step(points, old)]
    costs = [np.sqrt(((points - c) ** 2).sum(-1)).sum() for c in cands]
    return cands[int(np.argmin(costs))]


def mask_slic(features, mask, n_sp=20, compactness=None, max_iters=10):
    """Partition the masked pixels into min(n_sp, |mask|) superpixels.

    features: (H, W, C) array (or (H, W) for a single channel). The assignment cost is
    ||f_p - c_k|| + compactness * ||x_p - x_k|| / S with S = sqrt(|mask| / N).
    Centers move to whichever of the cluster mean or a Weiszfeld step lowers
    that cost, so the total cost never increases between iterations.
    """
    mask = np.asarray(mask, dtype=bool)
    if n_sp < 1:
        raise ValidationError(f"n_sp must be >= 1, got {n_sp}")
    if not mask.any():
        raise ValidationError("mask_slic needs a non-empty mask")
    feats = _as_hwc(features, mask.shape)
    rows, cols = np.nonzero(mask)
    n_px = len(rows)
    n_eff = min(n_sp, n_px)
    labels = np.full(mask.shape, OUTSIDE, dtype=np.int64)

    if n_eff == n_px:
        labels[rows, cols] = np.arange(n_px)
        return SuperpixelLabeling(labels, n_eff, 0, [0.0])

    feat = feats[rows, cols]
    pos = np.stack([rows, cols], axis=1).astype(np.float64)
    if compactness is None:
        compactness = 0.1 * float(np.linalg.norm(feat, axis=1).mean())
    spatial_w = compactness / np.sqrt(n_px / n_eff)

    seeds = place_seeds(mask, n_eff)
    centers_f, centers_x = feat[seeds].copy(), pos[seeds].copy()
    assign = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        dist = _distances(feat, pos, centers_f, centers_x, spatial_w)
        new = np.argmin(dist, axis=1)
        cost = dist[np.arange(n_px), new]
        new, cost = _fill_empty(new, cost, n_eff)
        history.append(float(cost.sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in range(n_eff):
            sel = assign == k
            centers_f[k] = _update_center(feat[sel], centers_f[k])
            centers_x[k] = _update_center(pos[sel], centers_x[k])
    assign = new

    labels[rows, cols] = assign
    labels = _merge_fragments(labels, feats, centers_f, n_px // (4 * n_eff))
    return SuperpixelLabeling(labels, n_eff, n_iter, history)


def _fill_empty(assign, cost, n_eff):
    """Give every empty cluster the worst-fitting pixel of a cluster with >1 member."""
    assign, cost = assign.copy(), cost.copy()
    counts = np.bincount(assign, minlength=n_eff)
    for k in np.flatnonzero(counts == 0):
        donors = counts[assign] > 1
        cand = np.where(donors, cost, -np.inf)
        p = int(np.argmax(cand))
        counts[assign[p]] -= 1
        assign[p] = k
        counts[k] = 1
        cost[p] = 0.0
    return assign, cost


def _merge_fragments(labels, feats, centers_f, min_size):
    """Fold small disconnected pieces of a label into the closest adjacent label.

    The largest piece of each label is kept, so no label disappears.
    """
    if min_size <= 0:
        return labels
    labels = labels.copy()
    n_eff = len(centers_f)
    for k in range(n_eff):
        pieces, n = ndi.label(labels == k, structure=_EIGHT)
        if n <= 1:
            continue
        sizes = ndi.sum_labels(np.ones_like(pieces), pieces, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        for j in range(1, n + 1):
            if j == keep or sizes[j - 1] >= min_size:
                continue
            frag = pieces == j
            ring = ndi.binary_dilation(frag, structure=_EIGHT) & ~frag
            neigh = np.unique(labels[ring])
            neigh = neigh[(neigh != OUTSIDE) & (neigh != k)]
            if len(neigh) == 0:
                continue
            mean_f = feats[frag].mean(0)
            best = neigh[np.argmin(np.linalg.norm(centers_f[neigh] - mean_f, axis=1))]
            labels[frag] = best
    return labels


def boundaries(labels):
    """Pixels whose 4-neighbourhood holds a different label (inside the mask only)."""
    lab = np.asarray(labels)
    edge = np.zeros(lab.shape, dtype=bool)
    edge[:-1] |= lab[:-1] != lab[1:]
    edge[1:] |= lab[1:] != lab[:-1]
    edge[:, :-1] |= lab[:, :-1] != lab[:, 1:]
    edge[:, 1:] |= lab[:, 1:] != lab[:, :-1]
    return edge & (lab != OUTSIDE)
