"""Registration quality metrics.

Covers overlap (Dice), boundary distance (HD95), and deformation-field
quality: per-voxel Jacobian determinant, SDlogJ, folding fraction, and a
local volume-change classification. ``correlation_study`` relates SDlogJ
to the folding fraction across a sweep of fields.
"""

from dataclasses import dataclass, field as dc_field
from enum import IntEnum

import numpy as np

from .errors import DegenerateSweepError, ScfregError
from .field import SegMask, as_mask, check_field, spatial_gradient

SDLOGJ_RHO = 3.0
SDLOGJ_EPS = 1e-9


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """Per-voxel determinant of J = I + du/dx for the map x + u(x).

    Uses the same central/one-sided stencils as ``field.spatial_gradient``.
    Returns an array of the field's spatial shape.
    """
    u = check_field(u)
    d = u.shape[0]
    g = spatial_gradient(u)
    for i in range(d):
        g[i, i] += 1.0
    if d == 2:
        return g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
    return (
        g[0, 0] * (g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1])
        - g[0, 1] * (g[1, 0] * g[2, 2] - g[1, 2] * g[2, 0])
        + g[0, 2] * (g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0])
    )


def sdlogj(det: np.ndarray, rho: float = SDLOGJ_RHO, eps: float = SDLOGJ_EPS) -> float:
    """Standard deviation of log(clip(det + rho)).

    The clip is max(det + rho, eps) so the log stays finite for strongly
    negative determinants. Sample standard deviation (N-1 denominator).
    """
    det = np.asarray(det, dtype=np.float64)
    if det.size < 2:
        raise ScfregError("sdlogj needs at least 2 voxels")
    vals = np.log(np.maximum(det + rho, eps))
    if np.ptp(vals) == 0.0:  # constant input: exactly zero, no mean-rounding
        return 0.0
    return float(np.std(vals, ddof=1))


def folding_fraction(det: np.ndarray) -> float:
    """Fraction of voxels with non-positive Jacobian determinant."""
    det = np.asarray(det)
    if det.size == 0:
        raise ScfregError("empty determinant field")
    return float(np.count_nonzero(det <= 0.0) / det.size)


class LocalDeformation(IntEnum):
    PRESERVING = 0   # |det - 1| <= tol
    EXPANSION = 1    # det > 1 + tol
    CONTRACTION = 2  # tol < det < 1 - tol
    COLLAPSE = 3     # |det| <= tol
    INVERSION = 4    # det < -tol


def classify_local(det: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Classify each voxel's volume change; returns int32 codes
    (LocalDeformation values)."""
    det = np.asarray(det, dtype=np.float64)
    if det.size == 0:
        raise ScfregError("empty determinant field")
    out = np.full(det.shape, LocalDeformation.CONTRACTION, dtype=np.int32)
    out[det > 1.0 + tol] = LocalDeformation.EXPANSION
    out[np.abs(det - 1.0) <= tol] = LocalDeformation.PRESERVING
    out[np.abs(det) <= tol] = LocalDeformation.COLLAPSE
    out[det < -tol] = LocalDeformation.INVERSION
    return out


def dice(a, b, labels=None, include_background: bool = False):
    """Dice overlap per label and the mean over the requested labels.

    Args:
        a, b: SegMask or raw integer label arrays of identical shape.
        labels: iterable of label ids; defaults to every label present in
            either mask, excluding 0 unless ``include_background``.

    A label empty in both masks scores 1 by convention. Returns
    (per_label: dict, mean: float).
    """
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise ScfregError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if labels is None:
        labels = sorted(set(np.unique(a.labels)) | set(np.unique(b.labels)))
        if not include_background:
            labels = [l for l in labels if l != 0]
    labels = [int(l) for l in labels]
    if not labels:
        raise ScfregError("no labels to score")
    per_label = {}
    for l in labels:
        in_a = a.labels == l
        in_b = b.labels == l
        size = int(in_a.sum()) + int(in_b.sum())
        if size == 0:
            per_label[l] = 1.0
        else:
            per_label[l] = 2.0 * int((in_a & in_b).sum()) / size
    return per_label, float(np.mean(list(per_label.values())))


def _boundary_voxels(region: np.ndarray) -> np.ndarray:
    """Coordinates of region voxels with a face-neighbour outside the region.

    Neighbours beyond the array edge do not count as different (edge
    replication), so a region filling the whole grid has no boundary;
    such regions fall back to all their voxels.
    """
    padded = np.pad(region, 1, mode="edge")
    ndim = region.ndim
    center = tuple(slice(1, -1) for _ in range(ndim))
    differs = np.zeros_like(region)
    for ax in range(ndim):
        for step in (-1, 1):
            sl = list(center)
            sl[ax] = slice(1 + step, padded.shape[ax] - 1 + step)
            differs |= padded[tuple(sl)] != region
    boundary = region & differs
    if not boundary.any():
        boundary = region
    return np.argwhere(boundary)


def hd95(a, b, label: int, spacing=None) -> float:
    """95th percentile of pooled symmetric boundary distances for ``label``.

    Boundary voxels are region voxels with at least one face-neighbour of a
    different label. Distances are Euclidean, scaled per-axis by ``spacing``
    (defaults to 1 voxel). The percentile linearly interpolates between
    order statistics. Conventions for degenerate cases: label empty in both
    masks -> 0; empty in exactly one -> diagonal of the voxel-centre
    bounding box (worst case).
    """
    a, b = as_mask(a), as_mask(b)
    if a.shape != b.shape:
        raise ScfregError(f"mask shapes differ: {a.shape} vs {b.shape}")
    spacing = np.ones(a.labels.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)
    in_a = a.labels == label
    in_b = b.labels == label
    if not in_a.any() and not in_b.any():
        return 0.0
    if in_a.any() != in_b.any():
        extents = (np.array(a.shape) - 1) * spacing
        return float(np.sqrt((extents**2).sum()))
    pa = _boundary_voxels(in_a) * spacing
    pb = _boundary_voxels(in_b) * spacing
    d_ab = _directed_min_dists(pa, pb)
    d_ba = _directed_min_dists(pb, pa)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def _directed_min_dists(src: np.ndarray, dst: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Min Euclidean distance from each src point to the dst set."""
    out = np.empty(len(src))
    for start in range(0, len(src), chunk):
        block = src[start : start + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
        out[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def correlation_study(pairs):
    """Relate SDlogJ to folding fraction over a sweep of fields.

    Args:
        pairs: sequence of (sdlogj, folding_fraction) tuples, >= 3 entries.

    Both axes are min-max normalized before an ordinary least squares fit.
    Returns a dict with pearson_r, slope, intercept, r_squared (= r**2 for
    a simple regression). Zero variance on either axis raises
    DegenerateSweepError.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 3:
        raise ScfregError(f"need >= 3 (sdlogj, folding) pairs, got shape {arr.shape}")
    x, y = arr[:, 0], arr[:, 1]
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise DegenerateSweepError("zero variance on a sweep axis")
    xn = (x - x.min()) / np.ptp(x)
    yn = (y - y.min()) / np.ptp(y)
    slope, intercept = np.polyfit(xn, yn, 1)
    r = float(np.corrcoef(xn, yn)[0, 1])
    return {
        "pearson_r": r,
        "slope": float(slope),
        "intercept": float(intercept),
        "r_squared": r * r,
    }


@dataclass
class MetricsReport:
    """Quality summary for one registration; all fields JSON-ready."""

    dice_per_label: dict = dc_field(default_factory=dict)
    dice_mean: float = 0.0
    hd95_per_label: dict = dc_field(default_factory=dict)
    hd95_mean: float = 0.0
    sdlogj: float = 0.0
    folding_fraction: float = 0.0

    def to_dict(self) -> dict:
        return {
            "dice_per_label": {str(k): v for k, v in self.dice_per_label.items()},
            "dice_mean": self.dice_mean,
            "hd95_per_label": {str(k): v for k, v in self.hd95_per_label.items()},
            "hd95_mean": self.hd95_mean,
            "sdlogj": self.sdlogj,
            "folding_fraction": self.folding_fraction,
        }


def evaluate_registration(u: np.ndarray, warped_seg, fixed_seg, labels=None, spacing=None) -> MetricsReport:
    """Full MetricsReport for a displacement field and the produced overlap."""
    warped_seg, fixed_seg = as_mask(warped_seg), as_mask(fixed_seg)
    dice_per_label, dice_mean = dice(warped_seg, fixed_seg, labels=labels)
    hd_per_label = {
        l: hd95(warped_seg, fixed_seg, l, spacing=spacing) for l in dice_per_label
    }
    det = jacobian_determinant(u)
    return MetricsReport(
        dice_per_label=dice_per_label,
        dice_mean=dice_mean,
        hd95_per_label=hd_per_label,
        hd95_mean=float(np.mean(list(hd_per_label.values()))),
        sdlogj=sdlogj(det),
        folding_fraction=folding_fraction(det),
    )
