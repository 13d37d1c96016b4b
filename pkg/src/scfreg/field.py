"""Displacement fields and the phi(x) = x + u(x) machinery.

Conventions (shared package-wide):

- A displacement field is a float64 array of shape ``[d, S_1..S_d]`` with
  d in {2, 3}; channel ``i`` displaces along image axis ``i``, in voxels.
- Warping is a pull: ``output(x) = image(x + u(x))``.
- Sample positions outside the grid are clamped to the border.
- Derivatives use central differences in the interior and one-sided
  differences on boundary faces (exact on affine fields everywhere).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ScfregError


@dataclass
class SegMask:
    """Segmentation mask: integer label ids plus optional per-voxel
    confidence of the assigned label (probabilities in [0, 1])."""

    labels: np.ndarray
    probs: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.dtype.kind not in "iu":
            raise ScfregError(f"mask labels must be integral, got {self.labels.dtype}")
        self.labels = self.labels.astype(np.int32, copy=False)
        if self.probs is not None:
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != self.labels.shape:
                raise ScfregError("probs shape differs from labels shape")
            if self.probs.min() < 0.0 or self.probs.max() > 1.0:
                raise ScfregError("probs must lie in [0, 1]")

    @property
    def shape(self):
        return self.labels.shape


def as_mask(m) -> SegMask:
    """Coerce a raw label array into a SegMask; passes SegMask through."""
    return m if isinstance(m, SegMask) else SegMask(np.asarray(m))


def check_field(u: np.ndarray) -> np.ndarray:
    """Validate shape/rank/finiteness; returns the field as float64."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < 3 or u.shape[0] != u.ndim - 1 or u.shape[0] not in (2, 3):
        raise ScfregError(f"displacement field must be [d, S_1..S_d], d in 2..3; got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ScfregError("displacement field contains non-finite values")
    return u


def grid_coords(shape) -> np.ndarray:
    """Identity sampling grid, shape [d, S_1..S_d]."""
    return np.stack(
        np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    )


def _clamp_positions(pos: np.ndarray, shape) -> np.ndarray:
    out = np.empty_like(pos)
    for ax, s in enumerate(shape):
        np.clip(pos[ax], 0.0, float(s - 1), out=out[ax])
    return out


def _corner_data(pos: np.ndarray, shape):
    """Shared setup for multilinear interpolation at clamped positions.

    Returns (lo, frac) where ``lo`` are the lower corner indices per axis
    (int arrays, capped at S-2 so lo+1 stays in-grid) and ``frac`` the
    within-cell offsets in [0, 1].
    """
    pos = _clamp_positions(pos, shape)
    lo = []
    frac = []
    for ax, s in enumerate(shape):
        f = np.floor(pos[ax])
        f = np.minimum(f, max(s - 2, 0))
        lo.append(f.astype(np.intp))
        frac.append(pos[ax] - f)
    return lo, frac


def _gather_corners(channels: np.ndarray, lo, spatial):
    """All 2^d corner value arrays; bit ``ax`` of the list index selects the
    high corner along axis ``ax``."""
    d = len(spatial)
    corners = []
    for mask in range(2**d):
        idx = []
        for ax in range(d):
            if (mask >> ax) & 1:
                idx.append(np.minimum(lo[ax] + 1, spatial[ax] - 1))
            else:
                idx.append(lo[ax])
        corners.append(channels[(slice(None), *idx)])
    return corners


def _fold_lerp(corners, frac, diff_axis=None):
    """Nested per-axis linear interpolation of gathered corners.

    The lerp form v0 + f*(v1 - v0) is exact when both endpoints are equal,
    which keeps constant fields bit-stable under composition. With
    ``diff_axis`` set, returns the derivative w.r.t. that axis' fraction.
    """
    d = len(frac)
    cur = list(corners)
    for ax in reversed(range(d)):
        half = 1 << ax
        if ax == diff_axis:
            cur = [cur[m + half] - cur[m] for m in range(half)]
        else:
            cur = [cur[m] + frac[ax] * (cur[m + half] - cur[m]) for m in range(half)]
    return cur[0]


def sample_linear(channels: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of ``channels`` ([C, S_1..S_d]) at ``pos``
    ([d, ...]); positions are clamped to the grid. Returns [C, ...]."""
    spatial = channels.shape[1:]
    lo, frac = _corner_data(pos, spatial)
    corners = _gather_corners(channels, lo, spatial)
    return _fold_lerp(corners, frac)


def sample_nearest(channels: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Nearest-neighbour sampling with border clamping; preserves dtype."""
    spatial = channels.shape[1:]
    pos = _clamp_positions(pos, spatial)
    idx = tuple(
        np.clip(np.rint(pos[ax]), 0, spatial[ax] - 1).astype(np.intp)
        for ax in range(len(spatial))
    )
    return channels[(slice(None), *idx)]


def sample_linear_posgrad(channels: np.ndarray, pos: np.ndarray):
    """Interpolated values plus their derivative w.r.t. each position axis.

    Returns (values [C, ...], dval_dpos [C, d, ...]). The derivative is the
    spatial slope of the clamped interpolant. At kinks - positions exactly
    on a lattice plane or exactly at the clamp border - the symmetric
    subgradient (mean of the two one-sided slopes, out-of-grid slope = 0)
    is returned, so it matches central finite differences even when a
    zero-initialized model samples every voxel exactly on the grid.
    Positions strictly outside the grid get zero gradient.
    """
    spatial = channels.shape[1:]
    d = len(spatial)
    lo, frac = _corner_data(pos, spatial)
    corners = _gather_corners(channels, lo, spatial)
    vals = _fold_lerp(corners, frac)
    grads = np.empty(channels.shape[:1] + (d,) + pos.shape[1:], dtype=np.float64)
    for ax in range(d):
        s = spatial[ax]
        if s == 1:
            grads[:, ax] = 0.0
            continue
        base = _fold_lerp(corners, frac, diff_axis=ax)  # slope in cell [lo, lo+1]
        g = base
        praw = np.asarray(pos[ax], dtype=np.float64)
        f = frac[ax]
        at_top = f == 1.0            # position capped into the last cell: p == s-1
        if np.any(at_top):
            g = np.where(at_top, np.where(praw > s - 1.0, 0.0, 0.5 * base), g)
        at_node = f == 0.0           # p integral, lo in [0, s-2]
        if np.any(at_node):
            k0 = at_node & (lo[ax] == 0)
            if np.any(k0):
                g = np.where(k0, np.where(praw < 0.0, 0.0, 0.5 * base), g)
            kin = at_node & (lo[ax] > 0)
            if np.any(kin):
                lo_left = list(lo)
                lo_left[ax] = np.maximum(lo[ax] - 1, 0)
                left = _fold_lerp(
                    _gather_corners(channels, lo_left, spatial), frac, diff_axis=ax
                )
                g = np.where(kin, 0.5 * (base + left), g)
        grads[:, ax] = g
    return vals, grads


def corner_scatter_data(pos: np.ndarray, shape):
    """Corner flat-indices and interpolation weights for scatter-style
    adjoints: returns a list of (flat_index_array, weight_array) covering
    the 2^d corners of each (clamped) position."""
    d = len(shape)
    lo, frac = _corner_data(pos, shape)
    out = []
    for mask in range(2**d):
        idx = []
        w = np.ones(pos.shape[1:], dtype=np.float64)
        for ax in range(d):
            if (mask >> ax) & 1:
                idx.append(np.minimum(lo[ax] + 1, shape[ax] - 1))
                w = w * frac[ax]
            else:
                idx.append(lo[ax])
                w = w * (1.0 - frac[ax])
        out.append((np.ravel_multi_index(tuple(idx), shape), w))
    return out


def warp_image(img: np.ndarray, field: np.ndarray, mode: str = "linear") -> np.ndarray:
    """Warp ``img`` by the displacement field: output(x) = img(x + u(x)).

    Args:
        img: array of shape [S_1..S_d]; any numeric dtype for mode
            "nearest" (used for label maps), float for "linear".
        field: displacement [d, S_1..S_d] in voxels.
        mode: "linear" or "nearest".

    Out-of-grid sample coordinates are clamped to the border.
    """
    field = check_field(field)
    img = np.asarray(img)
    if img.shape != field.shape[1:]:
        raise ScfregError(f"image shape {img.shape} != field spatial shape {field.shape[1:]}")
    pos = grid_coords(img.shape) + field
    if mode == "linear":
        return sample_linear(np.asarray(img, dtype=np.float64)[None], pos)[0]
    if mode == "nearest":
        return sample_nearest(img[None], pos)[0]
    raise ScfregError(f"unknown warp mode {mode!r}")


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Displacement of phi_outer o phi_inner.

    u_c(x) = u_inner(x) + interp(u_outer, x + u_inner(x)), so that
    x + u_c(x) = phi_outer(phi_inner(x)). Sampling is clamped at borders.
    """
    outer = check_field(outer)
    inner = check_field(inner)
    if outer.shape != inner.shape:
        raise ScfregError(f"field shapes differ: {outer.shape} vs {inner.shape}")
    pos = grid_coords(inner.shape[1:]) + inner
    return inner + sample_linear(outer, pos)


def spatial_gradient(u: np.ndarray) -> np.ndarray:
    """Displacement Jacobian du_i/dx_j, shape [d, d, S_1..S_d].

    Central differences in the interior, one-sided at boundary faces;
    exact for affine fields at every voxel. Each spatial extent must be >= 2.
    """
    u = check_field(u)
    d = u.shape[0]
    spatial = u.shape[1:]
    if any(s < 2 for s in spatial):
        raise ScfregError(f"spatial extents must be >= 2 for gradients; got {spatial}")
    out = np.empty((d, d) + spatial, dtype=np.float64)
    for i in range(d):
        for j in range(d):
            out[i, j] = _diff_along(u[i], j)
    return out


def _diff_along(f: np.ndarray, axis: int) -> np.ndarray:
    """Central difference along ``axis`` with one-sided boundary stencils."""
    g = np.empty_like(f)
    mid = [slice(None)] * f.ndim
    plus = [slice(None)] * f.ndim
    minus = [slice(None)] * f.ndim
    mid[axis] = slice(1, -1)
    plus[axis] = slice(2, None)
    minus[axis] = slice(None, -2)
    g[tuple(mid)] = 0.5 * (f[tuple(plus)] - f[tuple(minus)])
    first = [slice(None)] * f.ndim
    second = [slice(None)] * f.ndim
    first[axis] = 0
    second[axis] = 1
    g[tuple(first)] = f[tuple(second)] - f[tuple(first)]
    last = [slice(None)] * f.ndim
    penult = [slice(None)] * f.ndim
    last[axis] = -1
    penult[axis] = -2
    g[tuple(last)] = f[tuple(last)] - f[tuple(penult)]
    return g
