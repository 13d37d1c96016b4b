"""Structured differentiable operations: n-D convolution, upsampling,
field warping/composition and the covariant-filter contraction.

Convolutions run as im2col + BLAS matmul; the col2im adjoint loops only
over the k^d kernel offsets. Warp and compose reuse the interpolation
helpers from ``scfreg.field`` so the differentiable path and the plain
numpy path produce identical forward values.
"""

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import field as field_mod
from ..errors import NonFiniteFieldError, ScfregError
from .engine import Node, as_node


def _check_finite_disp(disp: Node) -> None:
    if not np.all(np.isfinite(disp.data)):
        raise NonFiniteFieldError("displacement contains NaN/inf values")


def _im2col(x: np.ndarray, kernel, stride: int):
    """Patches of ``x`` [Cin, S...] as a matrix [n_out_voxels, Cin*prod(k)].

    Zero padding of k//2 per axis; with odd kernels this keeps stride-1
    output shapes equal to the input and stride-2 outputs at ceil(S/2).
    """
    d = len(kernel)
    pads = [(0, 0)] + [(k // 2, k // 2) for k in kernel]
    xp = np.pad(x, pads)
    win = sliding_window_view(xp, kernel, axis=tuple(range(1, 1 + d)))
    if stride > 1:
        sl = (slice(None),) + (slice(None, None, stride),) * d
        win = win[sl]
    out_spatial = win.shape[1 : 1 + d]
    # [Cin, O..., k...] -> [O..., Cin, k...] -> [V, Cin*prod(k)]
    win = np.moveaxis(win, 0, d)
    cols = win.reshape(int(np.prod(out_spatial)), -1)
    return np.ascontiguousarray(cols), out_spatial, xp.shape


def _col2im(gcols: np.ndarray, x_shape, padded_shape, kernel, stride, out_spatial):
    """Adjoint of _im2col: scatter column gradients back onto the input."""
    d = len(kernel)
    c_in = x_shape[0]
    gp = np.zeros(padded_shape, dtype=np.float64)
    g = gcols.reshape(*out_spatial, c_in, *kernel)
    g = np.moveaxis(g, d, 0)  # [Cin, O..., k...]
    for offset in itertools.product(*[range(k) for k in kernel]):
        sl = [slice(None)]
        for ax in range(d):
            start = offset[ax]
            stop = start + stride * out_spatial[ax]
            sl.append(slice(start, stop, stride))
        patch_idx = (slice(None),) * (1 + d) + offset
        gp[tuple(sl)] += g[patch_idx]
    crop = [slice(None)] + [slice(k // 2, k // 2 + s) for k, s in zip(kernel, x_shape[1:])]
    return gp[tuple(crop)]


def conv_nd(x, w, b, stride: int = 1) -> Node:
    """n-D convolution: x [Cin, S...], w [Cout, Cin, k...], b [Cout].

    Gradients flow to x, w and b.
    """
    x, w, b = as_node(x), as_node(w), as_node(b)
    c_out = w.data.shape[0]
    kernel = w.data.shape[2:]
    cols, out_spatial, padded_shape = _im2col(x.data, kernel, stride)
    w_mat = w.data.reshape(c_out, -1)
    y = cols @ w_mat.T + b.data
    out = np.moveaxis(y.reshape(*out_spatial, c_out), -1, 0)

    def bw(g):
        g2 = np.moveaxis(g, 0, -1).reshape(-1, c_out)
        if w.requires_grad:
            w.accumulate((g2.T @ cols).reshape(w.data.shape))
        if b.requires_grad:
            b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = g2 @ w_mat
            x.accumulate(
                _col2im(gcols, x.data.shape, padded_shape, kernel, stride, out_spatial)
            )

    needs = x.requires_grad or w.requires_grad or b.requires_grad
    return Node(out, (x, w, b), bw if needs else None)


def upsample_nearest(x, factor: int = 2) -> Node:
    """Nearest-neighbour upsampling of [C, S...] by an integer factor;
    the adjoint sums the gradient over each replicated block."""
    x = as_node(x)
    d = x.data.ndim - 1
    out = x.data
    for ax in range(1, 1 + d):
        out = np.repeat(out, factor, axis=ax)

    def bw(g):
        shape = []
        for s in x.data.shape[1:]:
            shape.extend([s, factor])
        g = g.reshape(x.data.shape[0], *shape)
        g = g.sum(axis=tuple(range(2, 2 + 2 * d, 2)))
        x.accumulate(g)

    return Node(out, (x,), bw if x.requires_grad else None)


def warp_channels(channels: np.ndarray, disp, mode: str = "linear") -> Node:
    """Warp constant image channels [C, S...] by a displacement Node.

    Gradients flow to the displacement only (the sampled image is data).
    """
    disp = as_node(disp)
    _check_finite_disp(disp)
    channels = np.asarray(channels, dtype=np.float64)
    spatial = channels.shape[1:]
    if disp.data.shape[1:] != spatial:
        raise ScfregError(
            f"field spatial shape {disp.data.shape[1:]} != image {spatial}"
        )
    pos = field_mod.grid_coords(spatial) + disp.data
    if mode != "linear":
        raise ScfregError("differentiable warp supports linear mode only")
    vals, dpos = field_mod.sample_linear_posgrad(channels, pos)

    def bw(g):
        # d out[c,x] / d disp[j,x] = dpos[c,j,x]
        disp.accumulate(np.einsum("cj...,c...->j...", dpos, g))

    return Node(vals, (disp,), bw if disp.requires_grad else None)


def compose_fields(outer, inner) -> Node:
    """Differentiable composition; same semantics as ``field.compose``.

    result(x) = inner(x) + interp(outer, x + inner(x)); gradients flow to
    both fields (through the sampled values of ``outer`` and through the
    sample positions for ``inner``).
    """
    outer, inner = as_node(outer), as_node(inner)
    _check_finite_disp(outer)
    _check_finite_disp(inner)
    if outer.data.shape != inner.data.shape:
        raise ScfregError(f"field shapes differ: {outer.data.shape} vs {inner.data.shape}")
    spatial = inner.data.shape[1:]
    pos = field_mod.grid_coords(spatial) + inner.data
    sampled, dpos = field_mod.sample_linear_posgrad(outer.data, pos)
    out = inner.data + sampled
    scatter = field_mod.corner_scatter_data(pos, spatial) if outer.requires_grad else None

    def bw(g):
        if inner.requires_grad:
            inner.accumulate(g + np.einsum("cj...,c...->j...", dpos, g))
        if outer.requires_grad:
            buf = np.zeros_like(outer.data).reshape(outer.data.shape[0], -1)
            gflat = g.reshape(g.shape[0], -1)
            for flat_idx, w in scatter:
                contrib = gflat * w.ravel()
                for c in range(buf.shape[0]):
                    np.add.at(buf[c], flat_idx.ravel(), contrib[c])
            outer.accumulate(buf.reshape(outer.data.shape))

    needs = outer.requires_grad or inner.requires_grad
    return Node(out, (outer, inner), bw if needs else None)


def integrate_velocity(v, steps: int = 7) -> Node:
    """Differentiable scaling-and-squaring: seed with v / 2**steps, then
    square by self-composition ``steps`` times (unrolled graph)."""
    if steps < 1:
        raise ScfregError(f"steps must be >= 1, got {steps}")
    from .engine import scale

    u = scale(as_node(v), 1.0 / float(2**steps))
    for _ in range(steps):
        u = compose_fields(u, u)
    return u


def scf_combine(w_eff, feat) -> Node:
    """Per-voxel filter application: u[j, v] = sum_c w_eff[v, c, j] * F[c, v].

    w_eff: [V, C2, d] blended filters; feat: [C2, V] flattened features.
    """
    w_eff, feat = as_node(w_eff), as_node(feat)
    out = np.einsum("vcj,cv->jv", w_eff.data, feat.data)

    def bw(g):
        if w_eff.requires_grad:
            w_eff.accumulate(np.einsum("jv,cv->vcj", g, feat.data))
        if feat.requires_grad:
            feat.accumulate(np.einsum("vcj,jv->cv", w_eff.data, g))

    needs = w_eff.requires_grad or feat.requires_grad
    return Node(out, (w_eff, feat), bw if needs else None)


def fwd_diff_penalty(u) -> Node:
    """Mean squared forward difference over all (component, axis) pairs.

    For each of the d*d pairs the squared one-sided differences are averaged
    over their valid positions, then the pairs are averaged, so a unit-slope
    component contributes exactly 1/(d*d).
    """
    u = as_node(u)
    d = u.data.shape[0]
    spatial = u.data.shape[1:]
    if any(s < 2 for s in spatial):
        raise ScfregError(f"extents must be >= 2, got {spatial}")
    total = 0.0
    diffs = []
    for i in range(d):
        for ax in range(d):
            hi = [i] + [slice(None)] * d
            lo = [i] + [slice(None)] * d
            hi[1 + ax] = slice(1, None)
            lo[1 + ax] = slice(None, -1)
            diff = u.data[tuple(hi)] - u.data[tuple(lo)]
            diffs.append((i, ax, diff))
            total += (diff**2).mean()
    total /= d * d

    def bw(g):
        buf = np.zeros_like(u.data)
        for i, ax, diff in diffs:
            w = 2.0 * g / (d * d * diff.size)
            hi = [i] + [slice(None)] * d
            lo = [i] + [slice(None)] * d
            hi[1 + ax] = slice(1, None)
            lo[1 + ax] = slice(None, -1)
            buf[tuple(hi)] += w * diff
            buf[tuple(lo)] -= w * diff
        u.accumulate(buf)

    return Node(np.float64(total), (u,), bw if u.requires_grad else None)
