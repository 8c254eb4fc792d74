"""Volumetric neural-net operations on 5D tensors (batch, channels, H, W, D).

Convolution is computed as a sum of per-kernel-offset channel contractions,
which keeps every heavy step a plain BLAS matmul on contiguous slices. All
ops are differentiable through the tape in `tensor`.
"""

from __future__ import annotations

import functools

import numpy as np

from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    """Raised when an operation's configuration is inconsistent."""


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ConfigError(f"expected 3 extents, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def conv_out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _offset_slice(i, j, k, stride, out_sp):
    sh, sw, sd = stride
    ho, wo, do = out_sp
    return (
        slice(None),
        slice(None),
        slice(i, i + sh * ho, sh),
        slice(j, j + sw * wo, sw),
        slice(k, k + sd * do, sd),
    )


def conv3d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """3D cross-correlation. weight: [Cout, Cin/groups, kh, kw, kd]."""
    stride = _triple(stride)
    padding = _triple(padding)
    N, cin, H, W, D = x.shape
    cout, cg, kh, kw, kd = weight.shape
    if cin % groups != 0 or cout % groups != 0:
        raise ConfigError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    if cg != cin // groups:
        raise DimensionError(
            f"weight expects {cg} input channels per group, input has {cin // groups}"
        )
    for i, (n, kk, p) in enumerate(zip((H, W, D), (kh, kw, kd), padding)):
        if n + 2 * p < kk:
            raise DimensionError(f"kernel exceeds padded input on axis {i}")

    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, pads) if any(padding) else x.data
    out_sp = tuple(
        conv_out_extent(n, kk, s, 0)
        for n, kk, s in zip(xp.shape[2:], (kh, kw, kd), stride)
    )
    depthwise = groups == cin and cg == 1 and cout == cin
    wd = weight.data
    pvox = int(np.prod(out_sp))
    k3 = kh * kw * kd

    def im2col(xp_in):
        # [N, Cin*k^3, P] batched columns; every copy is an aligned slice copy
        c = xp_in.shape[1]
        cols = np.empty((N, c, kh, kw, kd) + out_sp, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                for k in range(kd):
                    cols[:, :, i, j, k] = xp_in[_offset_slice(i, j, k, stride, out_sp)]
        return cols.reshape(N, c * k3, pvox)

    def col2im_add(cols_g, gx_target):
        view = cols_g.reshape((N, gx_target.shape[1], kh, kw, kd) + out_sp)
        for i in range(kh):
            for j in range(kw):
                for k in range(kd):
                    gx_target[_offset_slice(i, j, k, stride, out_sp)] += view[:, :, i, j, k]

    cols_saved = None
    if depthwise:
        out = np.zeros((N, cin) + out_sp, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                for k in range(kd):
                    xs = xp[_offset_slice(i, j, k, stride, out_sp)]
                    out += xs * wd[:, 0, i, j, k][None, :, None, None, None]
    elif groups == 1:
        cols_saved = im2col(xp)
        out = np.matmul(wd.reshape(cout, -1), cols_saved).reshape((N, cout) + out_sp)
        if cols_saved.nbytes > 512 * 1024 * 1024:
            cols_saved = None  # too large to keep for backward; recompute there
    else:
        cpg_in, cpg_out = cin // groups, cout // groups
        out = np.empty((N, cout) + out_sp, dtype=x.dtype)
        for g in range(groups):
            res = np.matmul(
                wd[g * cpg_out : (g + 1) * cpg_out].reshape(cpg_out, -1),
                im2col(xp[:, g * cpg_in : (g + 1) * cpg_in]),
            )
            out[:, g * cpg_out : (g + 1) * cpg_out] = res.reshape(
                (N, cpg_out) + out_sp
            )
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3, 4)))
        cpg_in, cpg_out = cin // groups, cout // groups
        gw = np.zeros(weight.shape, dtype=weight.dtype) if weight.requires_grad else None
        gx = np.zeros_like(xp) if x.requires_grad else None
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    for k in range(kd):
                        sl = _offset_slice(i, j, k, stride, out_sp)
                        if gw is not None:
                            gw[:, 0, i, j, k] = (g * xp[sl]).sum(axis=(0, 2, 3, 4))
                        if gx is not None:
                            gx[sl] += g * wd[:, 0, i, j, k][None, :, None, None, None]
        else:
            for gi in range(groups):
                in_sl = slice(gi * cpg_in, (gi + 1) * cpg_in)
                out_sl = slice(gi * cpg_out, (gi + 1) * cpg_out)
                g2 = g[:, out_sl].reshape(N, cpg_out, pvox)
                if gw is not None:
                    cols = cols_saved if groups == 1 and cols_saved is not None else im2col(xp[:, in_sl])
                    gw[out_sl] = (
                        np.matmul(g2, cols.transpose(0, 2, 1))
                        .sum(axis=0)
                        .reshape((cpg_out, cpg_in, kh, kw, kd))
                    )
                    del cols
                if gx is not None:
                    cols_g = np.matmul(wd[out_sl].reshape(cpg_out, -1).T, g2)
                    col2im_add(cols_g, gx[:, in_sl])
        if gw is not None:
            weight._accum(gw)
        if gx is not None:
            if any(padding):
                ph, pw, pd = padding
                gx = np.ascontiguousarray(
                    gx[:, :, ph : ph + H, pw : pw + W, pd : pd + D]
                )
            x._accum(gx)

    return Tensor._result(out, parents, backward)


def pointwise(x, weight, bias=None):
    """Per-voxel linear map over channels. weight: [C', C]."""
    N, C, H, W, D = x.shape
    cp, c_in = weight.shape
    if c_in != C:
        raise DimensionError(f"pointwise expects {c_in} channels, input has {C}")
    xf = x.data.reshape(N, C, -1)
    out = np.matmul(weight.data, xf)  # [N, C', P] via broadcast
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(N, cp, H, W, D)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gf = g.reshape(N, cp, -1)
        if bias is not None and bias.requires_grad:
            bias._accum(gf.sum(axis=(0, 2)))
        if weight.requires_grad:
            weight._accum(np.einsum("nop,ncp->oc", gf, xf, optimize=True))
        if x.requires_grad:
            x._accum(np.matmul(weight.data.T, gf).reshape(x.shape))

    return Tensor._result(out, parents, backward)


@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in, n_out, dtype_name):
    """Dense 1D linear-interpolation matrix [n_out, n_in], align-corners false."""
    scale = n_in / n_out
    c = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    i0 = np.floor(c).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = c - i0
    mat = np.zeros((n_out, n_in))
    mat[np.arange(n_out), i0] += 1 - f
    mat[np.arange(n_out), i1] += f
    return mat.astype(dtype_name)


def _interp_axis(x, axis, n_out):
    n_in = x.shape[axis]
    if n_in == n_out:
        return x
    mat = _interp_matrix(n_in, n_out, x.dtype.name)
    data = np.moveaxis(np.tensordot(x.data, mat, axes=([axis], [1])), -1, axis)

    def backward(g):
        if x.requires_grad:
            gx = np.moveaxis(np.tensordot(g, mat, axes=([axis], [0])), -1, axis)
            x._accum(np.ascontiguousarray(gx))

    return Tensor._result(np.ascontiguousarray(data), (x,), backward)


def resize_trilinear(x, target):
    """Resize the three spatial axes of [N,C,H,W,D] to `target` extents."""
    target = _triple(target)
    if any(t < 1 for t in target):
        raise DimensionError(f"target extents must be >= 1, got {target}")
    out = x
    for axis, t in zip((2, 3, 4), target):
        out = _interp_axis(out, axis, t)
    return out


def downsample_avg(x, factor):
    """Average-pool by integer factors per spatial axis."""
    fh, fw, fd = _triple(factor)
    N, C, H, W, D = x.shape
    if H % fh or W % fw or D % fd:
        raise DimensionError(
            f"extents {(H, W, D)} not divisible by factors {(fh, fw, fd)}"
        )
    view = x.data.reshape(N, C, H // fh, fh, W // fw, fw, D // fd, fd)
    data = view.mean(axis=(3, 5, 7))
    inv = 1.0 / (fh * fw * fd)

    def backward(g):
        if x.requires_grad:
            gx = np.broadcast_to(
                (g * np.asarray(inv, dtype=g.dtype))[:, :, :, None, :, None, :, None],
                view.shape,
            )
            x._accum(gx.reshape(x.shape))

    return Tensor._result(data, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, mode="train",
               momentum=0.1, eps=1e-5):
    """Batch norm over all non-channel axes of [N,C,...].

    `running_mean`/`running_var` are plain numpy buffers mutated in train mode.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"expected per-channel params of shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    pshape = (1, C) + (1,) * (x.ndim - 2)
    g = gamma.reshape(pshape)
    b = beta.reshape(pshape)
    if mode == "train":
        m = x.mean(axis=axes, keepdims=True)
        var = ((x - m) ** 2).mean(axis=axes, keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * m.data.reshape(C)
        running_var *= 1 - momentum
        running_var += momentum * var.data.reshape(C)
        xhat = (x - m) / (var + eps).sqrt()
    elif mode == "eval":
        m = running_mean.reshape(pshape).astype(x.dtype)
        v = running_var.reshape(pshape).astype(x.dtype)
        xhat = (x - Tensor(m)) * Tensor(1.0 / np.sqrt(v + eps))
    else:
        raise ConfigError(f"unknown batch_norm mode {mode!r}")
    return xhat * g + b
