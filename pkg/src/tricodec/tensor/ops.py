"""Autodiff ops that sit above the raw kernels.

Convolutions and the splat scatter dispatch to the numba or numpy kernel
flavor chosen by the active backend; everything else composes the
primitives from :mod:`tricodec.tensor.core`.
"""

from __future__ import annotations

import numpy as np

from ..backend import use_numba
from ..errors import ShapeError
from . import kernels as K
from .core import Tensor, astensor, make_op, sqrt as t_sqrt, abs_ as t_abs


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _triple(v):
    return (v, v, v) if np.isscalar(v) else tuple(v)


# ---------------------------------------------------------------------------
# Convolutions


def conv2d(x, w, bias=None, stride=1, padding=0):
    """x: [B,Cin,H,W], w: [Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo]; zero padding."""
    x, w = astensor(x), astensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs weight {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, Ci, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape}")

    if use_numba():
        y = K.conv2d_fwd_nb(x.data, w.data, sh, sw, ph, pw)
    else:
        y = K.conv2d_fwd_np(x.data, w.data, sh, sw, ph, pw)

    def vjp(g):
        g = np.ascontiguousarray(g)
        if use_numba():
            gx = K.conv2d_bwd_input_nb(g, w.data, sh, sw, ph, pw, H, W)
            gw = K.conv2d_bwd_weight_nb(g, x.data, sh, sw, ph, pw, kh, kw)
        else:
            gx = K.conv2d_bwd_input_np(g, w.data, sh, sw, ph, pw, H, W)
            gw = K.conv2d_bwd_weight_np(g, x.data, sh, sw, ph, pw, kh, kw)
        return ((x, gx), (w, gw))

    out = make_op(y, (x, w), vjp, "conv2d")
    if bias is not None:
        bias = astensor(bias)
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def conv3d(x, w, bias=None, stride=1):
    """x: [B,Cin,D,H,W], w: [Cout,Cin,kd,kh,kw] -> [B,Cout,Do,Ho,Wo]; no padding."""
    x, w = astensor(x), astensor(w)
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d: expected 5D input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: channel mismatch, input {x.shape} vs weight {w.shape}")
    sd, sh, sw = _triple(stride)
    B, Ci, D, H, W = x.shape
    kd, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    if D < kd or H < kh or W < kw:
        raise ShapeError(f"conv3d: kernel {(kd, kh, kw)} larger than input {x.shape}")

    if use_numba():
        y = K.conv3d_fwd_nb(x.data, w.data, sd, sh, sw)
    else:
        y = K.conv3d_fwd_np(x.data, w.data, sd, sh, sw)

    def vjp(g):
        g = np.ascontiguousarray(g)
        if use_numba():
            gx = K.conv3d_bwd_input_nb(g, w.data, sd, sh, sw, D, H, W)
            gw = K.conv3d_bwd_weight_nb(g, x.data, sd, sh, sw, kd, kh, kw)
        else:
            gx = K.conv3d_bwd_input_np(g, w.data, sd, sh, sw, D, H, W)
            gw = K.conv3d_bwd_weight_np(g, x.data, sd, sh, sw, kd, kh, kw)
        return ((x, gx), (w, gw))

    out = make_op(y, (x, w), vjp, "conv3d")
    if bias is not None:
        bias = astensor(bias)
        out = out + bias.reshape(1, -1, 1, 1, 1)
    return out


def upsample_nearest2d(x, factor: int = 2):
    x = astensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2d: expected 4D input, got {x.shape}")
    f = int(factor)
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def vjp(g):
        gx = g.reshape(B, C, H, f, W, f).sum(axis=(3, 5))
        return ((x, gx),)

    return make_op(y, (x,), vjp, "upsample_nearest2d")


# ---------------------------------------------------------------------------
# Scatter / gather family


def scatter_add(shape, idx, values):
    """zeros(shape) with values added at idx (numpy fancy index); grads to values."""
    v = astensor(values)
    data = np.zeros(shape, v.dtype)
    np.add.at(data, idx, v.data)

    def vjp(g):
        return ((v, np.ascontiguousarray(g[idx])),)

    return make_op(data, (v,), vjp, "scatter_add")


def splat(idx, wts, feats, slots: int):
    """Weighted scatter of point features into a flat voxel table.

    idx: [N,K] int64 voxel ids, wts: [N,K] weights (constants), feats: [N,C]
    Tensor.  Returns ([slots,C] Tensor, [slots] numpy weight sums).  Gradients
    flow to feats only; weights and indices are data.
    """
    feats = astensor(feats)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    wts = np.ascontiguousarray(wts, dtype=feats.dtype)
    if idx.shape != wts.shape or idx.shape[0] != feats.shape[0]:
        raise ShapeError(
            f"splat: idx {idx.shape}, wts {wts.shape}, feats {feats.shape} disagree"
        )

    if use_numba():
        out, wsum = K.splat_fwd_nb(idx, wts, feats.data, slots)
    else:
        out, wsum = K.splat_fwd_np(idx, wts, feats.data, slots)

    def vjp(g):
        g = np.ascontiguousarray(g)
        if use_numba():
            gf = K.splat_bwd_feats_nb(idx, wts, g)
        else:
            gf = K.splat_bwd_feats_np(idx, wts, g)
        return ((feats, gf),)

    return make_op(out, (feats,), vjp, "splat"), wsum


def segment_max(values, ids, num_segments: int):
    """Per-segment channelwise max; empty segments are zero.

    values: [N,C] Tensor, ids: [N] int array.  Gradient goes to the first
    point attaining each segment max (deterministic tie-break).
    """
    values = astensor(values)
    if values.ndim != 2:
        raise ShapeError(f"segment_max: expected [N,C], got {values.shape}")
    N, C = values.shape
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != (N,):
        raise ShapeError(f"segment_max: ids shape {ids.shape} != ({N},)")

    out = np.full((num_segments, C), -np.inf, values.dtype)
    np.maximum.at(out, ids, values.data)

    # first point index attaining the max, per (segment, channel)
    winner = np.full(num_segments * C, N, np.int64)
    hit = values.data == out[ids]
    pair = ids[:, None] * C + np.arange(C)[None, :]
    rows = np.broadcast_to(np.arange(N)[:, None], (N, C))
    np.minimum.at(winner, pair[hit], rows[hit])

    empty = ~np.isfinite(out)
    out = np.where(empty, 0.0, out)

    def vjp(g):
        gv = np.zeros((N, C), g.dtype)
        valid = winner < N
        cols = np.arange(num_segments * C) % C
        np.add.at(gv, (winner[valid], cols[valid]), g.reshape(-1)[valid])
        return ((values, gv),)

    return make_op(out, (values,), vjp, "segment_max")


# ---------------------------------------------------------------------------
# Normalization and losses


def group_norm(x, gamma, beta, num_groups: int, eps: float = 1e-5):
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    if x.ndim < 2:
        raise ShapeError(f"group_norm: expected [B,C,...], got {x.shape}")
    B, C = x.shape[0], x.shape[1]
    if C % num_groups:
        raise ShapeError(f"group_norm: {C} channels not divisible by {num_groups} groups")
    xg = x.reshape(B, num_groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    y = (xc / t_sqrt(var + eps)).reshape(x.shape)
    shape = (1, C) + (1,) * (x.ndim - 2)
    return y * gamma.reshape(shape) + beta.reshape(shape)


def mse_loss(a, b):
    a, b = astensor(a), astensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes differ, {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).mean()


def l1_loss(a, b):
    a, b = astensor(a), astensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes differ, {a.shape} vs {b.shape}")
    return t_abs(a - b).mean()
