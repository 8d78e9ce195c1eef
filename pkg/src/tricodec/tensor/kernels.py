"""Hot numerical kernels, each in two interchangeable flavors.

``*_nb`` variants are scalar loops compiled with numba when it is
installed; ``*_np`` variants are vectorized numpy and serve both as the
fallback backend and as an independent implementation for cross-checking.
Dispatch happens in :mod:`tricodec.tensor.ops` via the active backend.

All kernels are pure functions over plain numpy arrays; none of them
touches the autodiff graph.
"""

from __future__ import annotations

import numpy as np

from ..backend import jit

# ---------------------------------------------------------------------------
# 2D convolution (zero padding, arbitrary stride)


@jit
def conv2d_fwd_nb(x, w, sh, sw, ph, pw):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    y = np.zeros((B, Co, Ho, Wo), x.dtype)
    for b in range(B):
        for co in range(Co):
            for oi in range(Ho):
                for oj in range(Wo):
                    acc = 0.0
                    for ci in range(Ci):
                        for ki in range(kh):
                            ii = oi * sh + ki - ph
                            if ii < 0 or ii >= H:
                                continue
                            for kj in range(kw):
                                jj = oj * sw + kj - pw
                                if 0 <= jj < W:
                                    acc += x[b, ci, ii, jj] * w[co, ci, ki, kj]
                    y[b, co, oi, oj] = acc
    return y


@jit
def conv2d_bwd_input_nb(gy, w, sh, sw, ph, pw, H, W):
    B, Co, Ho, Wo = gy.shape
    _, Ci, kh, kw = w.shape
    gx = np.zeros((B, Ci, H, W), gy.dtype)
    for b in range(B):
        for co in range(Co):
            for oi in range(Ho):
                for oj in range(Wo):
                    g = gy[b, co, oi, oj]
                    for ci in range(Ci):
                        for ki in range(kh):
                            ii = oi * sh + ki - ph
                            if ii < 0 or ii >= H:
                                continue
                            for kj in range(kw):
                                jj = oj * sw + kj - pw
                                if 0 <= jj < W:
                                    gx[b, ci, ii, jj] += g * w[co, ci, ki, kj]
    return gx


@jit
def conv2d_bwd_weight_nb(gy, x, sh, sw, ph, pw, kh, kw):
    B, Co, Ho, Wo = gy.shape
    _, Ci, H, W = x.shape
    gw = np.zeros((Co, Ci, kh, kw), gy.dtype)
    for b in range(B):
        for co in range(Co):
            for oi in range(Ho):
                for oj in range(Wo):
                    g = gy[b, co, oi, oj]
                    for ci in range(Ci):
                        for ki in range(kh):
                            ii = oi * sh + ki - ph
                            if ii < 0 or ii >= H:
                                continue
                            for kj in range(kw):
                                jj = oj * sw + kj - pw
                                if 0 <= jj < W:
                                    gw[co, ci, ki, kj] += g * x[b, ci, ii, jj]
    return gw


def _pad2d(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_fwd_np(x, w, sh, sw, ph, pw):
    kh, kw = w.shape[2], w.shape[3]
    xp = _pad2d(x, ph, pw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]  # [B,Ci,Ho,Wo,kh,kw]
    return np.einsum("bihwkl,oikl->bohw", win, w, optimize=True)


def conv2d_bwd_input_np(gy, w, sh, sw, ph, pw, H, W):
    B, Co, Ho, Wo = gy.shape
    _, Ci, kh, kw = w.shape
    gxp = np.zeros((B, Ci, H + 2 * ph, W + 2 * pw), gy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = np.einsum("bohw,oi->bihw", gy, w[:, :, ki, kj], optimize=True)
            gxp[:, :, ki : ki + Ho * sh : sh, kj : kj + Wo * sw : sw] += contrib
    if ph or pw:
        gxp = gxp[:, :, ph : ph + H, pw : pw + W]
    return np.ascontiguousarray(gxp)


def conv2d_bwd_weight_np(gy, x, sh, sw, ph, pw, kh, kw):
    xp = _pad2d(x, ph, pw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    return np.einsum("bohw,bihwkl->oikl", gy, win, optimize=True)


# ---------------------------------------------------------------------------
# 3D convolution (no padding, arbitrary kernel/stride)


@jit
def conv3d_fwd_nb(x, w, sd, sh, sw):
    B, Ci, D, H, W = x.shape
    Co, _, kd, kh, kw = w.shape
    Do = (D - kd) // sd + 1
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    y = np.zeros((B, Co, Do, Ho, Wo), x.dtype)
    for b in range(B):
        for co in range(Co):
            for od in range(Do):
                for oi in range(Ho):
                    for oj in range(Wo):
                        acc = 0.0
                        for ci in range(Ci):
                            for kk in range(kd):
                                for ki in range(kh):
                                    for kj in range(kw):
                                        acc += (
                                            x[b, ci, od * sd + kk, oi * sh + ki, oj * sw + kj]
                                            * w[co, ci, kk, ki, kj]
                                        )
                        y[b, co, od, oi, oj] = acc
    return y


@jit
def conv3d_bwd_input_nb(gy, w, sd, sh, sw, D, H, W):
    B, Co, Do, Ho, Wo = gy.shape
    _, Ci, kd, kh, kw = w.shape
    gx = np.zeros((B, Ci, D, H, W), gy.dtype)
    for b in range(B):
        for co in range(Co):
            for od in range(Do):
                for oi in range(Ho):
                    for oj in range(Wo):
                        g = gy[b, co, od, oi, oj]
                        for ci in range(Ci):
                            for kk in range(kd):
                                for ki in range(kh):
                                    for kj in range(kw):
                                        gx[
                                            b, ci, od * sd + kk, oi * sh + ki, oj * sw + kj
                                        ] += g * w[co, ci, kk, ki, kj]
    return gx


@jit
def conv3d_bwd_weight_nb(gy, x, sd, sh, sw, kd, kh, kw):
    B, Co, Do, Ho, Wo = gy.shape
    _, Ci, D, H, W = x.shape
    gw = np.zeros((Co, Ci, kd, kh, kw), gy.dtype)
    for b in range(B):
        for co in range(Co):
            for od in range(Do):
                for oi in range(Ho):
                    for oj in range(Wo):
                        g = gy[b, co, od, oi, oj]
                        for ci in range(Ci):
                            for kk in range(kd):
                                for ki in range(kh):
                                    for kj in range(kw):
                                        gw[co, ci, kk, ki, kj] += g * x[
                                            b, ci, od * sd + kk, oi * sh + ki, oj * sw + kj
                                        ]
    return gw


def conv3d_fwd_np(x, w, sd, sh, sw):
    kd, kh, kw = w.shape[2], w.shape[3], w.shape[4]
    win = np.lib.stride_tricks.sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]  # [B,Ci,Do,Ho,Wo,kd,kh,kw]
    return np.einsum("bidhwklm,oiklm->bodhw", win, w, optimize=True)


def conv3d_bwd_input_np(gy, w, sd, sh, sw, D, H, W):
    B, Co, Do, Ho, Wo = gy.shape
    _, Ci, kd, kh, kw = w.shape
    gx = np.zeros((B, Ci, D, H, W), gy.dtype)
    for kk in range(kd):
        for ki in range(kh):
            for kj in range(kw):
                contrib = np.einsum("bodhw,oi->bidhw", gy, w[:, :, kk, ki, kj], optimize=True)
                gx[
                    :,
                    :,
                    kk : kk + Do * sd : sd,
                    ki : ki + Ho * sh : sh,
                    kj : kj + Wo * sw : sw,
                ] += contrib
    return gx


def conv3d_bwd_weight_np(gy, x, sd, sh, sw, kd, kh, kw):
    win = np.lib.stride_tricks.sliding_window_view(x, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::sd, ::sh, ::sw]
    return np.einsum("bodhw,bidhwklm->oiklm", gy, win, optimize=True)


# ---------------------------------------------------------------------------
# Weighted scatter-add (trilinear splat accumulation)
# idx: [N,K] flattened voxel ids into an M-slot table, wts: [N,K], feats: [N,C]


@jit
def splat_fwd_nb(idx, wts, feats, M):
    N, K = idx.shape
    C = feats.shape[1]
    out = np.zeros((M, C), feats.dtype)
    wsum = np.zeros(M, feats.dtype)
    for n in range(N):
        for k in range(K):
            j = idx[n, k]
            w = wts[n, k]
            wsum[j] += w
            for c in range(C):
                out[j, c] += w * feats[n, c]
    return out, wsum


def splat_fwd_np(idx, wts, feats, M):
    C = feats.shape[1]
    out = np.zeros((M, C), feats.dtype)
    wsum = np.zeros(M, feats.dtype)
    flat_idx = idx.ravel()
    np.add.at(out, flat_idx, (wts[:, :, None] * feats[:, None, :]).reshape(-1, C))
    np.add.at(wsum, flat_idx, wts.ravel())
    return out, wsum


@jit
def splat_bwd_feats_nb(idx, wts, gout):
    N, K = idx.shape
    C = gout.shape[1]
    gf = np.zeros((N, C), gout.dtype)
    for n in range(N):
        for k in range(K):
            j = idx[n, k]
            w = wts[n, k]
            for c in range(C):
                gf[n, c] += w * gout[j, c]
    return gf


def splat_bwd_feats_np(idx, wts, gout):
    return np.einsum("nk,nkc->nc", wts, gout[idx], optimize=True)


# ---------------------------------------------------------------------------
# Rasterizer pixel-to-triangle assignment (z-buffer, frozen in backward)
# xy: [V,2] screen coords with pixel centers on integers, z: [V] camera depth,
# faces: [F,3] int64.  Returns face id per pixel (-1 empty) and the z-buffer.


@jit
def raster_assign_nb(xy, z, faces, H, W, near, far):
    tri = np.full((H, W), -1, np.int64)
    zbuf = np.full((H, W), np.inf)
    F = faces.shape[0]
    for f in range(F):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 < near or z1 < near or z2 < near:
            continue
        x0, y0 = xy[i0, 0], xy[i0, 1]
        x1, y1 = xy[i1, 0], xy[i1, 1]
        x2, y2 = xy[i2, 0], xy[i2, 1]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        lo_x = int(max(np.floor(min(x0, min(x1, x2))), 0))
        hi_x = int(min(np.ceil(max(x0, max(x1, x2))), W - 1))
        lo_y = int(max(np.floor(min(y0, min(y1, y2))), 0))
        hi_y = int(min(np.ceil(max(y0, max(y1, y2))), H - 1))
        for py in range(lo_y, hi_y + 1):
            for px in range(lo_x, hi_x + 1):
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                d = w0 * z0 + w1 * z1 + w2 * z2
                if d < near or d > far:
                    continue
                if d < zbuf[py, px]:
                    zbuf[py, px] = d
                    tri[py, px] = f
    return tri, zbuf


def raster_assign_np(xy, z, faces, H, W, near, far):
    tri = np.full((H, W), -1, np.int64)
    zbuf = np.full((H, W), np.inf)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        if z0 < near or z1 < near or z2 < near:
            continue
        x0, y0 = xy[i0]
        x1, y1 = xy[i1]
        x2, y2 = xy[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        lo_x = int(max(np.floor(min(x0, x1, x2)), 0))
        hi_x = int(min(np.ceil(max(x0, x1, x2)), W - 1))
        lo_y = int(max(np.floor(min(y0, y1, y2)), 0))
        hi_y = int(min(np.ceil(max(y0, y1, y2)), H - 1))
        if lo_x > hi_x or lo_y > hi_y:
            continue
        px, py = np.meshgrid(
            np.arange(lo_x, hi_x + 1, dtype=np.float64),
            np.arange(lo_y, hi_y + 1, dtype=np.float64),
        )
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        w2 = 1.0 - w0 - w1
        d = w0 * z0 + w1 * z1 + w2 * z2
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (d >= near) & (d <= far)
        sub_z = zbuf[lo_y : hi_y + 1, lo_x : hi_x + 1]
        better = inside & (d < sub_z)
        sub_z[better] = d[better]
        tri[lo_y : hi_y + 1, lo_x : hi_x + 1][better] = f
    return tri, zbuf
