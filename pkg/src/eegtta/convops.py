"""Specialized convolution kernels for the shapes this network family uses.

Every conv here is 1-D in disguise, which admits three fast layouts:

* pointwise      - 1x1 kernels: a single channel-mixing GEMM.
* height_collapse- (kh x 1) kernels spanning the full (padded) height:
                   one batched GEMM per group over the height axis.
* fft_corr       - (1 x kw) kernels: spectral correlation along time with
                   an FFT length >= padded width, which keeps the sliced
                   output region free of circular wrap-around.

Each path implements the exact same linear operator as naive im2col (they
are checked against it in the tests); only floating-point rounding
differs. Gradients are exact for the implemented operator.
"""

import numpy as np
import scipy.fft as sfft

_WORKERS = 2


def _rfft(x, n):
    return sfft.rfft(x, n=n, axis=-1, workers=_WORKERS)


def _irfft(x, n):
    return sfft.irfft(x, n=n, axis=-1, workers=_WORKERS)


# ---- pointwise (1x1, groups == 1) --------------------------------------------

def pointwise_forward(x, weight):
    n, c, h, w = x.shape
    o = weight.shape[0]
    xm = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(c, -1)
    out = weight.reshape(o, c) @ xm
    y = np.ascontiguousarray(out.reshape(o, n, h, w).transpose(1, 0, 2, 3))
    return y, (xm, x.shape)


def pointwise_backward(dy, cache, weight, need_dx, need_dw):
    xm, x_shape = cache
    n, c, h, w = x_shape
    o = weight.shape[0]
    dym = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(o, -1)
    dw = None
    if need_dw:
        dw = (dym @ xm.T).reshape(weight.shape)
    dx = None
    if need_dx:
        dxm = weight.reshape(o, c).T @ dym
        dx = np.ascontiguousarray(
            dxm.reshape(c, n, h, w).transpose(1, 0, 2, 3))
    return dx, dw


# ---- full-height projection (kh x 1, output height 1) -------------------------

def height_collapse_forward(xp, weight, groups):
    n, c, hp, wp = xp.shape
    cout = weight.shape[0]
    g = groups
    cg, cog = c // g, cout // g
    xt = np.ascontiguousarray(xp.transpose(1, 2, 0, 3)).reshape(
        g, cg * hp, n * wp)
    wg = weight.reshape(g, cog, cg * hp)
    out = wg @ xt                                  # (G, Cog, N*Wp)
    y = np.ascontiguousarray(
        out.reshape(g, cog, n, wp).transpose(2, 0, 1, 3)).reshape(
        n, cout, 1, wp)
    return y, (xt, xp.shape)


def height_collapse_backward(dy, cache, weight, groups, need_dx, need_dw):
    xt, xp_shape = cache
    n, c, hp, wp = xp_shape
    cout = weight.shape[0]
    g = groups
    cg, cog = c // g, cout // g
    dyg = np.ascontiguousarray(
        dy.reshape(n, g, cog, wp).transpose(1, 2, 0, 3)).reshape(
        g, cog, n * wp)
    dw = None
    if need_dw:
        dw = (dyg @ xt.transpose(0, 2, 1)).reshape(weight.shape)
    dxp = None
    if need_dx:
        wg = weight.reshape(g, cog, cg * hp)
        dxt = wg.transpose(0, 2, 1) @ dyg          # (G, Cg*Hp, N*Wp)
        dxp = np.ascontiguousarray(
            dxt.reshape(g, cg, hp, n, wp).transpose(3, 0, 1, 2, 4)).reshape(
            n, c, hp, wp)
    return dxp, dw


# ---- spectral correlation along width (1 x kw) ---------------------------------

def _spectral_mix(xf, wf, groups):
    """of[n,g,o,h,f] = sum_c xf[n,g,c,h,f] * wf[g,o,c,f]."""
    n, c, h, f = xf.shape
    g = groups
    cg = c // g
    xfg = xf.reshape(n, g, cg, h, f)
    if cg == 1:
        # depthwise-style: plain broadcast, no contraction
        return xfg[:, :, 0, None, :, :] * wf[None, :, :, 0, None, :]
    return np.einsum("ngchf,gocf->ngohf", xfg, wf, optimize=True)


def fft_forward(xp, weight, groups, fft_len):
    n, c, hp, wp = xp.shape
    cout, cg, _, k = weight.shape
    ow = wp - k + 1
    xf = _rfft(xp, fft_len)
    wf_rev = _rfft(weight[:, :, 0, ::-1].reshape(
        groups, cout // groups, cg, k), fft_len)
    of = _spectral_mix(xf, wf_rev, groups)
    full = _irfft(of, fft_len)
    y = np.ascontiguousarray(full[..., k - 1:k - 1 + ow]).reshape(
        n, cout, hp, ow)
    return y, (xp, xf, fft_len)


def fft_backward(dy, cache, weight, groups, need_dx, need_dw):
    xp, xf, fft_len = cache
    n, c, hp, wp = xp.shape
    cout, cg, _, k = weight.shape
    g = groups
    cog = cout // g
    ow = wp - k + 1
    dyg = dy.reshape(n, g, cog, hp, ow)
    dyf = _rfft(dyg, fft_len)
    dw = None
    if need_dw:
        xfg = xf.reshape(n, g, cg, hp, -1)
        cf = np.einsum("ngchf,ngohf->gocf", xfg, np.conj(dyf),
                       optimize=True)
        dw = _irfft(cf, fft_len)[..., :k].reshape(weight.shape)
        dw = np.ascontiguousarray(dw, dtype=weight.dtype)
    dxp = None
    if need_dx:
        wf = _rfft(weight[:, :, 0, :].reshape(g, cog, cg, k), fft_len)
        if cg == 1:
            dxf = (dyf * wf[None, :, :, 0, None, :]).sum(axis=2)[:, :, None]
        else:
            dxf = np.einsum("ngohf,gocf->ngchf", dyf, wf, optimize=True)
        dxp = _irfft(dxf, fft_len)[..., :wp].reshape(n, c, hp, wp)
        dxp = np.ascontiguousarray(dxp, dtype=dy.dtype)
    return dxp, dw


def fft_length(padded_width):
    return sfft.next_fast_len(padded_width)
