"""Network layers with hand-written forward and reverse passes.

Every layer implements ``forward(x, phase, rng) -> (y, cache)`` and
``backward(dy, cache, need_dx, need_param_grads) -> (dx, grads)``. The
phase separates three execution regimes:

* ``pretrain``  - dropout active, BN normalizes with batch statistics and
                  tracks running statistics (classic training behavior).
* ``adapt``     - dropout is identity; BN behaves per its statistics mode,
                  and only this phase may mutate running statistics.
* ``eval``      - dropout is identity; no state mutation anywhere.

BN statistic modes (adapt/eval phases):

* ``fixed_source``  - normalize with the stored source statistics.
* ``batch_only``    - normalize with the current batch statistics.
* ``track_running`` - in the adapt phase, fold batch statistics into the
                      running estimates by momentum and normalize with the
                      updated values; in eval, use current running values.

For ``track_running`` the statistics are treated as constants in the
backward pass (they are buffers, not parameters), matching how momentum-BN
test-time adaptation methods detach their running estimates.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import convops

PHASE_PRETRAIN = "pretrain"
PHASE_ADAPT = "adapt"
PHASE_EVAL = "eval"

BN_FIXED_SOURCE = "fixed_source"
BN_TRACK_RUNNING = "track_running"
BN_BATCH_ONLY = "batch_only"
BN_MODES = (BN_FIXED_SOURCE, BN_TRACK_RUNNING, BN_BATCH_ONLY)


def same_padding(kernel):
    """(before, after) zero padding that preserves length for stride 1."""
    total = kernel - 1
    before = total // 2
    return before, total - before


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D:
    """Grouped 2-D convolution, stride 1, explicit zero padding.

    weight shape: (out_channels, in_channels // groups, kh, kw).
    """

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, padding="valid",
                 groups=1, bias=False, rng=None, dtype=np.float32):
        if in_channels % groups or out_channels % groups:
            raise ValueError("channel counts must be divisible by groups")
        kh, kw = kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.groups = groups
        if padding == "valid":
            self.pad = (0, 0, 0, 0)
        elif padding == "same":
            pt, pb = same_padding(kh)
            pl, pr = same_padding(kw)
            self.pad = (pt, pb, pl, pr)
        else:
            self.pad = tuple(padding)
        cg = in_channels // groups
        fan_in = cg * kh * kw
        fan_out = (out_channels // groups) * kh * kw
        shape = (out_channels, cg, kh, kw)
        if rng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = glorot_uniform(rng, shape, fan_in, fan_out, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def out_shape(self, in_shape):
        c, h, w = in_shape
        pt, pb, pl, pr = self.pad
        kh, kw = self.kernel
        return (self.out_channels, h + pt + pb - kh + 1, w + pl + pr - kw + 1)

    def _pad(self, x):
        pt, pb, pl, pr = self.pad
        if any(self.pad):
            return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        return x

    def _path(self, padded_h):
        kh, kw = self.kernel
        if kh == 1 and kw == 1 and self.groups == 1:
            return "pointwise"
        if kw == 1 and kh == padded_h:
            return "height_collapse"
        if kh == 1:
            return "fft"
        return "im2col"

    def _im2col(self, xp):
        # returns (G, N*OH*OW, Cg*kh*kw) patch matrix plus output dims
        n = xp.shape[0]
        kh, kw = self.kernel
        oh = xp.shape[2] - kh + 1
        ow = xp.shape[3] - kw + 1
        g = self.groups
        cg = self.in_channels // g
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win.reshape(n, g, cg, oh, ow, kh, kw)
        cols = np.ascontiguousarray(win.transpose(1, 0, 3, 4, 2, 5, 6))
        return cols.reshape(g, n * oh * ow, cg * kh * kw), oh, ow

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"conv expects {self.in_channels} channels, got {x.shape[1]}")
        n = x.shape[0]
        g = self.groups
        cog = self.out_channels // g
        xp = self._pad(x)
        path = self._path(xp.shape[2])
        if path == "pointwise":
            y, sub = convops.pointwise_forward(xp, self.weight)
        elif path == "height_collapse":
            y, sub = convops.height_collapse_forward(xp, self.weight, g)
        elif path == "fft":
            y, sub = convops.fft_forward(xp, self.weight, g,
                                         convops.fft_length(xp.shape[3]))
        else:
            cols, oh, ow = self._im2col(xp)
            wg = self.weight.reshape(g, cog, -1)
            out = cols @ wg.transpose(0, 2, 1)      # (G, N*OH*OW, Cog)
            out = out.reshape(g, n, oh, ow, cog).transpose(1, 0, 4, 2, 3)
            y = np.ascontiguousarray(out.reshape(n, self.out_channels, oh,
                                                 ow))
            sub = (cols, oh, ow)
        if self.bias is not None:
            y += self.bias[:, None, None]
        return y, (path, sub, x.shape)

    def _unpad(self, dxp, x_shape):
        pt, pb, pl, pr = self.pad
        if not any(self.pad):
            return dxp
        hp, wp = dxp.shape[2], dxp.shape[3]
        return np.ascontiguousarray(
            dxp[:, :, pt:hp - pb if pb else hp, pl:wp - pr if pr else wp])

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        path, sub, x_shape = cache
        n = x_shape[0]
        g = self.groups
        cog = self.out_channels // g
        cg = self.in_channels // g
        kh, kw = self.kernel
        if path == "pointwise":
            dx, dw = convops.pointwise_backward(dy, sub, self.weight,
                                                need_dx, need_param_grads)
        elif path == "height_collapse":
            dxp, dw = convops.height_collapse_backward(
                dy, sub, self.weight, g, need_dx, need_param_grads)
            dx = self._unpad(dxp, x_shape) if need_dx else None
        elif path == "fft":
            dxp, dw = convops.fft_backward(dy, sub, self.weight, g,
                                           need_dx, need_param_grads)
            dx = self._unpad(dxp, x_shape) if need_dx else None
        else:
            cols, oh, ow = sub
            dyg = dy.reshape(n, g, cog, oh, ow).transpose(1, 0, 3, 4, 2)
            dyg = np.ascontiguousarray(dyg).reshape(g, n * oh * ow, cog)
            dw = None
            if need_param_grads:
                dw = (dyg.transpose(0, 2, 1) @ cols).reshape(
                    self.weight.shape)
            dx = None
            if need_dx:
                wg = self.weight.reshape(g, cog, -1)
                dcols = dyg @ wg                    # (G, N*OH*OW, Cg*kh*kw)
                dcols = dcols.reshape(g, n, oh, ow, cg, kh, kw)
                pt, pb, pl, pr = self.pad
                hp = x_shape[2] + pt + pb
                wp = x_shape[3] + pl + pr
                dxp = np.zeros((n, g, cg, hp, wp), dtype=dy.dtype)
                for u in range(kh):
                    for v in range(kw):
                        dxp[:, :, :, u:u + oh, v:v + ow] += (
                            dcols[:, :, :, :, :, u, v].transpose(1, 0, 4, 2,
                                                                 3))
                dx = self._unpad(dxp.reshape(n, self.in_channels, hp, wp),
                                 x_shape)
        grads = None
        if need_param_grads:
            grads = {"weight": dw}
            if self.bias is not None:
                grads["bias"] = dy.sum(axis=(0, 2, 3))
        return dx, grads


class DepthwiseConv2D(Conv2D):
    """Per-channel convolution with a depth multiplier (groups == in_channels)."""

    kind = "depthwise_conv2d"

    def __init__(self, in_channels, depth_multiplier, kernel, padding="valid",
                 bias=False, rng=None, dtype=np.float32):
        super().__init__(in_channels, in_channels * depth_multiplier, kernel,
                         padding=padding, groups=in_channels, bias=bias,
                         rng=rng, dtype=dtype)
        self.depth_multiplier = depth_multiplier


class SeparableConv2D:
    """Depthwise convolution followed by a 1x1 pointwise convolution."""

    kind = "separable_conv2d"

    def __init__(self, in_channels, out_channels, kernel, padding="same",
                 bias=False, rng=None, dtype=np.float32):
        self.depthwise = Conv2D(in_channels, in_channels, kernel,
                                padding=padding, groups=in_channels,
                                bias=False, rng=rng, dtype=dtype)
        self.pointwise = Conv2D(in_channels, out_channels, (1, 1),
                                padding="valid", groups=1, bias=bias,
                                rng=rng, dtype=dtype)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(kernel)

    def params(self):
        p = {"depthwise_weight": self.depthwise.weight,
             "pointwise_weight": self.pointwise.weight}
        if self.pointwise.bias is not None:
            p["bias"] = self.pointwise.bias
        return p

    def out_shape(self, in_shape):
        return self.pointwise.out_shape(self.depthwise.out_shape(in_shape))

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        mid, c1 = self.depthwise.forward(x, phase, rng)
        y, c2 = self.pointwise.forward(mid, phase, rng)
        return y, (c1, c2)

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        c1, c2 = cache
        dmid, g2 = self.pointwise.backward(
            dy, c2, need_dx=True, need_param_grads=need_param_grads)
        dx, g1 = self.depthwise.backward(
            dmid, c1, need_dx=need_dx, need_param_grads=need_param_grads)
        grads = None
        if need_param_grads:
            grads = {"depthwise_weight": g1["weight"],
                     "pointwise_weight": g2["weight"]}
            if "bias" in g2:
                grads["bias"] = g2["bias"]
        return dx, grads


class BatchNorm:
    """Channel-wise batch normalization with selectable statistics regime."""

    kind = "batch_norm"

    def __init__(self, channels, eps=1e-5, momentum=0.9,
                 mode=BN_FIXED_SOURCE, dtype=np.float32):
        if mode not in BN_MODES:
            raise ValueError(f"unknown BN mode {mode!r}")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.mode = mode
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def out_shape(self, in_shape):
        return in_shape

    def _batch_stats(self, x):
        mean = x.mean(axis=(0, 2, 3))
        var = ((x - mean[:, None, None]) ** 2).mean(axis=(0, 2, 3))
        return mean, var

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        if x.shape[1] != self.channels:
            raise ValueError(
                f"BN expects {self.channels} channels, got {x.shape[1]}")
        coupled = False
        if phase == PHASE_PRETRAIN:
            mean, var = self._batch_stats(x)
            d = self.momentum
            self.running_mean = (d * self.running_mean
                                 + (1.0 - d) * mean).astype(x.dtype)
            self.running_var = (d * self.running_var
                                + (1.0 - d) * var).astype(x.dtype)
            coupled = True
        elif self.mode == BN_FIXED_SOURCE:
            mean, var = self.running_mean, self.running_var
        elif self.mode == BN_BATCH_ONLY:
            mean, var = self._batch_stats(x)
            coupled = True
        else:  # track_running
            if phase == PHASE_ADAPT:
                bmean, bvar = self._batch_stats(x)
                d = self.momentum
                self.running_mean = (d * self.running_mean
                                     + (1.0 - d) * bmean).astype(x.dtype)
                self.running_var = (d * self.running_var
                                    + (1.0 - d) * bvar).astype(x.dtype)
            mean, var = self.running_mean, self.running_var
        assert np.all(var >= 0.0), "negative BN variance"
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        # fused affine: y = x * (gamma/std) + (beta - mean*gamma/std); the
        # normalized activation is rebuilt lazily in backward
        scale = self.gamma * inv_std
        shift = self.beta - mean * scale
        y = x * scale[:, None, None]
        y += shift[:, None, None]
        return y, (x, mean.astype(x.dtype), inv_std, coupled)

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        x, mean, inv_std, coupled = cache
        xhat = None
        if need_param_grads or coupled:
            xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
        grads = None
        if need_param_grads:
            grads = {"gamma": (dy * xhat).sum(axis=(0, 2, 3)),
                     "beta": dy.sum(axis=(0, 2, 3))}
        dx = None
        if need_dx:
            scale = (self.gamma * inv_std)[:, None, None]
            if coupled:
                m = dy.shape[0] * dy.shape[2] * dy.shape[3]
                s1 = dy.sum(axis=(0, 2, 3))[:, None, None]
                s2 = (dy * xhat).sum(axis=(0, 2, 3))[:, None, None]
                dx = scale * (dy - s1 / m - xhat * s2 / m)
            else:
                dx = scale * dy
        return dx, grads


class ELU:
    kind = "elu"

    def __init__(self, alpha=1.0):
        self.alpha = alpha

    def params(self):
        return {}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        neg = x <= 0.0
        y = np.where(neg, self.alpha * np.expm1(np.minimum(x, 0.0)), x)
        return y, (neg, y)

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        if not need_dx:
            return None, None
        neg, y = cache
        dx = np.where(neg, dy * (y + self.alpha), dy)
        return dx, None


class AvgPool2D:
    """Non-overlapping average pooling; kernel must tile the input exactly."""

    kind = "avg_pool2d"

    def __init__(self, kernel):
        self.kernel = tuple(kernel)

    def params(self):
        return {}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.kernel
        if h % kh or w % kw:
            raise ValueError(f"pool {self.kernel} does not tile {h}x{w}")
        return (c, h // kh, w // kw)

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        n, c, h, w = x.shape
        kh, kw = self.kernel
        if h % kh or w % kw:
            raise ValueError(f"pool {self.kernel} does not tile {h}x{w}")
        y = x.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        if not need_dx:
            return None, None
        n, c, h, w = cache
        kh, kw = self.kernel
        dx = dy[:, :, :, None, :, None] / (kh * kw)
        dx = np.broadcast_to(dx, (n, c, h // kh, kh, w // kw, kw))
        return np.ascontiguousarray(dx).reshape(n, c, h, w), None


class Dropout:
    """Inverted dropout; active only in the pretrain phase."""

    kind = "dropout"

    def __init__(self, rate):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def params(self):
        return {}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        if phase != PHASE_PRETRAIN or self.rate == 0.0:
            return x, ()  # identity; () keeps the cache slot non-None
        if rng is None:
            raise ValueError("dropout in pretrain phase needs an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype)
        keep /= (1.0 - self.rate)
        return x * keep, keep

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        if not need_dx:
            return None, None
        if isinstance(cache, np.ndarray):
            return dy * cache, None
        return dy, None


class Flatten:
    kind = "flatten"

    def params(self):
        return {}

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        if not need_dx:
            return None, None
        return dy.reshape(cache), None


class Linear:
    """Dense layer on flattened features; weight shape (out, in)."""

    kind = "linear"

    def __init__(self, in_features, out_features, bias=True, rng=None,
                 dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        shape = (out_features, in_features)
        if rng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = glorot_uniform(rng, shape, in_features,
                                         out_features, dtype)
        self.bias = np.zeros(out_features, dtype=dtype) if bias else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.in_features:
            raise ValueError(
                f"linear expects {self.in_features} features, got {in_shape}")
        return (self.out_features,)

    def forward(self, x, phase=PHASE_EVAL, rng=None):
        y = x @ self.weight.T
        if self.bias is not None:
            y += self.bias
        return y, x

    def backward(self, dy, cache, need_dx=True, need_param_grads=True):
        grads = None
        if need_param_grads:
            grads = {"weight": dy.T @ cache}
            if self.bias is not None:
                grads["bias"] = dy.sum(axis=0)
        dx = dy @ self.weight if need_dx else None
        return dx, grads


def bn_apply(x, bn, training=False):
    """Normalize ``x`` through a BatchNorm layer per its statistics mode.

    ``training`` gates the running-statistics update of the track_running
    mode; fixed_source and batch_only behave identically either way.
    """
    phase = PHASE_ADAPT if training else PHASE_EVAL
    y, _ = bn.forward(x, phase=phase)
    return y
