"""Binary weight checkpoints (magic "SAWT", little-endian, version 1).

Layout: header (magic, u16 version, input dims, class count, layer count)
followed by one self-describing record per layer. Float payloads are
stored as little-endian float32, so a save/load/save cycle is
byte-identical and loaded parameters match the saved ones bit for bit.
"""

import struct

import numpy as np

from . import layers as L
from .network import Network

MAGIC = b"SAWT"
VERSION = 1

_KIND_TAGS = {"conv2d": 1, "depthwise_conv2d": 2, "separable_conv2d": 3,
              "batch_norm": 4, "elu": 5, "avg_pool2d": 6, "dropout": 7,
              "flatten": 8, "linear": 9}
_BN_MODE_TAGS = {L.BN_FIXED_SOURCE: 0, L.BN_TRACK_RUNNING: 1,
                 L.BN_BATCH_ONLY: 2}
_BN_MODE_FROM_TAG = {v: k for k, v in _BN_MODE_TAGS.items()}


class CheckpointError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def array(self, arr):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        self.u8(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.parts.append(arr.tobytes())

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def _take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def array(self, dtype):
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(dtype)


def _write_conv(w, conv):
    w.u32(conv.in_channels)
    w.u32(conv.out_channels)
    w.u16(conv.kernel[0])
    w.u16(conv.kernel[1])
    w.u32(conv.groups)
    for p in conv.pad:
        w.u16(p)
    w.u8(1 if conv.bias is not None else 0)
    w.array(conv.weight)
    if conv.bias is not None:
        w.array(conv.bias)


def _read_conv(r, dtype, depthwise=False):
    cin = r.u32()
    cout = r.u32()
    kernel = (r.u16(), r.u16())
    groups = r.u32()
    pad = tuple(r.u16() for _ in range(4))
    has_bias = r.u8()
    if depthwise:
        conv = L.DepthwiseConv2D(cin, cout // cin, kernel, padding=pad,
                                 bias=bool(has_bias), dtype=dtype)
    else:
        conv = L.Conv2D(cin, cout, kernel, padding=pad, groups=groups,
                        bias=bool(has_bias), dtype=dtype)
    conv.weight = r.array(dtype)
    if has_bias:
        conv.bias = r.array(dtype)
    return conv


def save_checkpoint(net, path):
    w = _Writer()
    w.parts.append(MAGIC)
    w.u16(VERSION)
    for d in net.input_shape:
        w.u32(d)
    w.u32(net.class_count)
    w.u32(len(net.layers))
    for layer in net.layers:
        w.u8(_KIND_TAGS[layer.kind])
        if layer.kind in ("conv2d", "depthwise_conv2d"):
            _write_conv(w, layer)
        elif layer.kind == "separable_conv2d":
            _write_conv(w, layer.depthwise)
            _write_conv(w, layer.pointwise)
        elif layer.kind == "batch_norm":
            w.u32(layer.channels)
            w.f64(layer.eps)
            w.f64(layer.momentum)
            w.u8(_BN_MODE_TAGS[layer.mode])
            w.array(layer.gamma)
            w.array(layer.beta)
            w.array(layer.running_mean)
            w.array(layer.running_var)
        elif layer.kind == "elu":
            w.f64(layer.alpha)
        elif layer.kind == "avg_pool2d":
            w.u16(layer.kernel[0])
            w.u16(layer.kernel[1])
        elif layer.kind == "dropout":
            w.f64(layer.rate)
        elif layer.kind == "flatten":
            pass
        elif layer.kind == "linear":
            w.u32(layer.in_features)
            w.u32(layer.out_features)
            w.u8(1 if layer.bias is not None else 0)
            w.array(layer.weight)
            if layer.bias is not None:
                w.array(layer.bias)
        else:
            raise CheckpointError(f"cannot serialize layer {layer.kind}")
    data = w.bytes()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as f:
        buf = f.read()
    r = _Reader(buf)
    if r._take(4) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = r.u16()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    input_shape = tuple(r.u32() for _ in range(3))
    class_count = r.u32()
    n_layers = r.u32()
    stack = []
    for _ in range(n_layers):
        tag = r.u8()
        if tag == _KIND_TAGS["conv2d"]:
            stack.append(_read_conv(r, dtype))
        elif tag == _KIND_TAGS["depthwise_conv2d"]:
            stack.append(_read_conv(r, dtype, depthwise=True))
        elif tag == _KIND_TAGS["separable_conv2d"]:
            dw = _read_conv(r, dtype)
            pw = _read_conv(r, dtype)
            sep = L.SeparableConv2D(dw.in_channels, pw.out_channels,
                                    dw.kernel, dtype=dtype)
            sep.depthwise = dw
            sep.pointwise = pw
            stack.append(sep)
        elif tag == _KIND_TAGS["batch_norm"]:
            channels = r.u32()
            eps = r.f64()
            momentum = r.f64()
            mode = _BN_MODE_FROM_TAG[r.u8()]
            bn = L.BatchNorm(channels, eps=eps, momentum=momentum, mode=mode,
                             dtype=dtype)
            bn.gamma = r.array(dtype)
            bn.beta = r.array(dtype)
            bn.running_mean = r.array(dtype)
            bn.running_var = r.array(dtype)
            stack.append(bn)
        elif tag == _KIND_TAGS["elu"]:
            stack.append(L.ELU(alpha=r.f64()))
        elif tag == _KIND_TAGS["avg_pool2d"]:
            stack.append(L.AvgPool2D((r.u16(), r.u16())))
        elif tag == _KIND_TAGS["dropout"]:
            stack.append(L.Dropout(r.f64()))
        elif tag == _KIND_TAGS["flatten"]:
            stack.append(L.Flatten())
        elif tag == _KIND_TAGS["linear"]:
            cin = r.u32()
            cout = r.u32()
            has_bias = r.u8()
            lin = L.Linear(cin, cout, bias=bool(has_bias), dtype=dtype)
            lin.weight = r.array(dtype)
            if has_bias:
                lin.bias = r.array(dtype)
            stack.append(lin)
        else:
            raise CheckpointError(f"unknown layer tag {tag}")
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after last layer record")
    return Network(stack, input_shape, class_count, dtype=dtype)
