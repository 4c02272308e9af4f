"""Fixed layer-stack network: forward, scoped backward, parameter plumbing.

The stack is a plain ordered list of layers from ``eegtta.layers``. The
reverse pass supports two scopes: full parameter gradients, or gradients
for the BN affine parameters only (activation gradients still flow through
every layer above the first BN, then stop).
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import require_finite

SCOPE_ALL = "all_params"
SCOPE_BN_AFFINE = "bn_affine_only"


@dataclass
class ForwardResult:
    logits: np.ndarray          # (batch, classes)
    features: np.ndarray        # (batch, feature_dim), input to the head
    caches: list | None = None  # per-layer caches for backward


@dataclass
class ParamGrads:
    scope: str
    by_key: dict = field(default_factory=dict)  # (layer_idx, name) -> array

    def keys(self):
        return self.by_key.keys()

    def __getitem__(self, key):
        return self.by_key[key]


class Network:
    def __init__(self, net_layers, input_shape, class_count, dtype=np.float32):
        if class_count < 2:
            raise ValueError("class_count must be >= 2")
        self.layers = list(net_layers)
        self.input_shape = tuple(input_shape)  # (c, h, w)
        self.class_count = class_count
        self.dtype = np.dtype(dtype)
        self._check_shapes()
        head = self.layers[-1]
        if not isinstance(head, L.Linear) or head.out_features != class_count:
            raise ValueError("network must end in a Linear head of size "
                             f"{class_count}")
        self.head_index = len(self.layers) - 1

    def _check_shapes(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if i == len(self.layers) - 1:
                self.feature_dim = int(np.prod(shape))
            try:
                shape = layer.out_shape(shape)
            except ValueError as e:
                raise ValueError(f"layer {i} ({layer.kind}): {e}") from e

    # ---- parameter access -------------------------------------------------

    def bn_layers(self):
        return [(i, l) for i, l in enumerate(self.layers)
                if isinstance(l, L.BatchNorm)]

    def param_items(self, scope=SCOPE_ALL):
        """Ordered [(key, array)] of parameters covered by the scope."""
        items = []
        for i, layer in enumerate(self.layers):
            if scope == SCOPE_BN_AFFINE and not isinstance(layer, L.BatchNorm):
                continue
            for name, arr in layer.params().items():
                items.append(((i, name), arr))
        return items

    def set_param(self, key, value):
        i, name = key
        layer = self.layers[i]
        current = layer.params()[name]
        if current.shape != value.shape:
            raise ValueError(f"shape mismatch for {key}: "
                             f"{current.shape} vs {value.shape}")
        value = value.astype(current.dtype)
        if name in ("weight", "bias", "gamma", "beta"):
            setattr(layer, name, value)
        elif name == "depthwise_weight":
            layer.depthwise.weight = value
        elif name == "pointwise_weight":
            layer.pointwise.weight = value
        else:
            raise KeyError(name)

    def set_bn_mode(self, mode):
        for _, bn in self.bn_layers():
            if mode not in L.BN_MODES:
                raise ValueError(f"unknown BN mode {mode!r}")
            bn.mode = mode

    def param_hash(self, include_bn_affine=True, include_bn_stats=True):
        """SHA-256 over raw parameter bytes, for freeze checks."""
        h = hashlib.sha256()
        for (i, name), arr in self.param_items():
            bn_affine = isinstance(self.layers[i], L.BatchNorm)
            if bn_affine and not include_bn_affine:
                continue
            h.update(f"{i}:{name}".encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        if include_bn_stats:
            for i, bn in self.bn_layers():
                h.update(f"{i}:stats".encode())
                h.update(np.ascontiguousarray(bn.running_mean).tobytes())
                h.update(np.ascontiguousarray(bn.running_var).tobytes())
        return h.hexdigest()

    # ---- execution ---------------------------------------------------------

    def forward(self, x, phase=L.PHASE_EVAL, rng=None, start_layer=0,
                keep_cache=True):
        """Run layers [start_layer:]; returns logits, head input, caches.

        ``start_layer`` allows resuming from a precomputed activation (the
        frozen stem of memory-bank segments); caches then cover only the
        layers actually executed, with ``None`` placeholders below.
        """
        x = np.asarray(x, dtype=self.dtype)
        if start_layer == 0 and x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match "
                             f"network input {self.input_shape}")
        caches = [None] * len(self.layers) if keep_cache else None
        features = None
        for i in range(start_layer, len(self.layers)):
            if i == self.head_index:
                features = x
            x, cache = self.layers[i].forward(x, phase=phase, rng=rng)
            if keep_cache:
                caches[i] = cache
        require_finite(x, "logits")
        return ForwardResult(logits=x, features=features, caches=caches)

    def backward(self, caches, dlogits, scope=SCOPE_BN_AFFINE):
        """Exact reverse pass for the loss whose logit gradient is given."""
        grads, _ = self.backward_partial(caches, dlogits, scope, stop_layer=0,
                                         want_boundary_grad=False)
        return grads

    def backward_partial(self, caches, dlogits, scope=SCOPE_BN_AFFINE,
                         stop_layer=0, want_boundary_grad=True):
        """Reverse pass over layers [stop_layer:], returning (grads, dy).

        ``dy`` is the gradient flowing into layer ``stop_layer`` (None
        unless requested); parameters below the stop are the caller's
        responsibility.
        """
        if scope not in (SCOPE_ALL, SCOPE_BN_AFFINE):
            raise ValueError(f"unknown scope {scope!r}")
        grads = ParamGrads(scope=scope)
        wants = [scope == SCOPE_ALL or isinstance(l, L.BatchNorm)
                 for l in self.layers]
        # deepest layer whose parameters we still need decides how far the
        # activation gradient must travel
        lowest = min((i for i in range(stop_layer, len(self.layers))
                      if wants[i]), default=len(self.layers))
        reach = stop_layer if want_boundary_grad else lowest
        if lowest < len(self.layers) and caches[lowest] is None:
            raise ValueError("forward cache does not reach every parameter "
                             "in scope (stale or stem-resumed cache)")
        dy = np.asarray(dlogits, dtype=self.dtype)
        for i in range(len(self.layers) - 1, stop_layer - 1, -1):
            if caches[i] is None:
                raise ValueError(f"missing cache for layer {i}")
            need_dx = i > reach or (i == stop_layer and want_boundary_grad)
            dy, layer_grads = self.layers[i].backward(
                dy, caches[i], need_dx=need_dx,
                need_param_grads=wants[i])
            if layer_grads:
                for name, g in layer_grads.items():
                    grads.by_key[(i, name)] = g
            if not need_dx:
                dy = None
                break
        return grads, dy


def build_eegnet(channels=30, samples=384, class_count=2, temporal_filters=8,
                 depth_multiplier=2, pointwise_filters=16, kernel_length=64,
                 separable_length=16, pool1=4, pool2=8, dropout_rate=0.25,
                 bn_mode=L.BN_FIXED_SOURCE, bn_eps=1e-5, bn_momentum=0.9,
                 dtype=np.float32, seed=0):
    """Compact two-block EEG CNN ending in a linear head.

    With the defaults, a (1, 30, 384) segment produces a
    16 * 384/32 = 192-dimensional feature vector.
    """
    if samples % (pool1 * pool2):
        raise ValueError("samples must be divisible by pool1*pool2")
    rng = np.random.default_rng(seed)
    f1, d, f2 = temporal_filters, depth_multiplier, pointwise_filters

    def bn(c):
        return L.BatchNorm(c, eps=bn_eps, momentum=bn_momentum, mode=bn_mode,
                           dtype=dtype)

    stack = [
        L.Conv2D(1, f1, (1, kernel_length), padding="same", rng=rng,
                 dtype=dtype),
        bn(f1),
        L.DepthwiseConv2D(f1, d, (channels, 1), padding="valid", rng=rng,
                          dtype=dtype),
        bn(f1 * d),
        L.ELU(),
        L.AvgPool2D((1, pool1)),
        L.Dropout(dropout_rate),
        L.SeparableConv2D(f1 * d, f2, (1, separable_length), padding="same",
                          rng=rng, dtype=dtype),
        bn(f2),
        L.ELU(),
        L.AvgPool2D((1, pool2)),
        L.Dropout(dropout_rate),
        L.Flatten(),
        L.Linear(f2 * samples // (pool1 * pool2), class_count, bias=True,
                 rng=rng, dtype=dtype),
    ]
    return Network(stack, (1, channels, samples), class_count, dtype=dtype)
