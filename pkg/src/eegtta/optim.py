"""Adam and AdamW with bias correction over keyed parameter sets."""

from dataclasses import dataclass, field

import numpy as np

ADAM = "adam"
ADAMW = "adamw"


@dataclass
class OptState:
    kind: str = ADAMW
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (ADAM, ADAMW):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.step < 0:
            raise ValueError("step must be >= 0")


def optimizer_step(net, grads, opt):
    """One optimizer step over the parameters covered by ``grads``.

    Moment buffers are created lazily and keyed like the gradients, so one
    OptState can persist across the whole adaptation run. AdamW applies its
    decoupled decay after the moment-based step, scaling the updated value
    by (1 - lr * weight_decay).
    """
    opt.step += 1
    t = opt.step
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    for (key, param) in net.param_items(scope=grads.scope):
        g = grads.by_key.get(key)
        if g is None:
            raise KeyError(f"missing gradient for {key}")
        if g.shape != param.shape:
            raise ValueError(f"gradient shape {g.shape} does not match "
                             f"parameter {key} shape {param.shape}")
        g = g.astype(np.float64) if param.dtype == np.float64 else g
        m = opt.m.get(key)
        if m is None:
            m = np.zeros_like(param)
            v = np.zeros_like(param)
        else:
            v = opt.v[key]
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
        opt.m[key] = m
        opt.v[key] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        new = param - opt.lr * update.astype(param.dtype)
        if opt.kind == ADAMW and opt.weight_decay:
            new *= 1.0 - opt.lr * opt.weight_decay
        net.set_param(key, new)
    return opt
