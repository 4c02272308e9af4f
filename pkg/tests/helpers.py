"""Shared test utilities: finite-difference oracles and tiny fixtures."""

import numpy as np


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar f with respect to arr, in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst-case elementwise relative error with a denominator floor.

    The floor makes near-zero gradient pairs compare in absolute terms at
    floor scale instead of blowing up a meaningless ratio.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def linear_probe_loss(weights):
    """L(y) = sum(w * y): a fixed functional whose output gradient is w."""
    def loss(y):
        return float(np.sum(weights * y))
    return loss
