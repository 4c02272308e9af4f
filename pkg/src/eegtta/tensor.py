"""Dense 4-D activation tensors and boundary validation.

Activations and gradients travel as plain numpy arrays in NCHW layout
(batch, channel, height, width). Production code runs in float32; a
float64 path exists for gradient verification.
"""

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64


def as_nchw(x, dtype=FLOAT32):
    """Coerce a segment or batch to a contiguous NCHW array.

    Accepts (h, w) single-channel segments, (c, h, w) segments, or full
    (n, c, h, w) batches.
    """
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 2:
        x = x[np.newaxis, np.newaxis]
    elif x.ndim == 3:
        x = x[np.newaxis]
    elif x.ndim != 4:
        raise ValueError(f"expected 2-4 dims, got shape {x.shape}")
    return np.ascontiguousarray(x)


def require_finite(x, what="tensor"):
    """Reject NaN/Inf at module boundaries."""
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")
    return x


def stack_segments(segments, dtype=FLOAT32):
    """Stack an iterable of (c, h, w) segments into one (n, c, h, w) batch."""
    batch = np.stack([np.asarray(s, dtype=dtype) for s in segments], axis=0)
    if batch.ndim != 4:
        raise ValueError(f"segments must be 3-D, stacked shape {batch.shape}")
    return np.ascontiguousarray(batch)
