"""Supervised source pretraining: Adam on softmax cross-entropy.

Pretraining runs the network in the pretrain phase, so dropout is live and
BN layers normalize with batch statistics while accumulating the running
estimates that later serve as the frozen source statistics.
"""

import numpy as np

from . import layers as L
from .network import SCOPE_ALL
from .optim import ADAM, OptState, optimizer_step
from .tensor import stack_segments


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy; returns (value, d/dlogits)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def records_to_arrays(records, dtype=np.float32):
    """(n, 1, channels, time) batch plus label vector from segment records."""
    x = stack_segments([r.segment[np.newaxis] for r in records], dtype=dtype)
    y = np.array([r.label for r in records], dtype=np.int64)
    if np.any(y < 0):
        raise ValueError("pretraining requires labeled records")
    return x, y


def pretrain(net, x, y, epochs=100, batch_size=32, lr=0.001, seed=0,
             log_every=0):
    """Train in place; returns per-epoch mean loss history."""
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    opt = OptState(kind=ADAM, lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            res = net.forward(x[idx], phase=L.PHASE_PRETRAIN, rng=rng)
            loss, dlogits = cross_entropy(res.logits, y[idx])
            grads = net.backward(res.caches, dlogits, SCOPE_ALL)
            optimizer_step(net, grads, opt)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}/{epochs}  loss {history[-1]:.4f}")
    return history


def evaluate_accuracy(net, x, y, batch_size=64):
    correct = 0
    for start in range(0, x.shape[0], batch_size):
        logits = net.forward(x[start:start + batch_size],
                             phase=L.PHASE_EVAL, keep_cache=False).logits
        correct += int((logits.argmax(axis=1) == y[start:start + batch_size])
                       .sum())
    return correct / x.shape[0]
