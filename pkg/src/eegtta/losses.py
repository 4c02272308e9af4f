"""Adaptation objective: entropy, energy score, energy-bounded hinge.

All gradients are with respect to logits and are exact; log-sum-exp terms
are max-shifted so large adapted logits stay finite.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class LossWeights:
    lam_ent: float = 2.0
    lam_eng: float = 0.01
    m_in: float = -15.0
    m_out: float = -7.0
    tau: float = 1.0

    def __post_init__(self):
        if self.lam_ent < 0 or self.lam_eng < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.m_in < self.m_out:
            raise ValueError("m_in must lie below m_out")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def log_softmax(logits):
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def entropy_of(probs):
    """Mean Shannon entropy of explicit rows of class probabilities.

    Rows must already be distributions; 0*log(0) counts as 0.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-5):
        raise ValueError("each row must sum to 1")
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-plogp.sum(axis=1).mean())


def entropy_loss(logits):
    """Mean prediction entropy from logits; returns (value, d/dlogits)."""
    logp = log_softmax(logits)
    p = np.exp(logp)
    per_row = -(p * logp).sum(axis=1)
    n = p.shape[0]
    dlogits = -p * (logp + per_row[:, None]) / n
    return float(per_row.mean()), dlogits


def energy_score(logits, tau=1.0):
    """Per-sample energy -log sum_k exp(f_k / tau^2); scalar in, scalar out."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    arr = np.asarray(logits, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr) / (tau * tau)
    m = arr.max(axis=1)
    e = -(m + np.log(np.exp(arr - m[:, None]).sum(axis=1)))
    return float(e[0]) if single else e


def _energy_with_grad(logits, tau):
    scaled = np.asarray(logits, dtype=np.float64) / (tau * tau)
    m = scaled.max(axis=1, keepdims=True)
    expd = np.exp(scaled - m)
    z = expd.sum(axis=1, keepdims=True)
    e = -(m + np.log(z)).ravel()
    de_dlogits = -(expd / z) / (tau * tau)
    return e, de_dlogits


def _hinge_sq_mean(values):
    # mean of squared hinge; empty batches contribute nothing
    if values.size == 0:
        return 0.0, values
    h = np.maximum(values, 0.0)
    return float((h * h).mean()), 2.0 * h / values.size


def energy_bounded_loss(e_orig, e_aug, m_in, m_out):
    """Squared-hinge margins on energies of original and shifted samples.

    Returns (value, d/de_orig, d/de_aug). The subgradient at the hinge
    point is zero.
    """
    e_orig = np.asarray(e_orig, dtype=np.float64).ravel()
    e_aug = np.asarray(e_aug, dtype=np.float64).ravel()
    lo, dlo = _hinge_sq_mean(e_orig - m_in)
    hi, dhi = _hinge_sq_mean(m_out - e_aug)
    return lo + hi, dlo, -dhi


def total_loss(logits_mem, logits_aug, weights):
    """Weighted entropy + energy objective over a memory batch and its
    augmented counterparts.

    Returns (value, d/dlogits_mem, d/dlogits_aug, parts) where parts holds
    the unweighted entropy and energy terms.
    """
    logits_mem = np.atleast_2d(logits_mem)
    logits_aug = np.atleast_2d(logits_aug)
    l_ent, d_ent = entropy_loss(logits_mem)
    e_mem, de_mem = _energy_with_grad(logits_mem, weights.tau)
    e_aug, de_aug = _energy_with_grad(logits_aug, weights.tau)
    l_eng, dl_mem, dl_aug = energy_bounded_loss(
        e_mem, e_aug, weights.m_in, weights.m_out)
    total = weights.lam_ent * l_ent + weights.lam_eng * l_eng
    g_mem = weights.lam_ent * d_ent + weights.lam_eng * dl_mem[:, None] * de_mem
    g_aug = weights.lam_eng * dl_aug[:, None] * de_aug
    parts = {"entropy": l_ent, "energy": l_eng}
    return total, g_mem, g_aug, parts
