"""Capacity-bounded segment store with energy/persistence eviction.

The bank never sees the network directly: callers hand in a ``model``
callable mapping a list of items to a (len(items), classes) logit array,
which keeps scoring decoupled from how forwards are batched or cached.
"""

from dataclasses import dataclass, field

import numpy as np

AUG_GAUSSIAN = "gaussian_noise"
AUG_PERMUTATION = "permutation"


def augment(segment, kind, rng, sigma_rel=0.1, n_segments=8):
    """One stochastic copy of a (c, h, w) segment.

    gaussian_noise scales zero-mean noise by sigma_rel times each
    electrode row's own standard deviation; permutation shuffles
    contiguous time chunks.
    """
    segment = np.asarray(segment)
    if kind == AUG_GAUSSIAN:
        row_std = segment.std(axis=-1, keepdims=True)
        noise = rng.standard_normal(segment.shape).astype(segment.dtype)
        return segment + (sigma_rel * row_std).astype(segment.dtype) * noise
    if kind == AUG_PERMUTATION:
        width = segment.shape[-1]
        if n_segments > width:
            raise ValueError(f"cannot split {width} samples into "
                             f"{n_segments} chunks")
        chunks = np.array_split(np.arange(width), n_segments)
        order = rng.permutation(len(chunks))
        idx = np.concatenate([chunks[i] for i in order])
        return segment[..., idx]
    raise ValueError(f"unknown augmentation kind {kind!r}")


def alternating_kinds(count):
    return [AUG_GAUSSIAN if i % 2 == 0 else AUG_PERMUTATION
            for i in range(count)]


@dataclass(eq=False)
class MemoryItem:
    segment: np.ndarray
    insertion_time: int
    cached_logits: np.ndarray | None = None
    logits_fresh: bool = False      # True while cached_logits match the
    stem: np.ndarray | None = None  # current model parameters exactly
    ds: np.ndarray | None = None    # frozen depthwise projection cache

    def persistence(self, t_now):
        a = t_now - self.insertion_time + 1
        assert a >= 1, "persistence must count from 1"
        return a


def removal_score(logits, persistence):
    """log sum_k exp(f_k / A^2): negative energy tempered by persistence."""
    a2 = float(persistence) ** 2
    scaled = np.asarray(logits, dtype=np.float64) / a2
    m = scaled.max()
    return float(m + np.log(np.exp(scaled - m).sum()))


@dataclass(eq=False)
class MemoryBank:
    capacity: int
    rng: np.random.Generator
    sigma_rel: float = 0.1
    n_segments: int = 8
    evict_direction: str = "highest"
    items: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.evict_direction not in ("highest", "lowest"):
            raise ValueError("evict_direction must be 'highest' or 'lowest'")

    def __len__(self):
        return len(self.items)

    def initialize(self, segment):
        """Fill with the first segment plus capacity-1 augmented copies."""
        if self.items:
            raise ValueError("bank already initialized")
        self.items.append(MemoryItem(np.asarray(segment), insertion_time=1))
        for kind in alternating_kinds(self.capacity - 1):
            copy = augment(segment, kind, self.rng,
                           sigma_rel=self.sigma_rel,
                           n_segments=self.n_segments)
            self.items.append(MemoryItem(copy, insertion_time=1))
        return self

    def scores(self, t_now, model):
        """Removal scores of all items under the current model.

        Refreshes every item's cached_logits as a side effect.
        """
        logits = np.asarray(model(self.items))
        if logits.shape[0] != len(self.items):
            raise ValueError("model returned wrong number of logit rows")
        out = np.empty(len(self.items))
        for i, item in enumerate(self.items):
            item.cached_logits = logits[i]
            item.logits_fresh = False
            out[i] = removal_score(logits[i], item.persistence(t_now))
        return out

    def _evict_index(self, scores):
        sign = 1.0 if self.evict_direction == "highest" else -1.0
        return max(range(len(self.items)),
                   key=lambda i: (sign * scores[i],
                                  -self.items[i].insertion_time, -i))

    def insert_and_evict(self, segment, t, model, stem=None, ds=None):
        """Insert the step-t segment, then discard the worst-scoring item.

        Ties break toward the earliest insertion time, then stored order.
        Returns (evicted_item, evicted_score, scores_before_eviction).
        """
        if len(self.items) != self.capacity:
            raise ValueError("insert_and_evict requires a full bank")
        self.items.append(MemoryItem(np.asarray(segment), insertion_time=t,
                                     stem=stem, ds=ds))
        scores = self.scores(t, model)
        idx = self._evict_index(scores)
        evicted = self.items.pop(idx)
        return evicted, float(scores[idx]), scores


def initialize_bank(segment, capacity, rng, **kwargs):
    return MemoryBank(capacity=capacity, rng=rng, **kwargs).initialize(segment)
