"""Per-class feature centroids: init from the classifier, EMA refresh,
dot-product prediction."""

from dataclasses import dataclass

import numpy as np

from .losses import energy_score, softmax

FILTER_ABOVE = "above"   # keep samples with energy above the threshold
FILTER_BELOW = "below"


@dataclass
class PrototypeSet:
    vectors: np.ndarray          # (classes, feature_dim)
    alpha: float = 0.9
    filter_threshold: float = -7.0
    filter_direction: str = FILTER_ABOVE

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.filter_direction not in (FILTER_ABOVE, FILTER_BELOW):
            raise ValueError("filter_direction must be 'above' or 'below'")
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise ValueError("prototypes must be (classes, feature_dim)")

    @property
    def class_count(self):
        return self.vectors.shape[0]


def init_from_classifier(weight, alpha=0.9, filter_threshold=-7.0,
                         filter_direction=FILTER_ABOVE):
    """Seed each class prototype with its classifier weight row (bias
    ignored)."""
    return PrototypeSet(vectors=np.array(weight, dtype=np.float64, copy=True),
                        alpha=alpha, filter_threshold=filter_threshold,
                        filter_direction=filter_direction)


def update(protos, features, logits, alpha=None):
    """EMA step toward energy-filtered pseudo-labeled feature means.

    Pseudo-labels are the argmax of the supplied logits; a sample counts
    toward class k only if its energy clears the threshold in the
    configured direction. Classes with no qualifying samples keep their
    prototype unchanged.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if features.shape[0] != logits.shape[0]:
        raise ValueError("features and logits must pair up")
    if features.shape[1] != protos.vectors.shape[1]:
        raise ValueError("feature dimension does not match prototypes")
    a = protos.alpha if alpha is None else alpha
    pseudo = logits.argmax(axis=1)
    energies = energy_score(logits, tau=1.0)
    if protos.filter_direction == FILTER_ABOVE:
        keep = energies > protos.filter_threshold
    else:
        keep = energies < protos.filter_threshold
    new_vectors = protos.vectors.copy()
    for k in range(protos.class_count):
        members = keep & (pseudo == k)
        if not members.any():
            continue
        pseudo_proto = features[members].mean(axis=0)
        new_vectors[k] = a * new_vectors[k] + (1.0 - a) * pseudo_proto
    return PrototypeSet(vectors=new_vectors, alpha=protos.alpha,
                        filter_threshold=protos.filter_threshold,
                        filter_direction=protos.filter_direction)


def predict(feature, protos):
    """Class and softmax probabilities from prototype dot products."""
    feature = np.asarray(feature, dtype=np.float64).ravel()
    if feature.shape[0] != protos.vectors.shape[1]:
        raise ValueError("feature dimension does not match prototypes")
    sims = protos.vectors @ feature
    probs = softmax(sims)[0]
    return int(sims.argmax()), probs


def export_csv(protos, path):
    """Flat (class, feature index, value) dump for offline inspection."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("class,feature_index,value\n")
        for k in range(protos.class_count):
            for j, v in enumerate(protos.vectors[k]):
                f.write(f"{k},{j},{float(v)!r}\n")
