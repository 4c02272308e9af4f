"""Binary streaming metrics with the drowsy class as positive.

All values are percentages. F1 is 0 by convention whenever there are no
positive predictions or no positive labels; AUROC uses the rank method
with midpoint tie correction and falls back to 50 when only one class is
present.
"""

import numpy as np

POSITIVE = 1  # drowsy


def confusion_counts(true_labels, predictions):
    t = np.asarray(true_labels)
    p = np.asarray(predictions)
    tp = int(np.sum((p == POSITIVE) & (t == POSITIVE)))
    fp = int(np.sum((p == POSITIVE) & (t != POSITIVE)))
    fn = int(np.sum((p != POSITIVE) & (t == POSITIVE)))
    tn = int(np.sum((p != POSITIVE) & (t != POSITIVE)))
    return tp, fp, fn, tn


def precision_recall_f1(true_labels, predictions):
    tp, fp, fn, _ = confusion_counts(true_labels, predictions)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall else 0.0)
    return 100.0 * precision, 100.0 * recall, 100.0 * f1


def auroc(true_labels, scores):
    """Rank-based AUROC of the positive-class score, ties at midpoint."""
    t = np.asarray(true_labels)
    s = np.asarray(scores, dtype=np.float64)
    pos = s[t == POSITIVE]
    neg = s[t != POSITIVE]
    if len(pos) == 0 or len(neg) == 0:
        return 50.0
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # midpoint of tied block
        i = j + 1
    rank_sum = ranks[t == POSITIVE].sum()
    u = rank_sum - len(pos) * (len(pos) + 1) / 2.0
    return 100.0 * u / (len(pos) * len(neg))


def compute_metrics(log):
    """{f1, auroc, precision, recall} from a fully labeled prediction log."""
    if not log:
        raise ValueError("empty prediction log")
    if any(e.true_label is None for e in log):
        raise ValueError("every log entry needs a true label")
    t = np.array([e.true_label for e in log])
    p = np.array([e.pred for e in log])
    scores = np.array([e.probs[POSITIVE] for e in log])
    precision, recall, f1 = precision_recall_f1(t, p)
    return {"f1": f1, "auroc": auroc(t, scores), "precision": precision,
            "recall": recall}
