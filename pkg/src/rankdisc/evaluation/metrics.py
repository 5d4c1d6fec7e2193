"""Model-level metrics; the only place unlabelled ground truth is read."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Dataset, reveal_labels
from ..model import Model, predict_unlabelled
from .assignment import clustering_acc, contingency, hungarian


def cluster_predictions(model: Model, d_u: Dataset) -> np.ndarray:
    """Cluster index per unlabelled sample, from the clean (unaugmented) view."""
    return predict_unlabelled(model.heads["unlabelled"], model.features(d_u.images))


def unlabelled_acc(model: Model, d_u: Dataset, n_new: int) -> float:
    return clustering_acc(cluster_predictions(model, d_u), reveal_labels(d_u), n_new).acc


def classification_acc(model: Model, ds: Dataset, head_kind: str = "labelled") -> float:
    probs = model.heads[head_kind].forward(model.features(ds.images))
    return float((probs.argmax(1) == reveal_labels(ds)).mean())


@dataclass(frozen=True)
class IncrementalReport:
    old_acc: float
    new_acc: float
    all_acc: float
    n_old_samples: int
    n_new_samples: int


def incremental_scores(pred_old, truth_old, pred_new, truth_new, n_old: int, n_new: int) -> IncrementalReport:
    """Score predictions of a head over ``n_old + n_new`` outputs.

    Old-class samples are scored by plain accuracy over all outputs. A
    new-class sample that lands on an old slot is wrong; the rest are
    matched to the ground truth with the best bijection over new slots.
    """
    pred_old, truth_old = np.asarray(pred_old), np.asarray(truth_old)
    pred_new, truth_new = np.asarray(pred_new), np.asarray(truth_new)
    old_correct = int((pred_old == truth_old).sum())
    in_new = pred_new >= n_old
    counts = contingency(pred_new[in_new] - n_old, truth_new[in_new], n_new)
    perm = hungarian(-counts)
    new_matched = int(counts[np.arange(n_new), perm].sum())
    n_o, n_n = len(pred_old), len(pred_new)
    return IncrementalReport(
        old_acc=old_correct / n_o if n_o else 0.0,
        new_acc=new_matched / n_n if n_n else 0.0,
        all_acc=(old_correct + new_matched) / (n_o + n_n) if n_o + n_n else 0.0,
        n_old_samples=n_o,
        n_new_samples=n_n,
    )


def incremental_report(model: Model, test_l: Dataset, test_u: Dataset) -> IncrementalReport:
    head = model.heads.get("incremental")
    if head is None:
        raise RuntimeError("model has no incremental head; run the incremental stage first")
    n_old = model.heads["labelled"].out if "labelled" in model.heads else None
    if n_old is None:
        n_old = int(model.meta["n_old"])
    n_new = head.out - n_old
    pred_old = head.forward(model.features(test_l.images)).argmax(1)
    pred_new = head.forward(model.features(test_u.images)).argmax(1)
    return incremental_scores(pred_old, reveal_labels(test_l), pred_new, reveal_labels(test_u),
                              n_old, n_new)
