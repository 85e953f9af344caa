"""Evaluation metrics: top-1 accuracy, macro F1 and the cosine margin."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, DimensionError, RangeError


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_class: list[dict]
    cosine_margin: float | None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class_f1": [c["f1"] for c in self.per_class],
            "per_class": self.per_class,
            "cosine_margin": self.cosine_margin,
            "counts": self.counts,
        }


def top1_accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DimensionError(f"{preds.shape} predictions vs {labels.shape} labels")
    if preds.size == 0:
        raise DimensionError("empty prediction list")
    return float(np.count_nonzero(preds == labels)) / preds.size


def per_class_scores(preds, labels, categories: int) -> list[dict]:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DimensionError(f"{preds.shape} predictions vs {labels.shape} labels")
    for name, arr in (("label", labels), ("prediction", preds)):
        if arr.size and (arr.min() < 0 or arr.max() >= categories):
            raise RangeError(f"{name} outside 0..{categories - 1}")
    scores = []
    for c in range(categories):
        tp = int(np.count_nonzero((preds == c) & (labels == c)))
        fp = int(np.count_nonzero((preds == c) & (labels != c)))
        fn = int(np.count_nonzero((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(
            {"category": c, "precision": precision, "recall": recall, "f1": f1,
             "support": tp + fn}
        )
    return scores


def macro_f1(preds, labels, categories: int, skip_absent: bool = False) -> float:
    """Unweighted mean of per-category F1.

    By default every configured category is averaged, so a category absent
    from both labels and predictions pulls the mean down with F1 = 0 (the
    harsh convention); ``skip_absent`` drops such categories instead.
    """
    scores = per_class_scores(preds, labels, categories)
    if skip_absent:
        preds = np.asarray(preds)
        labels = np.asarray(labels)
        scores = [
            s
            for s in scores
            if s["support"] > 0 or np.count_nonzero(preds == s["category"]) > 0
        ]
        if not scores:
            raise DimensionError("no categories present at all")
    return float(np.mean([s["f1"] for s in scores]))


def cosine_margin(features, labels, max_pairs: int = 2000, seed: int = 0) -> float:
    """Mean same-category cosine minus mean cross-category cosine.

    Pairs are enumerated and, when more than ``max_pairs`` exist in a group,
    subsampled without replacement with a seeded generator; otherwise every
    pair is used.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise DimensionError("features must be (N, F) aligned with N labels")
    if len(np.unique(labels)) < 2:
        raise DegenerateBatchError("cosine margin needs at least two categories")
    norms = np.linalg.norm(features, axis=1)
    if norms.min() <= 1e-12:
        raise DegenerateBatchError("cosine margin with a zero feature vector")
    unit = features / norms[:, None]
    sims = unit @ unit.T
    iu, ju = np.triu_indices(len(labels), k=1)
    same = labels[iu] == labels[ju]
    rng = np.random.default_rng(seed)

    def group_mean(mask) -> float:
        vals = sims[iu[mask], ju[mask]]
        if vals.size > max_pairs:
            vals = vals[rng.choice(vals.size, size=max_pairs, replace=False)]
        return float(vals.mean())

    return group_mean(same) - group_mean(~same)


def evaluate(
    preds,
    labels,
    categories: int,
    features=None,
    max_pairs: int = 2000,
    seed: int = 0,
) -> EvalReport:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    per_class = per_class_scores(preds, labels, categories)
    margin = None
    if features is not None:
        margin = cosine_margin(features, labels, max_pairs=max_pairs, seed=seed)
    counts = {
        "total": int(labels.size),
        "correct": int(np.count_nonzero(preds == labels)),
        "per_class_support": [s["support"] for s in per_class],
    }
    return EvalReport(
        accuracy=top1_accuracy(preds, labels),
        macro_f1=float(np.mean([s["f1"] for s in per_class])),
        per_class=per_class,
        cosine_margin=margin,
        counts=counts,
    )
