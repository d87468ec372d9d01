"""Thresholding reconstruction errors and scoring the resulting detector.

Attacks are the positive class. A record is flagged iff its error is
strictly greater than the threshold.
"""
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import MAIN_CLASSES, NORMAL, Taxonomy, UNKNOWN_CLASS
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class Threshold:
    value: float
    p: float

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"threshold must be non-negative, got {self.value}")


def nearest_rank(sorted_values, p):
    """The ceil(p n)-th order statistic (1-based) of an ascending array."""
    n = len(sorted_values)
    # round() absorbs binary noise such as 0.1 * 30 = 3.0000000000000004
    rank = max(1, math.ceil(round(p * n, 9)))
    return sorted_values[min(rank, n) - 1]


def fit_threshold(train_errors, p):
    errors = np.asarray(train_errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("cannot fit a threshold on an empty error set")
    if not 0 < p < 1:
        raise ConfigurationError(f"p must lie in (0, 1), got {p}")
    return Threshold(float(nearest_rank(np.sort(errors), p)), float(p))


def classify(errors, threshold):
    value = threshold.value if isinstance(threshold, Threshold) else float(threshold)
    return np.asarray(errors, dtype=np.float64) > value


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_flags(cls, flags, is_attack):
        flags = np.asarray(flags, dtype=bool)
        is_attack = np.asarray(is_attack, dtype=bool)
        if flags.shape != is_attack.shape:
            raise DimensionError(f"{flags.shape[0]} flags vs {is_attack.shape[0]} labels")
        return cls(
            tp=int(np.sum(flags & is_attack)),
            fp=int(np.sum(flags & ~is_attack)),
            tn=int(np.sum(~flags & ~is_attack)),
            fn=int(np.sum(~flags & is_attack)),
        )


def metrics_from_counts(c):
    """Acc/precision/TPR/FPR/F1 with defined values on empty denominators.

    Precision with no predicted positives is 1.0 and flagged; TPR and FPR of
    an absent class are 0.0 and flagged; F1 is 0 whenever precision + TPR is 0
    or precision is undefined.
    """
    flags = {}
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision = 1.0
        flags["precision_undefined"] = True
    if c.tp + c.fn:
        tpr = c.tp / (c.tp + c.fn)
    else:
        tpr = 0.0
        flags["tpr_undefined"] = True
    if c.fp + c.tn:
        fpr = c.fp / (c.fp + c.tn)
    else:
        fpr = 0.0
        flags["fpr_undefined"] = True
    if "precision_undefined" in flags or precision + tpr == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * tpr / (precision + tpr)
    acc = (c.tp + c.tn) / c.total if c.total else 0.0
    out = {"acc": acc, "precision": precision, "tpr": tpr, "fpr": fpr, "f1": f1,
           "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}
    out.update(flags)
    return out


def score(flags, is_attack):
    counts = ConfusionCounts.from_flags(flags, is_attack)
    return metrics_from_counts(counts), counts


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float


def _roc_from_thresholds(errors, is_attack, thresholds):
    # thresholds descending; +inf flags nothing, -inf flags everything
    n_pos = int(np.sum(is_attack))
    n_neg = len(is_attack) - n_pos
    pos = np.sort(errors[is_attack])
    neg = np.sort(errors[~is_attack])
    # count of errors strictly above each threshold
    tp = n_pos - np.searchsorted(pos, thresholds, side="right")
    fp = n_neg - np.searchsorted(neg, thresholds, side="right")
    tpr = tp / n_pos
    fpr = fp / n_neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(fpr, tpr, thresholds, auc)


def roc(errors, is_attack, n_points=None):
    """ROC curve swept over thresholds with trapezoid-rule AUC.

    With ``n_points=None`` every distinct error value is a threshold, which
    makes the AUC equal to the Mann-Whitney statistic (ties count 1/2).
    Otherwise thresholds are the nearest-rank quantiles at ``n_points``
    evenly spaced fractions of the error distribution.
    """
    errors = np.asarray(errors, dtype=np.float64)
    is_attack = np.asarray(is_attack, dtype=bool)
    if errors.shape != is_attack.shape:
        raise DimensionError(f"{errors.shape[0]} errors vs {is_attack.shape[0]} labels")
    if is_attack.all() or not is_attack.any():
        raise ValueError("ROC needs both attack and normal records")
    if n_points is None:
        inner = np.unique(errors)
    else:
        if n_points < 2:
            raise ConfigurationError("n_points must be >= 2")
        srt = np.sort(errors)
        inner = np.unique([nearest_rank(srt, q) for q in np.linspace(0, 1, n_points)])
    thresholds = np.concatenate(([np.inf], inner[::-1], [-np.inf]))
    return _roc_from_thresholds(errors, is_attack, thresholds)


def mann_whitney_auc(errors, is_attack):
    """P(attack error > normal error) + P(tie)/2, by rank sums."""
    from scipy.stats import rankdata

    errors = np.asarray(errors, dtype=np.float64)
    is_attack = np.asarray(is_attack, dtype=bool)
    n_pos = int(is_attack.sum())
    n_neg = len(errors) - n_pos
    ranks = rankdata(errors)
    u = ranks[is_attack].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def per_class_eval(errors, main_class, subclass, threshold, taxonomy=None):
    """Detection rate per attack class and per known/new sub-class group.

    Each row restricts the attacks to one group and keeps all normals, so
    FPR is shared across rows. Groups without records are omitted.
    """
    taxonomy = Taxonomy.load() if taxonomy is None else taxonomy
    errors = np.asarray(errors, dtype=np.float64)
    main_class = np.asarray(main_class)
    subclass = np.asarray(subclass)
    flags = classify(errors, threshold)
    normal = main_class == NORMAL
    n_norm = int(normal.sum())
    fpr = float(flags[normal].sum() / n_norm) if n_norm else 0.0
    is_new = np.array([taxonomy.is_new(s) for s in subclass], dtype=bool)
    unknown = sorted(set(subclass[main_class == UNKNOWN_CLASS].tolist()))
    if unknown:
        warnings.warn(f"sub-classes missing from the taxonomy: {unknown}")
    rows = []
    for cls in MAIN_CLASSES + (UNKNOWN_CLASS,):
        in_cls = main_class == cls
        for group, mask in (("all", in_cls), ("known", in_cls & ~is_new), ("new", in_cls & is_new)):
            n = int(mask.sum())
            if n == 0 or (cls == UNKNOWN_CLASS and group != "all"):
                continue
            detected = int(flags[mask].sum())
            rows.append({"class": cls, "group": group, "attacks": n, "detected": detected,
                         "tpr": detected / n, "fpr": fpr})
    new_all = is_new & ~normal
    if new_all.any():
        n = int(new_all.sum())
        detected = int(flags[new_all].sum())
        rows.append({"class": "all", "group": "new", "attacks": n, "detected": detected,
                     "tpr": detected / n, "fpr": fpr})
    return rows


CLASS_FILTERS = ("all",) + MAIN_CLASSES + ("new-only",)


def filter_for_roc(main_class, subclass, which, taxonomy=None):
    """Mask keeping all normals plus the attacks selected by ``which``."""
    main_class = np.asarray(main_class)
    normal = main_class == NORMAL
    if which == "all":
        return np.ones(len(main_class), dtype=bool)
    if which == "new-only":
        taxonomy = Taxonomy.load() if taxonomy is None else taxonomy
        new = np.array([taxonomy.is_new(s) for s in subclass], dtype=bool)
        return normal | (new & ~normal)
    if which in MAIN_CLASSES:
        return normal | (main_class == which)
    raise ConfigurationError(f"unknown class filter {which!r}; expected one of {CLASS_FILTERS}")
