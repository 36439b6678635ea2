"""Regression, risk-class and embedding-geometry metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import RiskClass, risk_classes
from .numerics import make_rng

CLASS_NAMES = [c.label for c in RiskClass]
OVR_FIELDS = ["accuracy", "f1", "sensitivity", "specificity", "npv", "ppv"]

# Per-class "accuracy" is the binary accuracy of the class-vs-rest split.
ACCURACY_NOTE = "per-class accuracy is one-vs-rest binary accuracy; averages are unweighted unless stated"


def pearson(pred, target) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two vectors of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two samples")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        raise ValueError("undefined correlation")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def midranks(x) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x = np.asarray(x)
    y = np.asarray(y)
    if x.size < 3 or x.shape != y.shape:
        raise ValueError("spearman needs two vectors of equal length >= 3")
    return pearson(midranks(x), midranks(y))


def roc_auc(scores, events) -> float:
    """Mann-Whitney AUC with midranks for tied scores."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    if s.shape != e.shape:
        raise ValueError("scores and events must align")
    n_pos = int(e.sum())
    n_neg = e.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined")
    r = midranks(s)
    return float((r[e].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def bootstrap_auc_ci(scores, events, n_resamples: int = 2000, level: float = 0.95,
                     seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for :func:`roc_auc` (resamples lacking a class are redrawn)."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.asarray(events).astype(bool)
    rng = make_rng(seed)
    stats = []
    while len(stats) < n_resamples:
        idx = rng.integers(0, s.size, size=s.size)
        if e[idx].all() or not e[idx].any():
            continue
        stats.append(roc_auc(s[idx], e[idx]))
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [a, 1.0 - a])
    return float(lo), float(hi)


def confusion_matrix(true_classes, pred_classes, k: int = 3) -> np.ndarray:
    t = np.asarray(true_classes, dtype=np.int64)
    p = np.asarray(pred_classes, dtype=np.int64)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


@dataclass
class OvrReport:
    per_class: dict[str, dict[str, float]]
    macro: dict[str, float]
    weighted: dict[str, float]
    counts: dict[str, dict[str, int]]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "macro": self.macro, "weighted": self.weighted,
                "counts": self.counts, "flags": self.flags, "note": ACCURACY_NOTE}


def _ratio(num, den, flags, name):
    if den == 0:
        flags.append(name)
        return 0.0
    return 100.0 * num / den


def ovr_metrics(cm) -> OvrReport:
    """One-vs-rest rates (percent) per class plus unweighted and support-weighted means."""
    cm = np.asarray(cm)
    if cm.shape != (3, 3):
        raise ValueError("confusion matrix must be 3x3")
    if (cm < 0).any():
        raise ValueError("negative counts in confusion matrix")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    per_class, counts, flags = {}, {}, []
    for c, name in enumerate(CLASS_NAMES):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        counts[name] = {"tp": tp, "fp": fp, "tn": tn, "fn": fn}
        sens = _ratio(tp, tp + fn, flags, f"{name}.sensitivity")
        spec = _ratio(tn, tn + fp, flags, f"{name}.specificity")
        ppv = _ratio(tp, tp + fp, flags, f"{name}.ppv")
        npv = _ratio(tn, tn + fn, flags, f"{name}.npv")
        if ppv + sens == 0:
            flags.append(f"{name}.f1")
            f1 = 0.0
        else:
            f1 = 2.0 * ppv * sens / (ppv + sens)
        per_class[name] = {"accuracy": 100.0 * (tp + tn) / total, "f1": f1, "sensitivity": sens,
                           "specificity": spec, "npv": npv, "ppv": ppv}
    support = cm.sum(axis=1) / total
    macro = {m: float(np.mean([per_class[n][m] for n in CLASS_NAMES])) for m in OVR_FIELDS}
    weighted = {m: float(sum(w * per_class[n][m] for w, n in zip(support, CLASS_NAMES))) for m in OVR_FIELDS}
    return OvrReport(per_class, macro, weighted, counts, flags)


def regression_report(pred, target) -> dict:
    """Pearson on raw predictions; classes from predictions clamped to [0, 24]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    cm = confusion_matrix(risk_classes(target), risk_classes(np.clip(pred, 0, 24)))
    rep = ovr_metrics(cm)
    try:
        r = pearson(pred, target)
    except ValueError:
        r = 0.0
    return {"pearson": r, "confusion_matrix": cm.tolist(), "ovr": rep.to_dict(),
            "three_class_accuracy": 100.0 * float(np.trace(cm)) / cm.sum(),
            "rmse": float(np.sqrt(np.mean((pred - target) ** 2)))}


@dataclass
class GeometryReport:
    labels: list[int]
    centroids: np.ndarray
    distances: np.ndarray
    spearman_rho: float


def embedding_geometry(z, labels) -> GeometryReport:
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(labels)
    uniq = np.unique(y)
    if uniq.size < 2:
        raise ValueError("embedding geometry needs at least two distinct labels")
    cents = np.stack([z[y == v].mean(axis=0) for v in uniq])
    diff = cents[:, None, :] - cents[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    iu = np.triu_indices(uniq.size, k=1)
    gaps = np.abs(uniq[:, None] - uniq[None, :])[iu]
    if gaps.size >= 3:
        rho = spearman(gaps, dist[iu])
    else:
        rho = float("nan")
    return GeometryReport([int(v) for v in uniq], cents, dist, rho)
