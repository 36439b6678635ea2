"""Contrastive and regression losses with analytic gradients.

All contrastive losses share one engine (:func:`_contrastive`).  For anchor
``i`` with positive set ``P(i)`` (same label, excluding ``i``) and denominator
set ``D(i)``::

    l_i = logsumexp_{k in D(i)} (z_i.z_k + r_ik) / tau  -  mean_{p in P(i)} z_i.z_p / tau

``D(i)`` is the set of negatives (``negatives_only``) or every index except
``i`` (``all_non_anchor``; margins of positives are zero there).  Anchors with
empty ``P(i)`` or ``D(i)`` are skipped.  The default reduction sums over
anchors.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np

DenominatorMode = Literal["negatives_only", "all_non_anchor"]
MarginMode = Literal["none", "ordinal", "ecdf"]


@dataclass(frozen=True)
class LabelSpace:
    min_label: int = 0
    max_label: int = 24

    def __post_init__(self):
        if self.C < 2:
            raise ValueError("label space needs at least two labels")

    @property
    def C(self) -> int:
        return self.max_label - self.min_label + 1

    def check(self, labels) -> np.ndarray:
        y = np.asarray(labels)
        if y.size and (y.min() < self.min_label or y.max() > self.max_label):
            raise ValueError(f"label outside [{self.min_label}, {self.max_label}]")
        return y


AAC24 = LabelSpace(0, 24)


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.2
    denominator_mode: DenominatorMode = "negatives_only"
    margin_mode: MarginMode = "ordinal"
    reduction: Literal["sum", "mean"] = "sum"
    normalize: bool = False  # normalise z inside the loss (project() already does)
    space: LabelSpace = AAC24
    margin_scale: float = 2.0  # ECDF margin multiplier

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.denominator_mode not in ("negatives_only", "all_non_anchor"):
            raise ValueError(f"unknown denominator_mode {self.denominator_mode!r}")
        if self.margin_mode not in ("none", "ordinal", "ecdf"):
            raise ValueError(f"unknown margin_mode {self.margin_mode!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


SCOL = ContrastiveConfig()
SUPCON = ContrastiveConfig(denominator_mode="all_non_anchor", margin_mode="none")
ADACON = ContrastiveConfig(margin_mode="ecdf")


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    skipped: int = 0
    anchors: int = 0
    warning: str | None = None
    extra: dict = field(default_factory=dict)


def ordinal_distance(y_a, y_n, space: LabelSpace = AAC24):
    """``|y_a - y_n| * 2 / C``; broadcasts over arrays."""
    space.check(y_a)
    space.check(y_n)
    d = np.abs(np.asarray(y_a, dtype=np.float64) - np.asarray(y_n, dtype=np.float64)) * 2.0 / space.C
    return float(d) if np.ndim(d) == 0 else d


def ecdf(train_labels) -> dict[int, float]:
    """Empirical CDF ``F(y) = #{labels <= y} / total`` at each observed label."""
    labels = np.asarray(list(train_labels), dtype=np.int64)
    if labels.size == 0:
        raise ValueError("ecdf of an empty label list")
    values, counts = np.unique(labels, return_counts=True)
    cum = np.cumsum(counts) / labels.size
    return {int(v): float(c) for v, c in zip(values, cum)}


def ecdf_lookup(table: Mapping[int, float], labels) -> tuple[np.ndarray, bool]:
    """Map labels through ``table``; unseen labels take the nearest observed one."""
    keys = np.array(sorted(table), dtype=np.int64)
    vals = np.array([table[k] for k in keys])
    y = np.asarray(labels, dtype=np.int64)
    pos = np.searchsorted(keys, y)
    exact = (pos < keys.size) & (keys[np.minimum(pos, keys.size - 1)] == y)
    if exact.all():
        return vals[pos], False
    lo = np.clip(pos - 1, 0, keys.size - 1)
    hi = np.clip(pos, 0, keys.size - 1)
    nearest = np.where(np.abs(keys[lo] - y) <= np.abs(keys[hi] - y), lo, hi)
    return vals[nearest], True


def margin_matrix(y, cfg: ContrastiveConfig, ecdf_table=None) -> tuple[np.ndarray, bool]:
    y = np.asarray(y)
    if cfg.margin_mode == "none":
        return np.zeros((y.size, y.size)), False
    if cfg.margin_mode == "ordinal":
        return ordinal_distance(y[:, None], y[None, :], cfg.space), False
    if ecdf_table is None:
        raise ValueError("ecdf margin requires an ecdf table")
    f, missing = ecdf_lookup(ecdf_table, y)
    return np.abs(f[:, None] - f[None, :]) * cfg.margin_scale, missing


def _contrastive(z, y, cfg: ContrastiveConfig, margins: np.ndarray) -> LossOutput:
    z = np.asarray(z)
    y = np.asarray(y)
    n = z.shape[0]
    if n < 2:
        raise ValueError("batch too small")
    if y.shape != (n,):
        raise ValueError("labels must be a vector matching the batch")
    cfg.space.check(y)
    dtype = z.dtype if z.dtype.kind == "f" else np.float64
    z_in = z.astype(dtype, copy=False)
    if cfg.normalize:
        norms = np.sqrt((z_in * z_in).sum(axis=1, keepdims=True))
        if np.any(norms == 0):
            raise ValueError("degenerate embedding")
        z_use = z_in / norms
    else:
        z_use = z_in

    same = y[:, None] == y[None, :]
    eye = np.eye(n, dtype=bool)
    pos = same & ~eye
    if cfg.denominator_mode == "negatives_only":
        den = ~same
    else:
        den = ~eye
    n_pos = pos.sum(axis=1)
    active = (n_pos > 0) & den.any(axis=1)

    sim = (z_use @ z_use.T) / cfg.tau
    logits = np.where(den, sim + margins.astype(dtype) / cfg.tau, -np.inf)
    grad = np.zeros_like(z_use)
    out = LossOutput(0.0, grad, skipped=int(n - active.sum()), anchors=int(active.sum()))
    if not active.any():
        out.warning = "all anchors skipped"
        return out

    la = logits[active]
    m = la.max(axis=1, keepdims=True)
    e = np.exp(la - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    pos_a = pos[active]
    npos_a = n_pos[active].astype(dtype)
    pos_mean = (np.where(pos_a, sim[active], 0.0)).sum(axis=1) / npos_a
    per_anchor = lse - pos_mean
    scale = 1.0 / out.anchors if cfg.reduction == "mean" else 1.0
    out.value = float(per_anchor.sum() * scale)

    # dL/dsim for active anchors; the margin is constant in z
    gsim = np.zeros((n, n), dtype=dtype)
    gsim[active] = e / s - pos_a / npos_a[:, None]
    gsim *= scale / cfg.tau
    gz = (gsim + gsim.T) @ z_use
    if cfg.normalize:
        gz = (gz - z_use * (z_use * gz).sum(axis=1, keepdims=True)) / norms
    out.grad = gz
    return out


def scol_loss(z, y, cfg: ContrastiveConfig = SCOL, ecdf_table=None) -> LossOutput:
    """Supervised contrastive ordinal loss (margin on negative similarities)."""
    margins, missing = margin_matrix(y, cfg, ecdf_table)
    out = _contrastive(z, y, cfg, margins)
    if missing:
        out.warning = "label missing from ecdf table"
    return out


def supcon_loss(z, y, cfg: ContrastiveConfig = SUPCON) -> LossOutput:
    """Standard supervised contrastive loss: all non-anchor denominator, no margin."""
    cfg = ContrastiveConfig(tau=cfg.tau, denominator_mode="all_non_anchor", margin_mode="none",
                            reduction=cfg.reduction, normalize=cfg.normalize, space=cfg.space)
    return _contrastive(z, y, cfg, np.zeros((len(y), len(y))))


def adacon_loss(z, y, ecdf_table: Mapping[int, float], cfg: ContrastiveConfig = ADACON) -> LossOutput:
    """SCOL form with the margin ``|F(y_a) - F(y_n)| * margin_scale``.

    Stand-in for adaptive-margin contrastive regression: F is the ECDF of the
    training labels.
    """
    cfg = ContrastiveConfig(tau=cfg.tau, denominator_mode=cfg.denominator_mode, margin_mode="ecdf",
                            reduction=cfg.reduction, normalize=cfg.normalize, space=cfg.space,
                            margin_scale=cfg.margin_scale)
    out = scol_loss(z, y, cfg, ecdf_table)
    if out.warning == "label missing from ecdf table":
        warnings.warn(out.warning, RuntimeWarning, stacklevel=2)
    return out


def contrastive_loss(kind: str, z, y, tau: float = 0.2, ecdf_table=None,
                     reduction: str = "sum") -> LossOutput:
    """Dispatch by name: ``scol``, ``supcon`` or ``adacon``."""
    if kind == "scol":
        return scol_loss(z, y, ContrastiveConfig(tau=tau, reduction=reduction))
    if kind == "supcon":
        return supcon_loss(z, y, ContrastiveConfig(tau=tau, reduction=reduction))
    if kind == "adacon":
        return adacon_loss(z, y, ecdf_table, ContrastiveConfig(tau=tau, reduction=reduction))
    raise ValueError(f"not a contrastive loss: {kind!r}")


def rmse_loss(pred, target) -> LossOutput:
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype if pred.dtype.kind == "f" else np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("rmse of an empty vector")
    diff = pred - target
    value = float(np.sqrt((diff * diff).sum() / diff.size))
    if value == 0.0:
        return LossOutput(0.0, np.zeros_like(diff))
    return LossOutput(value, diff / (diff.size * value))
