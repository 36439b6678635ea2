"""Two-stage training: contrastive encoder pre-training, then fusion regression.

Stage I trains one encoder+projector under a contrastive loss; Stage II
trains the fusion regressor with RMSE on (local, global) pooled features.
Optimisation is plain RMSprop with reduce-on-plateau and early stopping.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from . import losses as L
from .metrics import pearson, regression_report
from .model import (DCOLModel, FusionRegressor, GlobalEncoder, LocalEncoder, ModelConfig, Module,
                    Projector, make_projector, get_state, load_checkpoint, named_params, save_checkpoint, set_state)
from .numerics import make_rng

log = logging.getLogger(__name__)

CONTRASTIVE = ("scol", "supcon", "adacon")
BRANCHES = ("local", "global")


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, report: "TrainReport | None" = None) -> None:
        super().__init__(message)
        self.report = report


# -- optimiser and schedule ---------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 3e-4
    rho: float = 0.9
    eps: float = 1e-7
    v: dict[str, np.ndarray] = field(default_factory=dict)


def rmsprop_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 state: OptimizerState) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """``v <- rho v + (1 - rho) g^2``; ``theta <- theta - lr g / (sqrt(v) + eps)``."""
    new = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {theta.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("divergence detected")
        v = state.v.get(name)
        v = (1 - state.rho) * g * g if v is None else state.rho * v + (1 - state.rho) * g * g
        state.v[name] = v
        new[name] = theta - state.lr * g / (np.sqrt(v) + state.eps)
    return new, state


class RMSprop:
    def __init__(self, modules: Sequence[Module], lr: float = 3e-4, rho: float = 0.9, eps: float = 1e-7):
        self.slots = [(f"{i}.{name}", layer, key) for i, m in enumerate(modules)
                      for name, layer, key in named_params(m)]
        self.state = OptimizerState(lr=lr, rho=rho, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        s = self.state
        for name, layer, key in self.slots:
            g = layer.grads.get(key)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError("divergence detected")
            theta = layer.params[key]
            v = s.v.get(name)
            if v is None:
                v = np.zeros_like(theta)
                s.v[name] = v
            v *= s.rho
            v += (1 - s.rho) * g * g
            theta -= (s.lr * g / (np.sqrt(v) + s.eps)).astype(theta.dtype, copy=False)


@dataclass
class ScheduleState:
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6
    stop_patience: int = 20
    threshold: float = 1e-4
    best: float = float("inf")
    best_epoch: int = 0
    wait_lr: int = 0
    wait_stop: int = 0
    epoch: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 1 or self.stop_patience < 1:
            raise ValueError("patience must be at least 1")

    def step(self, val_loss: float, lr: float) -> tuple[str, float]:
        """Record one epoch; return ``(action, new_lr)``."""
        self.epoch += 1
        if val_loss < self.best - self.threshold:
            self.best, self.best_epoch = val_loss, self.epoch
            self.wait_lr = self.wait_stop = 0
            return "continue", lr
        self.wait_lr += 1
        self.wait_stop += 1
        if self.wait_stop >= self.stop_patience:
            return "stop", lr
        if self.wait_lr >= self.patience:
            self.wait_lr = 0
            new_lr = max(self.min_lr, lr * self.factor)
            if new_lr < lr:
                return "reduce_lr", new_lr
        return "continue", lr

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


def plateau_and_earlystop(history: Sequence[float], schedule: ScheduleState | None = None,
                          lr: float = 3e-4) -> str:
    """Replay a validation-loss history and return the action for its last epoch."""
    if not history:
        raise ValueError("empty history")
    state = replace(schedule) if schedule is not None else ScheduleState()
    action = "continue"
    for v in history:
        action, lr = state.step(float(v), lr)
    return action


# -- configuration and reports ------------------------------------------------

@dataclass
class StageConfig:
    stage: str = "I-local"  # I-local | I-global | II
    epochs: int = 30
    batch_size: int = 16
    loss: str = "scol"
    tau: float = 0.2
    lr: float = 3e-4
    seed: int = 0
    sampling: str = "positive_aware"
    augment: bool = True
    patience: int = 10
    stop_patience: int = 20
    factor: float = 0.5
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.stage not in ("I-local", "I-global", "II"):
            raise ValueError(f"unknown stage {self.stage!r}")

    def schedule(self) -> ScheduleState:
        return ScheduleState(self.patience, self.factor, self.min_lr, self.stop_patience)


@dataclass
class TrainReport:
    stage: str
    loss: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    checkpoint: str | None = None
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e["train_loss"] for e in self.epochs]

    def to_dict(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray | None = None


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- Stage I -------------------------------------------------------------------

def _make_encoder(branch: str, model_cfg: ModelConfig, rng) -> Module:
    if branch == "local":
        return LocalEncoder(model_cfg.encoder, rng)
    if branch == "global":
        return GlobalEncoder(model_cfg.encoder, rng)
    raise ValueError(f"unknown encoder branch {branch!r}")


def _val_batches(labels, batch_size, seed) -> list[np.ndarray]:
    return D.epoch_batches(labels, batch_size, make_rng(seed), mode="positive_aware", min_batch=2)


def _contrastive_eval(encoder, projector, images, labels, batches, kind, tau, table) -> float:
    vals = []
    for b in batches:
        z = projector.forward(encoder.forward(images[b], train=False), train=False)
        vals.append(L.contrastive_loss(kind, z.astype(np.float64), labels[b], tau, table).value)
    return float(np.mean(vals)) if vals else 0.0


def train_stage1(branch: str, loss_kind: str, images: np.ndarray, labels: np.ndarray, split: Split,
                 cfg: StageConfig, model_cfg: ModelConfig = ModelConfig(),
                 augment_params: D.AugmentParams | None = D.AugmentParams(),
                 checkpoint_path=None, dtype=np.float32) -> tuple[TrainReport, Module, Projector]:
    """Train one encoder-projector pair under a contrastive loss on projected embeddings."""
    if loss_kind not in CONTRASTIVE:
        raise ValueError(f"Stage I accepts only contrastive losses {CONTRASTIVE}, got {loss_kind!r}")
    t0 = time.perf_counter()
    rng = make_rng(cfg.seed)
    encoder = _make_encoder(branch, model_cfg, rng).astype(dtype)
    projector = make_projector(model_cfg, rng).astype(dtype)
    opt = RMSprop([encoder, projector], lr=cfg.lr)
    sched = cfg.schedule()
    labels = np.asarray(labels)
    tr_x, tr_y = images[split.train], labels[split.train]
    va_x, va_y = images[split.val], labels[split.val]
    table = L.ecdf(tr_y) if loss_kind == "adacon" else None
    val_batches = _val_batches(va_y, cfg.batch_size, cfg.seed + 10_000)
    report = TrainReport(stage=f"I-{branch}", loss=loss_kind)
    best_state = get_state(encoder), get_state(projector)
    aug = augment_params if cfg.augment else None
    for epoch in range(1, cfg.epochs + 1):
        total, skipped, anchors, steps = 0.0, 0, 0, 0
        for b in D.epoch_batches(tr_y, cfg.batch_size, rng, mode=cfg.sampling):
            xb = D.augment_batch(tr_x[b], aug, rng)
            feats = encoder.forward(xb, train=True)
            z = projector.forward(feats, train=True)
            out = L.contrastive_loss(loss_kind, z.astype(np.float64), tr_y[b], cfg.tau, table)
            if not np.isfinite(out.value):
                raise DivergenceError(f"non-finite Stage-I loss at epoch {epoch}", report)
            encoder.backward(projector.backward(out.grad.astype(dtype)))
            opt.step()
            total += out.value
            skipped += out.skipped
            anchors += out.anchors + out.skipped
            steps += 1
        val_loss = _contrastive_eval(encoder, projector, va_x, va_y, val_batches, loss_kind, cfg.tau, table)
        action, new_lr = sched.step(val_loss, opt.lr)
        report.epochs.append({"epoch": epoch, "train_loss": total / max(steps, 1), "val_loss": val_loss,
                              "lr": opt.lr, "skipped_anchors": skipped,
                              "skipped_rate": skipped / max(anchors, 1)})
        if sched.improved:
            best_state = get_state(encoder), get_state(projector)
            report.best_epoch, report.best_val_loss = epoch, val_loss
        log.info("stage I-%s %s epoch %d train %.4f val %.4f lr %.2e skipped %d", branch, loss_kind,
                 epoch, report.epochs[-1]["train_loss"], val_loss, opt.lr, skipped)
        if action == "stop":
            report.stopped_early = True
            break
        opt.lr = new_lr
    set_state(encoder, best_state[0])
    set_state(projector, best_state[1])
    report.wall_clock = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_stage1(checkpoint_path, branch, encoder, projector, model_cfg, cfg, report)
        report.checkpoint = str(checkpoint_path)
    return report, encoder, projector


def save_stage1(path, branch, encoder, projector, model_cfg, cfg, report) -> None:
    tensors = {f"encoder.{k}": v for k, v in get_state(encoder).items()}
    tensors.update({f"projector.{k}": v for k, v in get_state(projector).items()})
    save_checkpoint(path, tensors, {"model": model_cfg.to_dict(), "stage": asdict(cfg)},
                    {"stage": f"I-{branch}", "branch": branch, "epoch": report.best_epoch,
                     "seed": cfg.seed, "loss": cfg.loss})


def load_stage1(path, model_cfg: ModelConfig | None = None, dtype=np.float32) -> tuple[Module, Projector, dict]:
    tensors, config, meta = load_checkpoint(path)
    model_cfg = model_cfg or ModelConfig.from_dict(config.get("model", {}))
    branch = meta.get("branch")
    rng = make_rng(0)
    encoder = _make_encoder(branch, model_cfg, rng).astype(dtype)
    projector = make_projector(model_cfg, rng).astype(dtype)
    set_state(encoder, tensors, prefix="encoder.")
    set_state(projector, tensors, prefix="projector.")
    return encoder, projector, meta


# -- Stage II ------------------------------------------------------------------

def encode(encoder: Module | None, images: np.ndarray, batch_size: int = 64, dtype=np.float32):
    if encoder is None:
        return None
    out = [encoder.forward(np.asarray(images[i:i + batch_size], dtype=dtype), train=False)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out)


def _predict(model: DCOLModel, images, feats=None) -> np.ndarray:
    if feats is not None:
        fl, fg = feats
        return model.regressor.forward(fl, fg, train=False)
    return model.predict(images)


def train_stage2(model: DCOLModel, images: np.ndarray, totals: np.ndarray, split: Split, cfg: StageConfig,
                 freeze_encoders: bool = True, augment_params: D.AugmentParams | None = D.AugmentParams(),
                 checkpoint_path=None) -> TrainReport:
    """Fit the fusion regressor with RMSE; encoders stay fixed unless ``freeze_encoders`` is False.

    ``model.regressor.in_widths`` decides which encoders feed the regressor.
    With frozen encoders their features are computed once, without augmentation.
    """
    t0 = time.perf_counter()
    rng = make_rng(cfg.seed)
    dtype = model.dtype
    totals = np.asarray(totals, dtype=np.float64)
    tr_y = totals[split.train]
    va_y = totals[split.val]
    encoders = [m for _, m in model.encoders()]
    if cfg.epochs > 0:
        # start predictions at the training mean
        model.regressor.net.layers[-1].params["b"][...] = tr_y.mean()
    modules = [model.regressor] + ([] if freeze_encoders else encoders)
    opt = RMSprop(modules, lr=cfg.lr)
    sched = cfg.schedule()
    use_local, use_global = (w is not None for w in model.regressor.in_widths)
    if freeze_encoders:
        feats_all = (encode(model.local if use_local else None, images),
                     encode(model.global_ if use_global else None, images))
        pick = lambda idx: tuple(None if f is None else f[idx] for f in feats_all)  # noqa: E731
    report = TrainReport(stage="II", loss="rmse")
    best = get_state(model)

    def val_pred():
        return _predict(model, images[split.val], pick(split.val) if freeze_encoders else None)

    def record(epoch, train_loss):
        pv = val_pred().astype(np.float64)
        val_loss = L.rmse_loss(pv, va_y).value
        try:
            r = pearson(pv, va_y)
        except ValueError:
            r = 0.0
        report.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                              "lr": opt.lr, "val_pearson": r})
        return val_loss

    if cfg.epochs == 0:
        record(0, float("nan"))
        report.best_val_loss = report.epochs[0]["val_loss"]
    aug = augment_params if cfg.augment else None
    for epoch in range(1, cfg.epochs + 1):
        total, steps = 0.0, 0
        for b in D.epoch_batches(tr_y, cfg.batch_size, rng, mode="iid", min_batch=2):
            idx = split.train[b]
            if freeze_encoders:
                fl, fg = pick(idx)
            else:
                xb = D.augment_batch(images[idx], aug, rng).astype(dtype, copy=False)
                fl = model.local.forward(xb, train=True) if use_local else None
                fg = model.global_.forward(xb, train=True) if use_global else None
            pred = model.regressor.forward(fl, fg, train=True)
            out = L.rmse_loss(pred.astype(np.float64), totals[idx])
            if not np.isfinite(out.value):
                raise DivergenceError(f"non-finite Stage-II loss at epoch {epoch}", report)
            g_local, g_global = model.regressor.backward(out.grad.astype(dtype))
            if not freeze_encoders:
                if use_local:
                    model.local.backward(g_local)
                if use_global:
                    model.global_.backward(g_global)
            opt.step()
            total += out.value
            steps += 1
        val_loss = record(epoch, total / max(steps, 1))
        action, new_lr = sched.step(val_loss, opt.lr)
        if sched.improved:
            best = get_state(model)
            report.best_epoch, report.best_val_loss = epoch, val_loss
        log.info("stage II epoch %d train %.4f val %.4f pearson %.4f", epoch, report.epochs[-1]["train_loss"],
                 val_loss, report.epochs[-1]["val_pearson"])
        if action == "stop":
            report.stopped_early = True
            break
        opt.lr = new_lr
    set_state(model, best)
    report.wall_clock = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_model(checkpoint_path, model, {"stage": asdict(cfg), "freeze_encoders": freeze_encoders},
                   {"stage": "II", "epoch": report.best_epoch, "seed": cfg.seed})
        report.checkpoint = str(checkpoint_path)
    return report


def save_model(path, model: DCOLModel, config: dict | None = None, metadata: dict | None = None) -> None:
    cfg = {"model": model.cfg.to_dict(), "in_widths": list(model.regressor.in_widths)}
    cfg.update(config or {})
    save_checkpoint(path, get_state(model), cfg, metadata or {})


def load_model(path) -> tuple[DCOLModel, dict, dict]:
    tensors, config, meta = load_checkpoint(path)
    mcfg = ModelConfig.from_dict(config["model"])
    widths = config.get("in_widths", [mcfg.encoder.feature_dim] * 2)
    model = DCOLModel(mcfg, 0, use_local=bool(widths[0]), use_global=bool(widths[1]))
    set_state(model, tensors)
    return model, config, meta
