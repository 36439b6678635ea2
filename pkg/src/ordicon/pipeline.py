"""Run configs, the end-to-end pipeline and the loss-comparison grid."""
from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import data as D
from .metrics import embedding_geometry, regression_report
from .model import DCOLModel, ModelConfig, get_state, load_checkpoint, save_checkpoint, set_state
from .train import (DivergenceError, Split, StageConfig, config_hash, encode, load_stage1, save_stage1,
                    train_stage1, train_stage2)

log = logging.getLogger(__name__)

LOSSES = ("rmse", "supcon", "adacon", "scol")
ENCODER_MODES = {"global": (False, True), "local": (True, False), "dual": (True, True)}
TABLE_COLUMNS = ["loss", "gcl", "lcl", "pearson", "accuracy", "f1", "sensitivity", "specificity"]
TABLE_METRICS = TABLE_COLUMNS[3:]

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"path": None, "n": 2000, "distribution": "hologic-like", "seed": 0, "height": 96, "width": 96},
    "split": {"k": 10, "fold": 0, "val_fraction": 0.1},
    "model": ModelConfig().to_dict(),
    "stage1": {"epochs": 30, "batch_size": 16, "lr": 3e-4, "tau": 0.2, "loss": "scol", "augment": True,
               "sampling": "positive_aware", "patience": 10, "stop_patience": 20, "factor": 0.5,
               "min_lr": 1e-6},
    "stage2": {"epochs": 15, "batch_size": 16, "lr": 3e-4, "freeze_encoders": True, "augment": True,
               "patience": 10, "stop_patience": 20, "factor": 0.5, "min_lr": 1e-6},
    "encoders": "dual",
    "full_scale": False,
    "output_dir": None,
}

FULL_SCALE_EPOCHS = (200, 200, 75)


class ConfigError(ValueError):
    pass


class MissingCheckpointError(ConfigError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and k != "model":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path}{k} must be an object")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(cfg: dict | None = None) -> dict:
    """Fill defaults, apply full-scale mode, and check invariants."""
    out = _merge(DEFAULT_CONFIG, cfg or {})
    if out["full_scale"]:
        user = cfg or {}
        e1, e1b, e2 = FULL_SCALE_EPOCHS
        if "epochs" not in user.get("stage1", {}):
            out["stage1"]["epochs"] = e1
        if "epochs" not in user.get("stage2", {}):
            out["stage2"]["epochs"] = e2
        if "model" not in user:
            out["model"] = ModelConfig.full_scale().to_dict()
    if out["encoders"] not in ENCODER_MODES:
        raise ConfigError(f"encoders must be one of {sorted(ENCODER_MODES)}")
    if out["stage1"]["loss"] not in LOSSES:
        raise ConfigError(f"stage1.loss must be one of {LOSSES}")
    try:
        ModelConfig.from_dict(out["model"])
        stage_configs(out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    sp = out["split"]
    if sp["k"] < 2 or not 0 <= sp["fold"] < sp["k"] or not 0 < sp["val_fraction"] < 1:
        raise ConfigError("split needs k >= 2, 0 <= fold < k and 0 < val_fraction < 1")
    return out


def stage_configs(cfg: dict) -> dict[str, StageConfig]:
    s1, s2, seed = cfg["stage1"], cfg["stage2"], int(cfg["seed"])
    common1 = {k: s1[k] for k in ("epochs", "batch_size", "lr", "tau", "augment", "sampling", "patience",
                                  "stop_patience", "factor", "min_lr")}
    common2 = {k: s2[k] for k in ("epochs", "batch_size", "lr", "augment", "patience", "stop_patience",
                                  "factor", "min_lr")}
    return {
        "1l": StageConfig(stage="I-local", loss=s1["loss"], seed=seed + 1, **common1),
        "1g": StageConfig(stage="I-global", loss=s1["loss"], seed=seed + 2, **common1),
        "2": StageConfig(stage="II", loss="rmse", seed=seed + 3, **common2),
    }


def load_data(cfg: dict) -> D.DatasetManifest:
    dc = cfg["data"]
    if dc.get("path"):
        manifest = D.read_manifest(dc["path"])
        manifest.load_images()
        return manifest
    return D.generate_dataset(dc["n"], dc["distribution"], dc["seed"], D.Geometry(dc["height"], dc["width"]))


def make_split(manifest: D.DatasetManifest, cfg: dict) -> Split:
    sp = cfg["split"]
    folds = D.stratified_kfold(manifest.risks, sp["k"], cfg["data"]["seed"], keys=manifest.keys)
    test = folds[sp["fold"]]
    pool = np.setdiff1d(np.arange(len(manifest)), test)
    keys = [manifest.keys[i] for i in pool]
    keep, held = D.stratified_holdout(manifest.risks[pool], sp["val_fraction"], cfg["data"]["seed"] + 1, keys)
    return Split(train=pool[keep], val=pool[held], test=test)


def run_hash(cfg: dict) -> str:
    """Hash of everything that determines results (the output location does not)."""
    return config_hash({k: v for k, v in cfg.items() if k != "output_dir"})


def _stage1_key(cfg: dict, branch: str) -> str:
    sub = {k: cfg[k] for k in ("seed", "data", "split", "model", "stage1")}
    return config_hash({"branch": branch, **sub})


def run_pipeline(cfg: dict, manifest: D.DatasetManifest | None = None, stages: Iterable[str] = ("1l", "1g", "2"),
                 dry_run: bool = False, stage1_cache: dict | None = None) -> dict:
    """Stage I for each encoder in use, then Stage II; returns a JSON-ready report.

    With ``output_dir`` set, checkpoints are written there and Stage-I
    checkpoints whose config hash matches are loaded instead of retrained.
    ``stage1_cache`` (dict) shares Stage-I encoders across calls in-process.
    A Stage-I loss of ``rmse`` runs the baseline: no Stage I and Stage II
    trains randomly initialised encoders end to end for ``stage1.epochs``.
    """
    cfg = resolve_config(cfg)
    stages = list(stages)
    for s in stages:
        if s not in ("1l", "1g", "2"):
            raise ConfigError(f"unknown stage {s!r}")
    manifest = manifest if manifest is not None else load_data(cfg)
    split = make_split(manifest, cfg)
    if dry_run:
        return {"dry_run": True, "config_hash": run_hash(cfg), "n": len(manifest),
                "split": {k: int(len(v)) for k, v in asdict(split).items() if v is not None}}
    t0 = time.perf_counter()
    out_dir = Path(cfg["output_dir"]) if cfg["output_dir"] else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    images = manifest.load_images().astype(np.float32, copy=False)
    totals = manifest.totals
    mcfg = ModelConfig.from_dict(cfg["model"])
    scfg = stage_configs(cfg)
    use_local, use_global = ENCODER_MODES[cfg["encoders"]]
    loss = cfg["stage1"]["loss"]
    report: dict = {"config_hash": run_hash(cfg), "loss": loss, "encoders": cfg["encoders"], "stages": {},
                    "split": {"train": int(split.train.size), "val": int(split.val.size),
                              "test": int(split.test.size)}}
    timing: dict = {}
    encoders: dict[str, object] = {}
    projectors: dict[str, object] = {}
    if loss != "rmse":
        for branch, code, used in (("local", "1l", use_local), ("global", "1g", use_global)):
            if not used:
                continue
            key = _stage1_key(cfg, branch)
            ckpt = out_dir / f"stage1_{branch}.dcol" if out_dir else None
            hit = stage1_cache.get(key) if stage1_cache is not None else None
            if hit is None and ckpt is not None and ckpt.exists():
                enc, proj, meta = load_stage1(ckpt, mcfg)
                if meta.get("config_hash") == key:
                    hit = (enc, proj, meta.get("report"))
            if hit is None:
                if code not in stages:
                    missing = ckpt if ckpt is not None else f"stage1_{branch}.dcol"
                    raise MissingCheckpointError(f"missing Stage-I checkpoint {missing}")
                try:
                    rep, enc, proj = train_stage1(branch, loss, images, totals, split, scfg[code], mcfg)
                except DivergenceError as exc:
                    exc.args = (f"stage I-{branch}: {exc}",)
                    raise
                timing[f"I-{branch}"] = rep.wall_clock
                if ckpt is not None:
                    rep.checkpoint = ckpt.name
                hit = (enc, proj, rep.to_dict())
                if ckpt is not None:
                    save_stage1(ckpt, branch, enc, proj, mcfg, scfg[code], rep)
                    _tag_checkpoint(ckpt, key, rep.to_dict())
                if stage1_cache is not None:
                    stage1_cache[key] = hit
            encoders[branch], projectors[branch] = hit[0], hit[1]
            report["stages"][f"I-{branch}"] = hit[2]
    report["geometry"] = {branch: geometry(enc, projectors[branch], images, totals, split)
                          for branch, enc in encoders.items()}
    if "2" not in stages:
        report["timing"] = timing
        return report
    model = DCOLModel(mcfg, seed=scfg["2"].seed, use_local=use_local, use_global=use_global)
    for branch, enc in encoders.items():
        set_state(model.local if branch == "local" else model.global_, get_state(enc))
    s2 = scfg["2"]
    freeze = bool(cfg["stage2"]["freeze_encoders"])
    if loss == "rmse":
        s2 = StageConfig(**{**asdict(s2), "epochs": cfg["stage1"]["epochs"]})
        freeze = False
    ckpt2 = out_dir / "stage2.dcol" if out_dir else None
    try:
        rep2 = train_stage2(model, images, totals, split, s2, freeze_encoders=freeze, checkpoint_path=ckpt2)
    except DivergenceError as exc:
        exc.args = (f"stage II: {exc}",)
        raise
    timing["II"] = rep2.wall_clock
    report["stages"]["II"] = rep2.to_dict()
    # paths relative to output_dir so reports do not depend on where a run lives
    report["stages"]["II"]["checkpoint"] = ckpt2.name if ckpt2 is not None else None
    for name, idx in (("val", split.val), ("test", split.test)):
        pred = model.predict(images[idx]).astype(np.float64)
        report[name] = regression_report(pred, totals[idx])
    timing["total"] = time.perf_counter() - t0
    report["timing"] = timing
    return report


def geometry(encoder, projector, images, totals, split: Split) -> dict[str, float]:
    """Label-gap vs centroid-distance Spearman of projected embeddings on val and test."""
    out = {}
    for name, idx in (("val", split.val), ("test", split.test)):
        z = projector.forward(encode(encoder, images[idx]), train=False)
        out[name] = embedding_geometry(z, totals[idx]).spearman_rho
    return out


def _tag_checkpoint(path: Path, key: str, report: dict) -> None:
    """Re-save a Stage-I checkpoint with its config hash and report in the metadata."""
    tensors, config, meta = load_checkpoint(path)
    meta = {**meta, "config_hash": key, "report": report}
    save_checkpoint(path, tensors, config, meta)


def strip_timing(report: dict) -> dict:
    out = {k: v for k, v in report.items() if k != "timing"}
    return json.loads(json.dumps(out))


# -- comparison grid -----------------------------------------------------------

def table_metrics(report: dict, split: str = "test") -> dict[str, float]:
    r = report[split]
    m = r["ovr"]["macro"]
    return {"pearson": 100.0 * r["pearson"], "accuracy": m["accuracy"], "f1": m["f1"],
            "sensitivity": m["sensitivity"], "specificity": m["specificity"]}


def _cell_config(base: dict, loss: str, mode: str, fold: int, seed: int) -> dict:
    c = copy.deepcopy(base)
    c["seed"] = seed
    c["split"]["fold"] = fold
    c["stage1"]["loss"] = loss
    c["encoders"] = mode
    c["output_dir"] = None
    return c


def _run_cell(c: dict, manifest, cache=None) -> tuple[dict | None, str | None]:
    try:
        return strip_timing(run_pipeline(c, manifest, stage1_cache=cache)), None
    except (DivergenceError, ValueError) as exc:
        return None, str(exc)


def compare_losses(cfg: dict, losses: Sequence[str] = LOSSES, modes: Sequence[str] = ("global", "local", "dual"),
                   folds: Sequence[int] | None = None, seeds: Sequence[int] | None = None,
                   manifest: D.DatasetManifest | None = None, out_dir=None, split: str = "test",
                   jobs: int = 1, stage1_cache: dict | None = None) -> list[dict]:
    """One row per (loss, encoder mode) with mean and std over folds x seeds.

    Per-cell reports are written to ``out_dir/cells`` and reused on rerun.
    ``jobs > 1`` runs pending cells in worker processes; results do not
    depend on ``jobs``.  ``stage1_cache`` shares Stage-I encoders with other
    in-process runs (serial mode only).
    """
    if len(losses) < 1:
        raise ConfigError("need at least one loss")
    base = resolve_config(cfg)
    manifest = manifest if manifest is not None else load_data(base)
    folds = list(folds) if folds is not None else [base["split"]["fold"]]
    seeds = list(seeds) if seeds is not None else [base["seed"]]
    cell_dir = Path(out_dir) / "cells" if out_dir else None
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)

    cells = {}
    for loss in losses:
        for mode in modes:
            for fold in folds:
                for seed in seeds:
                    c = _cell_config(base, loss, mode, fold, seed)
                    cells[(loss, mode, fold, seed)] = (c, f"{loss}_{mode}_f{fold}_s{seed}_{config_hash(c)}.json")
    results: dict = {}
    pending = []
    for key, (c, name) in cells.items():
        path = cell_dir / name if cell_dir is not None else None
        if path is not None and path.exists():
            results[key] = (json.loads(path.read_text()), None)
        elif key not in pending:
            pending.append(key)
    if jobs > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {k: pool.submit(_run_cell, cells[k][0], manifest) for k in pending}
            for k, fut in futures.items():
                results[k] = fut.result()
    else:
        cache = stage1_cache if stage1_cache is not None else {}
        for k in pending:
            results[k] = _run_cell(cells[k][0], manifest, cache)
    for k in pending:
        rep, err = results[k]
        if err is not None:
            log.error("cell %s/%s fold %d seed %d failed: %s", *k, err)
        elif cell_dir is not None:
            (cell_dir / cells[k][1]).write_text(json.dumps(rep, indent=1, sort_keys=True))

    rows = []
    for loss in losses:
        for mode in modes:
            values: dict[str, list[float]] = {m: [] for m in TABLE_METRICS}
            failed = None
            for fold in folds:
                for seed in seeds:
                    rep, err = results[(loss, mode, fold, seed)]
                    if err is not None:
                        failed = err
                        continue
                    for k, v in table_metrics(rep, split).items():
                        values[k].append(v)
            gcl, lcl = mode in ("global", "dual"), mode in ("local", "dual")
            row = {"loss": loss, "gcl": int(gcl), "lcl": int(lcl), "n": len(values["pearson"])}
            if not values["pearson"]:
                row.update({m: "FAIL" for m in TABLE_METRICS})
                row["error"] = failed
            else:
                for m in TABLE_METRICS:
                    row[m] = float(np.mean(values[m]))
                    row[f"{m}_std"] = float(np.std(values[m]))
                    row[f"{m}_median"] = float(np.median(values[m]))
            rows.append(row)
    return rows


def write_table(rows: list[dict], path) -> None:
    extra = [f"{m}_{s}" for m in TABLE_METRICS for s in ("std", "median")] + ["n"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TABLE_COLUMNS + extra)
        for r in rows:
            cells = []
            for col in TABLE_COLUMNS + extra:
                v = r.get(col, "")
                cells.append(f"{v:.4f}" if isinstance(v, float) else v)
            wr.writerow(cells)
