"""Command-line entry point: ``ordicon {gen-data,train,eval,gradcheck,compare}``.

Exit codes: 0 success, 2 usage or config error, 3 I/O error, 4 divergence,
5 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import data as D
from . import gradcheck
from .metrics import regression_report
from .model import CheckpointError
from .pipeline import (LOSSES, ConfigError, MissingCheckpointError, compare_losses, resolve_config, run_pipeline,
                       strip_timing, write_table)
from .train import DivergenceError, load_model

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4, 5

log = logging.getLogger("ordicon")


class UsageError(Exception):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("ordicon").joinpath("schemas", f"{name}.schema.json").read_text())


def validate(doc, schema_name: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"{schema_name} schema: {where}: {exc.message}") from None


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _jobs(args) -> int:
    if args.jobs is not None:
        return args.jobs
    env = os.environ.get("ORDICON_JOBS")
    if env is None:
        return 1
    try:
        j = int(env)
    except ValueError:
        raise UsageError(f"ORDICON_JOBS must be an integer, got {env!r}") from None
    if j < 1:
        raise UsageError("ORDICON_JOBS must be at least 1")
    return j


def _file_log(directory: Path) -> logging.Handler:
    """Timestamps go to ``run.log`` only, never into the JSON/CSV outputs."""
    h = logging.FileHandler(directory / "run.log", mode="a")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("ordicon").addHandler(h)
    logging.getLogger("ordicon").setLevel(logging.INFO)
    return h


def parse_distribution(text: str):
    if text in ("uniform", "hologic-like"):
        return text
    if text.startswith("custom:"):
        parts = text[len("custom:"):].split(",")
        try:
            weights = [float(p) for p in parts]
        except ValueError:
            raise UsageError(f"--dist custom: weights must be {D.MAX_TOTAL + 1} comma-separated numbers") from None
        try:
            D.total_weights(weights)
        except ValueError as exc:
            raise UsageError(f"--dist custom: {exc}") from None
        return weights
    raise UsageError(f"--dist must be uniform, hologic-like or custom:w0,...,w{D.MAX_TOTAL}")


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    dist = parse_distribution(args.dist)
    if args.n < 1:
        raise UsageError("--n must be positive")
    manifest = D.generate_dataset(args.n, dist, args.seed)
    D.write_dataset(manifest, args.out)
    print(json.dumps(D.class_histogram(manifest.risks), sort_keys=True))
    return EXIT_OK


def _run_config(path, args) -> dict:
    cfg = _read_json(path)
    validate(cfg, "run_config")
    if getattr(args, "fold", None) is not None:
        cfg.setdefault("split", {})["fold"] = args.fold
    try:
        return resolve_config(cfg)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    cfg = _run_config(args.config, args)
    out = Path(cfg["output_dir"] or args.out or "run")
    cfg["output_dir"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    stages = ("1l", "1g", "2") if args.stage == "all" else (args.stage,)
    handler = _file_log(out)
    t0 = time.perf_counter()
    try:
        report = run_pipeline(cfg, stages=stages)
    except DivergenceError as exc:
        partial = exc.report.to_dict() if exc.report is not None else None
        _dump(out / "report.json", {"error": str(exc), "partial": partial})
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    finally:
        logging.getLogger("ordicon").removeHandler(handler)
        handler.close()
    timing = dict(report.get("timing", {}), wall_clock=time.perf_counter() - t0)
    _dump(out / "report.json", strip_timing(report))
    _dump(out / "timing.json", timing)
    print(f"wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    manifest = D.read_manifest(args.data)
    images = manifest.load_images().astype(model.dtype)
    pred = np.asarray(model.predict(images), dtype=np.float64)
    totals = manifest.totals.astype(np.float64)
    rep = regression_report(pred, totals)
    metrics = {"n": int(len(totals)), "pearson": rep["pearson"], "rmse": rep["rmse"],
               "three_class_accuracy": rep["three_class_accuracy"],
               "confusion_matrix": rep["confusion_matrix"], "ovr": rep["ovr"]}
    validate(metrics, "metrics")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    true_cls = D.risk_classes(totals)
    pred_cls = D.risk_classes(np.clip(pred, 0, D.MAX_TOTAL))
    with open(out / "predictions.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "true_total", "pred_total", "true_class", "pred_class"])
        for r, t, p, tc, pc in zip(manifest.records, totals, pred, true_cls, pred_cls):
            wr.writerow([r.path, int(t), f"{p:.6f}", D.RiskClass(int(tc)).label, D.RiskClass(int(pc)).label])
    _dump(out / "metrics.json", metrics)
    print(f"pearson {metrics['pearson']:.4f}  macro accuracy {rep['ovr']['macro']['accuracy']:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    results = gradcheck.run(args.component, args.trials, args.seed)
    for comp, worst in sorted(gradcheck.worst_by_component(results).items()):
        print(f"{comp:8s} worst relative error {worst.error:.3e} ({worst.name})")
    failures = [r for r in results if not r.ok]
    for r in failures:
        print(f"FAIL {r.component}/{r.name} shape={list(r.shape)} seed={r.seed} error={r.error:.3e}",
              file=sys.stderr)
    return EXIT_VERIFY if failures else EXIT_OK


def cmd_compare(args) -> int:
    grid = _read_json(args.config)
    validate(grid, "grid")
    validate(grid["base"], "run_config")
    out = Path(grid.get("output_dir") or args.out or "compare")
    out.mkdir(parents=True, exist_ok=True)
    handler = _file_log(out)
    try:
        rows = compare_losses(grid["base"], grid.get("losses", list(LOSSES)),
                              grid.get("modes", ["global", "local", "dual"]), grid.get("folds"),
                              grid.get("seeds"), out_dir=out, split=grid.get("split", "test"), jobs=_jobs(args))
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    finally:
        logging.getLogger("ordicon").removeHandler(handler)
        handler.close()
    write_table(rows, out / "table.csv")
    print(f"wrote {out / 'table.csv'} ({len(rows)} rows)")
    ok = any(r["n"] > 0 for r in rows)
    return EXIT_OK if ok else EXIT_DIVERGED


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ordicon", description="Ordinal contrastive AAC scoring on synthetic scans.")
    p.add_argument("--jobs", type=int, default=None, help="parallel workers (default: $ORDICON_JOBS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--dist", default="hologic-like", help="uniform, hologic-like or custom:w0,...,w24")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run Stage I and/or Stage II from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--stage", choices=["1l", "1g", "2", "all"], default="all")
    t.add_argument("--fold", type=int, default=None)
    t.add_argument("--out", default=None, help="output directory if the config has none")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a Stage-II checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference verification of every backward pass")
    c.add_argument("--component", choices=["losses", "nn", "model", "all"], default="all")
    c.add_argument("--trials", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("compare", help="loss x encoder comparison table")
    m.add_argument("--config", required=True)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is not None and args.jobs < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, MissingCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, D.ParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
