"""Acceptance gate: one PASS/FAIL line per criterion, printed in the terminal summary.

The end-to-end criteria (4, 5, 6) share trained encoders through a module
fixture: 5 seeds of dual-encoder SCOL, 5 seeds of the end-to-end RMSE
baseline and 3 seeds of Stage-I SupCon on the global branch.  Expect well
over an hour on a single core.
"""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ordicon import cli
from ordicon import data as D
from ordicon import gradcheck
from ordicon import losses as L
from ordicon import metrics as M
from ordicon import pipeline as P
from ordicon.model import load_checkpoint, save_checkpoint, set_state
from ordicon.numerics import make_rng
from ordicon.train import load_model, save_model

from oracles import auc_pairs, ovr_recount, scol_reference

# thresholds, pinned
GRAD_TOL = 1e-4
GRAD_BUDGET_S = 300.0
EQUIV_TOL = 1e-12
REFERENCE_TOL = 1e-10
PEARSON_MIN = 0.85
MACRO_ACC_MIN = 80.0
RUN_BUDGET_S = 3600.0
RHO_MIN = 0.8
AUC_TOL = 1e-12
PIXEL_TOL = 1 / 255

SEEDS_E2E = (0, 1, 2)
SEEDS_ABLATION = (0, 1, 2, 3, 4)


def record(n: int, ok: bool, text: str) -> None:
    ACCEPTANCE_LINES[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}"


def random_batch(rng, n_range=(2, 16), d_range=(2, 16)):
    n = int(rng.integers(*n_range, endpoint=True))
    d = int(rng.integers(*d_range, endpoint=True))
    pool = rng.choice(25, size=max(1, n // 2), replace=False)
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True), rng.choice(pool, size=n)


# -- 1. gradient verification ---------------------------------------------------

def test_c1_gradient_verification():
    t0 = time.perf_counter()
    results = gradcheck.run("all", trials=100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = gradcheck.worst_by_component(results)
    names = {r.name for r in results}
    ok = all(r.error < GRAD_TOL for r in results) and elapsed < GRAD_BUDGET_S
    detail = ", ".join(f"{c} {w.error:.1e}" for c, w in sorted(worst.items()))
    record(1, ok, f"worst rel. error {detail} (< {GRAD_TOL:g}); {len(names)} check kinds; "
                  f"{elapsed:.0f}s (< {GRAD_BUDGET_S:.0f}s)")
    required = {"dense", "conv2d", "conv2d_cnhw", "batchnorm_train", "batchnorm_infer", "relu", "sigmoid",
                "avgpool2d", "global_avg_pool", "box_smooth", "l2_normalize", "attention_block", "local_encoder",
                "global_encoder", "projector", "fusion_regressor", "scol", "supcon", "adacon", "rmse"}
    assert required <= names
    assert ok


# -- 2. loss equivalence ------------------------------------------------------------

def test_c2_loss_equivalence():
    rng = make_rng(2)
    cfg = L.ContrastiveConfig(margin_mode="none", denominator_mode="all_non_anchor")
    worst_eq = worst_ref = 0.0
    for _ in range(500):
        z, y = random_batch(rng)
        worst_eq = max(worst_eq, abs(L.scol_loss(z, y, cfg).value - L.supcon_loss(z, y).value))
    for _ in range(500):
        z, y = random_batch(rng, d_range=(2, 8))
        worst_ref = max(worst_ref, abs(L.scol_loss(z, y).value - scol_reference(z.tolist(), y.tolist())))
    ok = worst_eq <= EQUIV_TOL and worst_ref <= REFERENCE_TOL
    record(2, ok, f"SCOL(no margin, all non-anchor) vs SupCon max diff {worst_eq:.1e} (<= {EQUIV_TOL:g}); "
                  f"SCOL vs loop reference max diff {worst_ref:.1e} (<= {REFERENCE_TOL:g}); 500 batches each")
    assert ok


# -- 3. ordinal margin properties ------------------------------------------------

def test_c3_margin_properties():
    y = np.arange(25)
    d = L.ordinal_distance(y[:, None], y[None, :])
    checks = violations = 0
    for a in range(25):
        for b in range(25):
            for c in range(25):
                checks += 1
                gap_ab, gap_ac = abs(a - b), abs(a - c)
                if gap_ab < gap_ac and not d[a, b] < d[a, c]:
                    violations += 1
                if gap_ab == gap_ac and d[a, b] != d[a, c]:
                    violations += 1
    rng = make_rng(3)
    bumps = increased = 0
    while bumps < 100:
        z, y_b = random_batch(rng, n_range=(3, 12))
        anchors = [i for i in range(len(y_b)) if (y_b == y_b[i]).sum() > 1 and (y_b != y_b[i]).any()]
        if not anchors:
            continue
        margins, _ = L.margin_matrix(y_b, L.SCOL)
        base = L._contrastive(z, y_b, L.SCOL, margins).value
        a = int(rng.choice(anchors))
        n = int(rng.choice(np.flatnonzero(y_b != y_b[a])))
        bumped = margins.copy()
        bumped[a, n] += 0.1
        increased += L._contrastive(z, y_b, L.SCOL, bumped).value > base
        bumps += 1
    ok = violations == 0 and checks == 25 ** 3 and increased == 100
    record(3, ok, f"monotonicity violations {violations}/{checks} triples; "
                  f"+0.1 margin raised the loss in {increased}/100 batches")
    assert ok


# -- shared end-to-end runs -------------------------------------------------------

@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    base = P.resolve_config({})
    manifest = P.load_data(base)
    cache: dict = {}
    scol = {}
    for seed in SEEDS_E2E:
        scol[seed] = P.run_pipeline({"seed": seed}, manifest, stage1_cache=cache)
    out = tmp_path_factory.mktemp("ablation")
    rows = P.compare_losses({}, ["scol"], ["global", "local", "dual"], seeds=SEEDS_ABLATION,
                            manifest=manifest, out_dir=out, stage1_cache=cache)
    rows += P.compare_losses({}, ["rmse"], ["dual"], seeds=SEEDS_ABLATION, manifest=manifest, out_dir=out,
                             stage1_cache=cache)
    P.write_table(rows, out / "table.csv")
    supcon = {}
    for seed in SEEDS_E2E:
        supcon[seed] = P.run_pipeline({"seed": seed, "stage1": {"loss": "supcon"}, "encoders": "global"},
                                      manifest, stages=("1g",), stage1_cache=cache)
    return {"manifest": manifest, "cache": cache, "scol": scol, "rows": rows, "table": out / "table.csv",
            "supcon": supcon}


# -- 4. synthetic end-to-end --------------------------------------------------------

def test_c4_end_to_end(e2e):
    reps = [e2e["scol"][s] for s in SEEDS_E2E]
    pearson = float(np.median([r["val"]["pearson"] for r in reps]))
    macro = float(np.median([r["val"]["ovr"]["macro"]["accuracy"] for r in reps]))
    times = [r["timing"]["total"] for r in reps]
    test_p = float(np.median([r["test"]["pearson"] for r in reps]))
    ok = pearson >= PEARSON_MIN and macro >= MACRO_ACC_MIN and max(times) <= RUN_BUDGET_S
    record(4, ok, f"dual SCOL median val Pearson {pearson:.4f} (>= {PEARSON_MIN}), median val macro OvR accuracy "
                  f"{macro:.2f}% (>= {MACRO_ACC_MIN:g}%), slowest run {max(times) / 60:.1f} min "
                  f"(<= {RUN_BUDGET_S / 60:.0f}); test Pearson {test_p:.4f}")
    assert ok


# -- 5. directional ablation ----------------------------------------------------------

def test_c5_directional_ablation(e2e):
    rows = {(r["loss"], r["gcl"], r["lcl"]): r for r in e2e["rows"]}
    dual = rows[("scol", 1, 1)]["pearson_median"]
    rmse = rows[("rmse", 1, 1)]["pearson_median"]
    single = max(rows[("scol", 1, 0)]["pearson_median"], rows[("scol", 0, 1)]["pearson_median"])
    table = e2e["table"].read_text().splitlines()
    ok = dual >= rmse and dual >= single and len(table) == 1 + 4
    record(5, ok, f"median test Pearson x100 over 5 seeds: dual SCOL {dual:.2f} vs dual RMSE baseline {rmse:.2f}; "
                  f"vs best single-encoder SCOL {single:.2f}; table {e2e['table'].name} with {len(table) - 1} rows")
    assert ok


# -- 6. embedding geometry ----------------------------------------------------------------

def test_c6_embedding_geometry(e2e):
    scol = [e2e["scol"][s]["geometry"]["global"]["test"] for s in SEEDS_E2E]
    supcon = [e2e["supcon"][s]["geometry"]["global"]["test"] for s in SEEDS_E2E]
    local = [e2e["scol"][s]["geometry"]["local"]["test"] for s in SEEDS_E2E]
    m_scol, m_sup = float(np.median(scol)), float(np.median(supcon))
    ok = m_scol >= RHO_MIN and m_scol >= m_sup
    record(6, ok, f"global-branch projected-embedding Spearman rho, median of 3 seeds on the test fold: SCOL "
                  f"{m_scol:.3f} (>= {RHO_MIN}) vs SupCon {m_sup:.3f} (local-branch SCOL {np.median(local):.3f}); "
                  f"per seed SCOL {np.round(scol, 3).tolist()} SupCon {np.round(supcon, 3).tolist()}")
    assert ok


def test_attention_prefers_wall_band(e2e):
    """Diagnostic: the trained local encoder's f_s is higher over the wall band."""
    manifest = e2e["manifest"]
    cfg = P.resolve_config({"seed": 0})
    enc = e2e["cache"][P._stage1_key(cfg, "local")][0]
    calcified = np.flatnonzero(manifest.totals >= 12)[:64]
    enc.forward(manifest.images[calcified].astype(np.float32), train=False)
    f_s = enc.last_map[:, 0]
    geom = D.Geometry()
    scale = geom.height // f_s.shape[1]
    c0, c1 = geom.wall_cols[0] // scale, (geom.wall_cols[1] + 2 - 1) // scale + 1
    r0, r1 = geom.top // scale, (geom.top + 4 * geom.segment_height) // scale
    band = np.zeros(f_s.shape[1:], dtype=bool)
    band[r0:r1, c0:c1] = True
    inside, outside = float(f_s[:, band].mean()), float(f_s[:, ~band].mean())
    ACCEPTANCE_LINES[9] = (f"[{'PASS' if inside > outside else 'FAIL'}] diagnostic: mean f_s over the wall band "
                           f"{inside:.3f} vs elsewhere {outside:.3f}")
    assert inside > outside


# -- 7. metrics oracle ------------------------------------------------------------------------

def test_c7_metrics_oracle():
    rng = make_rng(7)
    names = ("Low", "Moderate", "High")
    cm_bad = 0
    for _ in range(1000):
        cm = rng.integers(0, 10, size=(3, 3))
        cm[0, 0] += 1
        true = np.repeat(np.repeat(np.arange(3), 3), cm.reshape(-1))
        pred = np.repeat(np.tile(np.arange(3), 3), cm.reshape(-1))
        rep = M.ovr_metrics(M.confusion_matrix(true, pred))
        oracle = ovr_recount(true.tolist(), pred.tolist())
        for c, name in enumerate(names):
            tp, fp, tn, fn = oracle[c]
            if rep.counts[name] != {"tp": tp, "fp": fp, "tn": tn, "fn": fn}:
                cm_bad += 1
            sens = 0.0 if tp + fn == 0 else 100.0 * tp / (tp + fn)
            spec = 0.0 if tn + fp == 0 else 100.0 * tn / (tn + fp)
            if abs(rep.per_class[name]["sensitivity"] - sens) > 1e-10 or \
                    abs(rep.per_class[name]["specificity"] - spec) > 1e-10:
                cm_bad += 1
    auc_worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 13))
        events = rng.integers(0, 2, size=n)
        events[:2] = [0, 1]
        scores = rng.integers(0, 6, size=n).astype(float)
        auc_worst = max(auc_worst, abs(M.roc_auc(scores, events) - auc_pairs(scores, events)))
    table = [(0, "Low"), (1.9, "Low"), (2, "Moderate"), (5, "Moderate"), (5.01, "High"), (24, "High")]
    boundary_bad = sum(D.risk_class(t).label != c for t, c in table)
    ok = cm_bad == 0 and auc_worst <= AUC_TOL and boundary_bad == 0
    record(7, ok, f"OvR recount mismatches {cm_bad} over 1000 matrices; AUC vs pair counting max diff "
                  f"{auc_worst:.1e} (<= {AUC_TOL:g}) over 1000 inputs; risk boundary errors {boundary_bad}/6")
    assert ok


# -- 8. determinism and persistence ----------------------------------------------------------

def test_c8_determinism_and_persistence(tmp_path):
    base = {"seed": 11, "data": {"n": 150, "seed": 4}, "stage1": {"epochs": 1}, "stage2": {"epochs": 1}}
    data_dir = tmp_path / "data"
    assert cli.main(["gen-data", "--n", "40", "--seed", "8", "--out", str(data_dir)]) == 0
    outputs = {}
    for run in ("a", "b"):
        cfg = dict(base, output_dir=str(tmp_path / run / "train"))
        (tmp_path / f"{run}.json").write_text(json.dumps(cfg))
        assert cli.main(["train", "--config", str(tmp_path / f"{run}.json")]) == 0
        assert cli.main(["eval", "--checkpoint", str(tmp_path / run / "train" / "stage2.dcol"),
                         "--data", str(data_dir), "--out", str(tmp_path / run / "eval")]) == 0
        grid = {"base": base, "losses": ["scol", "rmse"], "modes": ["dual"],
                "output_dir": str(tmp_path / run / "cmp")}
        (tmp_path / f"{run}_grid.json").write_text(json.dumps(grid))
        assert cli.main(["compare", "--config", str(tmp_path / f"{run}_grid.json")]) == 0
        outputs[run] = ((tmp_path / run / "eval" / "metrics.json").read_bytes(),
                        (tmp_path / run / "cmp" / "table.csv").read_bytes(),
                        (tmp_path / run / "train" / "report.json").read_bytes())
    same_outputs = outputs["a"] == outputs["b"]

    model, _, _ = load_model(tmp_path / "a" / "train" / "stage2.dcol")
    x = D.generate_dataset(8, seed=1).images.astype(np.float32)
    before = model.predict(x)
    save_model(tmp_path / "copy.dcol", model)
    again, _, _ = load_model(tmp_path / "copy.dcol")
    bit_identical = before.dtype == np.float32 and np.array_equal(again.predict(x), before)

    m = D.generate_dataset(1000, seed=13)
    D.write_dataset(m, tmp_path / "rt")
    back = D.read_manifest(tmp_path / "rt")
    labels_equal = ([r.segments for r in back.records] == [r.segments for r in m.records]
                    and np.array_equal(back.totals, m.totals) and np.array_equal(back.risks, m.risks))
    pixel_err = float(np.max(np.abs(back.load_images() - m.images)))
    ok = same_outputs and bit_identical and labels_equal and pixel_err <= PIXEL_TOL + 1e-12
    record(8, ok, f"rerun metrics.json/table.csv/report.json byte-identical: {same_outputs}; checkpoint "
                  f"round trip bit-identical at float32: {bit_identical}; PGM/CSV labels exact: {labels_equal}, "
                  f"max pixel error {pixel_err * 255:.3f}/255")
    assert ok
