"""Ablation harness: lambda sweep, candidate-count sweep, autoencoder baseline.

Each run trains from scratch on the dataset's train split and is scored on
the test split.  Rows are plain dicts so they can go straight to CSV.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import replace

import numpy as np

from .scenegen import load_dataset
from .trainer import TrainConfig, evaluate, init_state, train

log = logging.getLogger(__name__)

LAMBDAS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)
K_MODES = {4: "semi4", 8: "sphere8", 12: "semi12"}
ROW_COLUMNS = ("study", "mode", "candidate_mode", "K", "lam", "seed", "iterations", "final_recon",
               "test_psnr", "test_ssim", "accuracy", "center_error", "center_error_ratio",
               "rotation_deg", "seconds")


def run_one(cfg: TrainConfig, root, study: str = "") -> dict:
    train_ds = load_dataset(root)
    eval_ds = load_dataset(root, with_poses=True)
    t0 = time.perf_counter()
    state = init_state(cfg, focal=train_ds.intrinsics.focal)
    train(state, train_ds)
    rep = evaluate(state.model, eval_ds, "test", cfg.eval_t, state.schedule, seed=cfg.seed)
    pose = rep.pose or {}
    cerr = pose.get("mean_center_error", float("nan"))
    model = state.model
    row = {
        "study": study,
        "mode": cfg.mode,
        "candidate_mode": cfg.candidate_mode if cfg.head_mode == "multi" else "",
        "K": model.candidates.K if model.candidates is not None else 1,
        "lam": cfg.lam,
        "seed": cfg.seed,
        "iterations": state.iteration,
        "final_recon": state.history[-1]["recon_loss"] if state.history else float("nan"),
        "test_psnr": rep.mean_psnr,
        "test_ssim": rep.mean_ssim,
        "accuracy": rep.accuracy if rep.accuracy is not None else float("nan"),
        "center_error": cerr,
        "center_error_ratio": cerr / eval_ds.radius,
        "rotation_deg": pose.get("mean_rotation_deg", float("nan")),
        "seconds": time.perf_counter() - t0,
    }
    log.info("%s: %s", study, row)
    return row


def lambda_sweep(base: TrainConfig, root, lams=LAMBDAS, seeds=(0,), on_row=None) -> list[dict]:
    rows = []
    for lam in lams:
        for s in seeds:
            rows.append(run_one(replace(base, mode="multi", lam=float(lam), seed=s), root, "lambda"))
            if on_row:
                on_row(rows[-1])
    return rows


def k_sweep(base: TrainConfig, root, Ks=(4, 8, 12), seeds=(0, 1, 2), on_row=None) -> list[dict]:
    rows = []
    for K in Ks:
        for s in seeds:
            cfg = replace(base, mode="multi", candidate_mode=K_MODES[K], K=0, seed=s)
            rows.append(run_one(cfg, root, "K"))
            if on_row:
                on_row(rows[-1])
    return rows


def ae_compare(base: TrainConfig, root, seeds=(0,), on_row=None) -> list[dict]:
    """Same multi-pose pipeline fed noisy inputs (diffusion) vs clean inputs (ae)."""
    rows = []
    for mode in ("multi", "ae"):
        for s in seeds:
            rows.append(run_one(replace(base, mode=mode, head="multi", seed=s), root, "ae"))
            if on_row:
                on_row(rows[-1])
    return rows


def write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ROW_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in ROW_COLUMNS})


def _mean(rows, key):
    vals = [r[key] for r in rows if r[key] == r[key]]
    return float(np.mean(vals)) if vals else float("nan")


def directional_summary(rows: list[dict], success_psnr: float = 20.0) -> list[str]:
    """Plain-text directional findings; reported, never asserted."""
    lines = []
    ae = [r for r in rows if r["study"] == "ae"]
    if ae:
        d = _mean([r for r in ae if r["mode"] == "multi"], "test_psnr")
        a = _mean([r for r in ae if r["mode"] == "ae"], "test_psnr")
        verdict = "yes" if a < d else "no"
        lines.append(f"ae worse than diffusion input: {verdict} (ae {a:.2f} dB vs diffusion {d:.2f} dB)")
    ks = [r for r in rows if r["study"] == "K"]
    if ks:
        parts = []
        rate = {}
        for K in sorted({r["K"] for r in ks}):
            sel = [r for r in ks if r["K"] == K]
            rate[K] = np.mean([r["test_psnr"] >= success_psnr for r in sel])
            parts.append(f"K={K}: {rate[K] * len(sel):.0f}/{len(sel)} runs >= {success_psnr:g} dB, "
                         f"mean {_mean(sel, 'test_psnr'):.2f} dB, center err {_mean(sel, 'center_error_ratio'):.3f} r")
        lines.append("; ".join(parts))
        if 4 in rate and 12 in rate:
            m4 = _mean([r for r in ks if r["K"] == 4], "test_psnr")
            m12 = _mean([r for r in ks if r["K"] == 12], "test_psnr")
            better = rate[12] > rate[4] or (rate[12] == rate[4] and m12 > m4)
            lines.append(f"K=12 more reliable than K=4: {'yes' if better else 'no'}")
    lam = [r for r in rows if r["study"] == "lambda"]
    if lam:
        best = max(lam, key=lambda r: r["test_psnr"])
        lines.append("lambda sweep: " + ", ".join(f"{r['lam']:g}->{r['test_psnr']:.2f} dB" for r in lam)
                     + f"; best lambda {best['lam']:g}")
    return lines
