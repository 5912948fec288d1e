"""Workflow commands behind the CLI verbs.

Each command takes a :class:`RunConfig`, a dataset manifest and an output
directory, writes its artifacts atomically and returns a small summary dict.
Tile-level work fans out over a process pool when ``config.workers > 1``;
results are gathered in manifest order so reports do not depend on timing.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..develop import develop_fmm, develop_vertical, mack_rate
from ..errors import DataError
from ..evalkit import (BaselineFit, epe_stats, fit_threshold_baseline, fixed_threshold_predict,
                       pixel_difference, variable_threshold_predict, VarThresholdParams)
from ..exposure import solve_exposure_closed_form, solve_exposure_general
from ..gradcal import ResistParams, calibrate, forward_depth
from ..grids import BinaryImage, Field2D, Field3D, binarize, resample_bilinear, resample_nearest
from .config import RunConfig, params_to_dict, save_params
from .io import atomic_write_text, load_aerial, load_wafer, save_field, save_wafer, write_json
from .synth import DatasetManifest, TileEntry, load_fine_wafer, load_records

log = logging.getLogger(__name__)


def simulate_depth(aerial: Field2D, params: ResistParams, solver: str = "vertical",
                   exposure_steps: int = 64) -> tuple[Field2D, Field3D | None]:
    """Normalized developed depth at the aerial's own pitch.

    Returns the arrival-time volume as well when the fast-marching solver ran.
    """
    if solver == "vertical" and params.exposure.A == 0.0:
        return forward_depth(aerial, params), None
    if params.exposure.A == 0.0:
        M = solve_exposure_closed_form(aerial, params.exposure)
    else:
        M = solve_exposure_general(aerial, params.exposure, nt=exposure_steps)
    rate = mack_rate(M, params.mack)
    if solver == "vertical":
        return develop_vertical(rate, params.mack.t_dev), None
    if solver == "fmm":
        arrival, depth = develop_fmm(rate, params.mack.t_dev)
        return depth, arrival
    raise DataError(f"unknown solver {solver!r}")


def predict_pattern(aerial: Field2D, params: ResistParams, solver: str = "vertical",
                    resolution_nm: float | None = None,
                    exposure_steps: int = 64) -> tuple[Field2D, BinaryImage]:
    """Simulate at the input pitch, upsample depth bilinearly, then threshold."""
    depth, _ = simulate_depth(aerial, params, solver, exposure_steps)
    if resolution_nm is not None and resolution_nm != aerial.pitch_nm:
        depth = resample_bilinear(depth, resolution_nm)
    return depth, binarize(depth, params.tau)


def _pool_map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
    atomic_write_text(path, buf.getvalue())


def _tile_shape(man: DatasetManifest) -> tuple[int, int]:
    return (man.tile_px, man.tile_px)


# ---------------------------------------------------------------- simulate

def _simulate_one(job) -> str:
    cfg, params, man, tile, out = job
    aerial = load_aerial(Path(man.root) / tile.aerial, expected_shape=_tile_shape(man))
    depth, arrival = simulate_depth(aerial, params, cfg.solver, cfg.exposure_steps)
    if cfg.resolution_nm != aerial.pitch_nm:
        depth = resample_bilinear(depth, cfg.resolution_nm)
    save_field(out / "depth" / f"{tile.tile_id}.f32", depth)
    save_wafer(out / "result" / f"{tile.tile_id}.png", binarize(depth, params.tau))
    if arrival is not None and cfg.save_arrival:
        save_field(out / "arrival" / f"{tile.tile_id}.f32", arrival)
    return tile.tile_id


def cmd_simulate(cfg: RunConfig, man: DatasetManifest, params: ResistParams, out: Path,
                 splits: Sequence[str] = ("calibration", "test")) -> dict:
    out = Path(out)
    tiles = [t for t in man.tiles if t.split in splits]
    done = _pool_map(_simulate_one, [(cfg, params, man, t, out) for t in tiles], cfg.workers)
    summary = {"tiles": len(done), "solver": cfg.solver, "resolution_nm": cfg.resolution_nm}
    write_json(out / "simulate.json", summary)
    return summary


# --------------------------------------------------------------- calibrate

def cmd_calibrate(cfg: RunConfig, man: DatasetManifest, out: Path) -> dict:
    out = Path(out)
    records = load_records(man, ("calibration",))
    t0 = time.perf_counter()
    result = calibrate(records, cfg.params, cfg.schedule, seed=cfg.seed)
    elapsed = time.perf_counter() - t0
    provenance = {
        "seed": cfg.seed,
        "dataset_hash": man.digest(),
        "dataset_seed": man.seed,
        "epochs": cfg.schedule.epochs,
        "best_epoch": result.best_epoch,
        "best_loss": result.best_loss,
        "tau_before_polish": result.tau_adam,
        "calibration_tiles": len(records),
        "initial_params": params_to_dict(cfg.params),
    }
    save_params(out / "params.json", result.params, provenance)
    _write_csv(out / "loss_trace.csv", ("epoch", "batch", "loss", "lr"),
               ((r.epoch, r.batch, r.loss, r.lr) for r in result.trace))
    log.info("calibration finished in %.1f s, best epoch %d", elapsed, result.best_epoch)
    return {"params": params_to_dict(result.params), "best_epoch": result.best_epoch,
            "best_loss": result.best_loss, "seconds": elapsed}


# ---------------------------------------------------------------- evaluate

METHODS = ("physical", "fixed", "variable")


def _score(pred: BinaryImage, gt: BinaryImage) -> tuple[float, float, float]:
    epe = epe_stats(pred, gt)
    return pixel_difference(pred, gt), epe.epe_mean_nm, epe.epe_max_nm


def _evaluate_one(job) -> list[tuple]:
    """Rows ``(tile, method, grid, pd%, epe_mean_nm, epe_max_nm)`` for one test tile.

    ``native`` compares against the stored wafer at the aerial pitch.  When
    a fine wafer exists, ``fine`` follows the upsample-then-threshold order
    for the physical model while the threshold baselines act on the native
    aerial and are upsampled nearest-neighbour.  ``fine_bilinear`` applies
    the baseline thresholds to the bilinearly upsampled aerial instead.
    """
    cfg, params, man, tile, fixed, var = job
    shape = _tile_shape(man)
    aerial = load_aerial(Path(man.root) / tile.aerial, expected_shape=shape)
    wafer = load_wafer(Path(man.root) / tile.wafer, man.pitch_nm, expected_shape=shape)
    depth, _ = simulate_depth(aerial, params, cfg.solver, cfg.exposure_steps)
    preds = {
        "physical": binarize(depth, params.tau),
        "fixed": fixed_threshold_predict(aerial, fixed.thr),
        "variable": variable_threshold_predict(aerial, var.var),
    }
    rows = [(tile.tile_id, m, "native") + _score(preds[m], wafer) for m in METHODS]

    fine_gt = load_fine_wafer(man, tile)
    if fine_gt is not None:
        fp = fine_gt.pitch_nm
        fine_depth = resample_bilinear(depth, fp)
        fine_preds = {
            "physical": binarize(fine_depth, params.tau),
            "fixed": resample_nearest(preds["fixed"], fp),
            "variable": resample_nearest(preds["variable"], fp),
        }
        rows += [(tile.tile_id, m, "fine") + _score(fine_preds[m], fine_gt) for m in METHODS]
        fine_aerial = resample_bilinear(aerial, fp)
        # window scales with the grid so it spans the same physical area
        window = int(round(var.var.window_px * man.pitch_nm / fp)) | 1
        var_fine = VarThresholdParams(var.var.m1, var.var.m2, window)
        alt = {
            "fixed": fixed_threshold_predict(fine_aerial, fixed.thr),
            "variable": variable_threshold_predict(fine_aerial, var_fine),
        }
        rows += [(tile.tile_id, m, "fine_bilinear") + _score(alt[m], fine_gt) for m in alt]
    return rows


def aggregate(rows: Sequence[tuple]) -> list[tuple]:
    """Mean pixel difference, mean EPE and worst EPE per (method, grid)."""
    groups: dict[tuple[str, str], list[tuple]] = {}
    for row in rows:
        groups.setdefault((row[1], row[2]), []).append(row)
    out = []
    for (method, grid), items in groups.items():
        arr = np.array([r[3:] for r in items], dtype=float)
        out.append((method, grid, len(items), float(arr[:, 0].mean()), float(arr[:, 1].mean()),
                    float(arr[:, 2].max())))
    return out


def cmd_evaluate(cfg: RunConfig, man: DatasetManifest, params: ResistParams, out: Path) -> dict:
    out = Path(out)
    calib = load_records(man, ("calibration",))
    fixed = fit_threshold_baseline(calib, "fixed")
    var = fit_threshold_baseline(calib, "variable", window_px=cfg.window_px)
    tests = man.split("test")
    if not tests:
        raise DataError("manifest has no test tiles")
    jobs = [(cfg, params, man, t, fixed, var) for t in tests]
    rows = [r for chunk in _pool_map(_evaluate_one, jobs, cfg.workers) for r in chunk]
    summary = aggregate(rows)
    _write_csv(out / "per_tile.csv",
               ("tile", "method", "grid", "pixel_difference_pct", "epe_mean_nm", "epe_max_nm"), rows)
    _write_csv(out / "summary.csv",
               ("method", "grid", "tiles", "pixel_difference_pct", "epe_mean_nm", "epe_max_nm"), summary)
    report = {
        "baselines": _baseline_json(fixed, var),
        "summary": {f"{m}/{g}": {"pixel_difference_pct": pd, "epe_mean_nm": em, "epe_max_nm": ex}
                    for m, g, _, pd, em, ex in summary},
    }
    write_json(out / "evaluate.json", report)
    return report


def _baseline_json(fixed: BaselineFit, var: BaselineFit) -> dict:
    return {
        "fixed": {"threshold": fixed.thr, "calibration_pd_pct": fixed.pixel_difference},
        "variable": {"m1": var.var.m1, "m2": var.var.m2, "window_px": var.var.window_px,
                     "calibration_pd_pct": var.pixel_difference},
    }


# ------------------------------------------------------------------- bench

def _time_forward(aerials: Sequence[Field2D], params: ResistParams, cfg: RunConfig) -> float:
    for a in aerials[:cfg.bench.warmup]:
        predict_pattern(a, params, cfg.solver, exposure_steps=cfg.exposure_steps)
    times = []
    for a in aerials:
        t0 = time.perf_counter()
        predict_pattern(a, params, cfg.solver, exposure_steps=cfg.exposure_steps)
        times.append(time.perf_counter() - t0)
    return float(np.mean(times))


def _bench_tiles(man: DatasetManifest, count: int) -> list[TileEntry]:
    tiles = man.split("test") or man.tiles
    if not tiles:
        raise DataError("manifest has no tiles")
    # cycle when the split is smaller than the requested sample
    return [tiles[i % len(tiles)] for i in range(count)]


def cmd_bench(cfg: RunConfig, man: DatasetManifest, params: ResistParams, out: Path) -> dict:
    """Mean forward time per tile at the native pitch and at the fine pitch.

    Only the model run is timed; aerials are loaded and resampled beforehand.
    """
    out = Path(out)
    tiles = _bench_tiles(man, max(cfg.bench.tiles, 1))
    coarse = [load_aerial(Path(man.root) / t.aerial, expected_shape=_tile_shape(man)) for t in tiles]
    fine = [resample_bilinear(a, cfg.bench.fine_pitch_nm) for a in coarse]
    t_coarse = _time_forward(coarse, params, cfg)
    t_fine = _time_forward(fine, params, cfg)
    report = {
        "tiles": len(tiles),
        "warmup": cfg.bench.warmup,
        "solver": cfg.solver,
        "coarse_pitch_nm": man.pitch_nm,
        "fine_pitch_nm": cfg.bench.fine_pitch_nm,
        "coarse_seconds": t_coarse,
        "fine_seconds": t_fine,
        "ratio": t_fine / t_coarse,
        "pixel_ratio": fine[0].values.size / coarse[0].values.size,
    }
    write_json(out / "bench.json", report)
    return report


# -------------------------------------------------------------- robustness

def _robust_one(job) -> tuple[str, float]:
    cfg, params, man, tile = job
    aerial = load_aerial(Path(man.root) / tile.aerial, expected_shape=_tile_shape(man))
    res = cfg.resolution_nm
    _, from_coarse = predict_pattern(aerial, params, cfg.solver, res, cfg.exposure_steps)
    _, from_fine = predict_pattern(resample_bilinear(aerial, res), params, cfg.solver, res,
                                   cfg.exposure_steps)
    return tile.tile_id, pixel_difference(from_coarse, from_fine)


def cmd_robustness(cfg: RunConfig, man: DatasetManifest, params: ResistParams, out: Path) -> dict:
    """Same parameters run on the native aerial and on the aerial resampled to
    ``cfg.resolution_nm``; both patterns are compared on the fine grid."""
    out = Path(out)
    tests = man.split("test")
    if not tests:
        raise DataError("manifest has no test tiles")
    rows = _pool_map(_robust_one, [(cfg, params, man, t) for t in tests], cfg.workers)
    _write_csv(out / "robustness.csv", ("tile", "pixel_difference_pct"), rows)
    report = {"tiles": len(rows), "resolution_nm": cfg.resolution_nm,
              "mean_pixel_difference_pct": float(np.mean([r[1] for r in rows])),
              "max_pixel_difference_pct": float(np.max([r[1] for r in rows]))}
    write_json(out / "robustness.json", report)
    return report
