"""Command-line harness.

Subcommands: simulate | train | predict | calibrate | evaluate | plot.
Reports are written as delimited text (CSV/JSON) with rendered PNG figures
alongside. Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence,
5 checkpoint incompatibility.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from . import calibration as calib_mod
from . import plots
from .config import ExperimentConfig, load_config, parse_overrides
from .dataset import (load_manifest, load_norm_stats, load_normalized_split,
                      simulate_dataset)
from .errors import (CheckpointIncompatibilityError, ConfigError, DataError,
                     IntegrationDivergenceError, TrainingDivergenceError,
                     ValidationError)
from .metrics import MetricRow, aggregate, mse as mse_metric, psnr_affine, psnr_fixed
from .net import LoadedCheckpoint, load_checkpoint
from .rasters import RASTER_SUFFIX, read_raster, write_raster
from .sampling import SamplerConfig, sample_posterior
from .seeding import derive_seed
from .simulate import NormStats, denormalize, normalize
from .tiling import plan_tiles, sample_posterior_tiled
from .training import TRAIN_LOG, VAL_LOG, run_training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_INCOMPATIBLE = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hazeflow",
        description="Guided conditional flow matching for microscopy dehazing.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, *, needs_config: bool = True):
        p.add_argument("--config", required=needs_config, help="experiment YAML")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--seed", type=int, default=None,
                       help="override the command's primary seed")
        p.add_argument("--steps-t", type=int, default=None, dest="steps_t",
                       help="override integration steps for sampling")
        p.add_argument("--samples", type=int, default=None,
                       help="override posterior sample count k")
        p.add_argument("--checkpoint", default=None, help="checkpoint path")
        p.add_argument("--out", default=None, help="output directory or file")

    p = sub.add_parser("simulate", help="generate train/val/test pairs on disk")
    add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the velocity field")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="posterior sampling over full frames")
    add_common(p)
    p.add_argument("--input", default=None,
                   help="hazy raster file or directory (default: test split)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", help="fit the RMV->RMSE calibration map")
    add_common(p)
    p.add_argument("--pred", default=None, help="predictions directory")
    p.add_argument("--split", default=None, help="dataset split with ground truth")
    p.add_argument("--fit", default=None,
                   help="apply an existing fit JSON instead of fitting")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="distortion metrics and trend sweeps")
    add_common(p)
    p.add_argument("--pred", default=None, help="predictions directory")
    p.add_argument("--split", default="test", help="dataset split with ground truth")
    p.add_argument("--include-input-baseline", action="store_true",
                   help="also score the hazy inputs (rows labeled 'input')")
    p.add_argument("--space", choices=("denormalized", "normalized"),
                   default="denormalized", help="evaluation intensity space")
    p.add_argument("--k-sweep", default=None, metavar="K1,K2,...",
                   help="sample-count sweep (needs checkpoint)")
    p.add_argument("--t-sweep", default=None, metavar="T1,T2,...",
                   help="integration-step sweep (needs checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="render figures from existing reports")
    add_common(p, needs_config=False)
    p.add_argument("--kind", required=True, choices=("loss", "calibration", "sweep"))
    p.add_argument("--input", required=True, help="report/log file to render")
    p.set_defaults(func=cmd_plot)

    return parser


def _load_cfg(args, seed_keys: tuple[str, ...] = ()) -> ExperimentConfig:
    overrides = parse_overrides(args.override)
    if args.seed is not None:
        for i, key in enumerate(seed_keys):
            overrides.setdefault(key, args.seed + i)
    if args.steps_t is not None:
        overrides.setdefault("sample.steps_t", args.steps_t)
    if args.samples is not None:
        overrides.setdefault("sample.n_samples", args.samples)
    return load_config(args.config, overrides)


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args, seed_keys=("dataset.seed", "dataset.noise.seed"))
    out = Path(args.out) if args.out else cfg.dataset_dir
    manifest_path = simulate_dataset(cfg, out)
    manifest = json.loads(manifest_path.read_text())
    n = len(manifest["samples"])
    print(f"simulated {n} pairs under {out} (manifest: {manifest_path})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args, seed_keys=("train.seed",))
    out = Path(args.out) if args.out else cfg.checkpoints_dir
    result = run_training(cfg, cfg.dataset_dir, out,
                          resume=args.checkpoint)
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.best_checkpoint:
        print(f"best-val checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def _resolve_checkpoint(args, cfg: ExperimentConfig) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    for name in ("best.pt", "final.pt"):
        candidate = cfg.checkpoints_dir / name
        if candidate.exists():
            return candidate
    raise DataError(f"no checkpoint under {cfg.checkpoints_dir}; pass --checkpoint")


def _load_field(args, cfg: ExperimentConfig) -> tuple[LoadedCheckpoint, NormStats]:
    path = _resolve_checkpoint(args, cfg)
    ck = load_checkpoint(path)
    if ck.arch != cfg.arch or ck.conditioning != cfg.train.conditioning:
        raise CheckpointIncompatibilityError(
            f"{path}: checkpoint ({ck.arch}, {ck.conditioning}) does not match "
            f"config ({cfg.arch}, {cfg.train.conditioning})")
    if not ck.norm_stats:
        raise DataError(f"{path}: checkpoint lacks normalization stats")
    return ck, NormStats.from_dict(ck.norm_stats)


def _hazy_stem(path: Path) -> str:
    name = path.name
    suffix = f"_hazy{RASTER_SUFFIX}"
    if name.endswith(suffix):
        return name[:-len(suffix)]
    return path.stem


def _gather_inputs(args, cfg: ExperimentConfig) -> list[Path]:
    source = Path(args.input) if args.input else cfg.dataset_dir / "test"
    if source.is_dir():
        files = sorted(source.glob(f"*_hazy{RASTER_SUFFIX}"))
        if not files:
            files = sorted(source.glob(f"*{RASTER_SUFFIX}"))
        if not files:
            raise DataError(f"no rasters found under {source}")
        return files
    if source.exists():
        return [source]
    raise DataError(f"input not found: {source}")


def cmd_predict(args) -> int:
    cfg = _load_cfg(args, seed_keys=("sample.seed",))
    ck, stats = _load_field(args, cfg)
    files = _gather_inputs(args, cfg)
    source = Path(args.input) if args.input else cfg.dataset_dir / "test"
    out_root = Path(args.out) if args.out else (
        cfg.predictions_dir / (source.name if source.is_dir() else _hazy_stem(source)))
    out_root.mkdir(parents=True, exist_ok=True)

    grids: dict[tuple[int, int], object] = {}
    stems = []
    for i, f in enumerate(files):
        img = read_raster(f)
        if img.shape not in grids:
            grids[img.shape] = plan_tiles(img.shape[0], img.shape[1],
                                          cfg.tiling.tile, cfg.tiling.overlap)
        grid = grids[img.shape]
        hazy_norm = normalize(img, stats.hazy)
        scfg = dataclasses.replace(cfg.sample, seed=derive_seed(cfg.sample.seed, i))
        stem = _hazy_stem(f)
        posterior = sample_posterior_tiled(ck.field, hazy_norm, grid, scfg,
                                           observation_ref=stem)
        img_dir = out_root / stem
        img_dir.mkdir(exist_ok=True)
        for j in range(posterior.k):
            write_raster(img_dir / f"sample_{j:03d}{RASTER_SUFFIX}",
                         denormalize(posterior.samples[j], stats.clean))
        mmse_dn = denormalize(posterior.mmse, stats.clean)
        std_dn = (posterior.pixel_std * stats.clean.std).astype(np.float32)
        write_raster(img_dir / f"mmse{RASTER_SUFFIX}", mmse_dn)
        write_raster(img_dir / f"pixel_std{RASTER_SUFFIX}", std_dn)
        plots.save_prediction_panel(img, mmse_dn, std_dn, img_dir / "preview.png")
        stems.append(stem)

    (out_root / "predictions.json").write_text(json.dumps({
        "checkpoint": str(_resolve_checkpoint(args, cfg)),
        "n_samples": cfg.sample.n_samples,
        "steps_t": cfg.sample.steps_t,
        "seed": cfg.sample.seed,
        "base": cfg.sample.base,
        "images": stems,
    }, indent=2) + "\n")
    print(f"wrote {len(stems)} posterior sets ({cfg.sample.n_samples} samples each) "
          f"to {out_root}")
    return EXIT_OK


def _prediction_dirs(pred_root: Path) -> list[Path]:
    if not pred_root.is_dir():
        raise DataError(f"predictions directory not found: {pred_root}")
    dirs = sorted(p for p in pred_root.iterdir()
                  if p.is_dir() and (p / f"mmse{RASTER_SUFFIX}").exists())
    if not dirs:
        raise DataError(f"no per-image predictions under {pred_root}")
    return dirs


def cmd_calibrate(args) -> int:
    cfg = _load_cfg(args)
    split = args.split or cfg.calibration.fit_split
    pred_root = Path(args.pred) if args.pred else cfg.predictions_dir / split
    stats = load_norm_stats(cfg.dataset_dir)
    gt_dir = cfg.dataset_dir / split

    stds_n, mmses_n, gts_n = [], [], []
    per_image = []
    for img_dir in _prediction_dirs(pred_root):
        gt_path = gt_dir / f"{img_dir.name}_clean{RASTER_SUFFIX}"
        if not gt_path.exists():
            raise DataError(f"no ground truth for {img_dir.name} under {gt_dir}")
        mmse = read_raster(img_dir / f"mmse{RASTER_SUFFIX}")
        std = read_raster(img_dir / f"pixel_std{RASTER_SUFFIX}")
        gt = read_raster(gt_path)
        # Calibration runs on normalized intensities.
        stds_n.append((std / stats.clean.std).astype(np.float32))
        mmses_n.append(normalize(mmse, stats.clean))
        gts_n.append(normalize(gt, stats.clean))
        per_image.append(img_dir)

    if max(float(s.max()) for s in stds_n) <= 0.0:
        raise DataError("pixel_std is identically zero; calibration needs "
                        "k >= 2 posterior samples")

    curve = calib_mod.build_curve(stds_n, mmses_n, gts_n,
                                  n_bins=cfg.calibration.n_bins)
    if args.fit:
        fit = _read_fit(Path(args.fit))
        fitted_here = False
    else:
        fit = calib_mod.fit_calibration(curve)
        fitted_here = True

    rho = float(scipy_stats.spearmanr(curve.rmv, curve.rmse).statistic)
    flags = []
    if fit.clamped:
        flags.append("alpha_clamped_at_minimum")
    report = {
        "split": split,
        "n_bins": cfg.calibration.n_bins,
        "n_pixels": int(sum(s.size for s in stds_n)),
        "fitted_on_this_split": fitted_here,
        "fit": fit.to_dict(),
        "spearman_rmv_rmse": rho,
        "curve": curve.to_dict(),
        "flags": flags,
    }

    out_dir = Path(args.out) if args.out else cfg.reports_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / f"calibration_{split}.json"
    report_path.write_text(json.dumps(report, indent=2) + "\n")
    with open(out_dir / f"calibration_{split}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin", "rmv", "rmse", "count"])
        for j in range(curve.n_bins):
            w.writerow([j, f"{curve.rmv[j]:.8e}", f"{curve.rmse[j]:.8e}",
                        int(curve.bin_counts[j])])
    plots.save_calibration_plot(report, out_dir / f"calibration_{split}.png")

    # Calibrated uncertainty maps, back in intensity units; predictions untouched.
    for img_dir, std_n in zip(per_image, stds_n):
        calibrated = calib_mod.apply_calibration(std_n, fit) * stats.clean.std
        write_raster(img_dir / f"pixel_std_calibrated{RASTER_SUFFIX}",
                     calibrated.astype(np.float32))

    print(f"calibration[{split}]: alpha={fit.alpha:.4f} beta={fit.beta:.4f} "
          f"spearman={rho:.3f} residual={fit.fit_residual:.4e} "
          f"flags={flags or 'none'} -> {report_path}")
    return EXIT_OK


def _read_fit(path: Path) -> calib_mod.CalibrationFit:
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read fit ({exc})")
    fit = doc.get("fit", doc)
    try:
        return calib_mod.CalibrationFit(
            alpha=float(fit["alpha"]), beta=float(fit["beta"]),
            fit_residual=float(fit.get("fit_residual", 0.0)),
            clamped=bool(fit.get("clamped", False)))
    except KeyError as exc:
        raise DataError(f"{path}: fit JSON missing key {exc}")


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag} must be a comma-separated integer list")
    if not values or sorted(values) != values:
        raise ConfigError(f"{flag} must be sorted and non-empty")
    return values


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args, seed_keys=("sample.seed",))
    split = args.split
    stats = load_norm_stats(cfg.dataset_dir)
    gt_dir = cfg.dataset_dir / split
    out_dir = Path(args.out) if args.out else cfg.reports_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[tuple[MetricRow, str]] = []
    pred_root = Path(args.pred) if args.pred else cfg.predictions_dir / split
    for img_dir in _prediction_dirs(pred_root):
        stem = img_dir.name
        gt_path = gt_dir / f"{stem}_clean{RASTER_SUFFIX}"
        if not gt_path.exists():
            rows.append((MetricRow(stem, float("nan"), float("nan"), float("nan"),
                                   status="missing_gt"), "mmse"))
            continue
        gt = read_raster(gt_path)
        pred = read_raster(img_dir / f"mmse{RASTER_SUFFIX}")
        rows.append((_score(stem, pred, gt, stats, args.space), "mmse"))
        if args.include_input_baseline:
            hazy_path = gt_dir / f"{stem}_hazy{RASTER_SUFFIX}"
            if hazy_path.exists():
                hazy = read_raster(hazy_path)
                rows.append((_score(stem, hazy, gt, stats, args.space,
                                    role="hazy"), "input"))

    csv_path = out_dir / f"metrics_{split}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "kind", "psnr_affine", "psnr_fixed", "mse", "status"])
        for row, kind in rows:
            w.writerow([row.image_id, kind, f"{row.psnr_affine:.6f}",
                        f"{row.psnr_fixed:.6f}", f"{row.mse:.8e}", row.status])

    for kind in ("mmse", "input"):
        agg = aggregate([r for r, k in rows if k == kind])
        if agg.get("count"):
            label = "input-psnr" if kind == "input" else "mmse-psnr"
            print(f"{label}[{split}]: n={agg['count']} "
                  f"psnr_affine={agg['psnr_affine_mean']:.3f}±{agg['psnr_affine_std']:.3f} dB "
                  f"psnr_fixed={agg['psnr_fixed_mean']:.3f} dB")
    print(f"metrics written to {csv_path}")

    if args.k_sweep or args.t_sweep:
        ck, _ = _load_field(args, cfg)
        hazy_n, clean_n = load_normalized_split(cfg.dataset_dir, split, stats)
        if args.k_sweep:
            k_list = _parse_int_list(args.k_sweep, "--k-sweep")
            sweep = calib_mod.sample_efficiency_sweep(
                ck.field, list(hazy_n), list(clean_n), k_list,
                steps_t=cfg.sample.steps_t, seed=cfg.sample.seed,
                n_bins=cfg.calibration.n_bins)
            _write_sweep(out_dir, "k", [dataclasses.asdict(r) for r in sweep])
        if args.t_sweep:
            t_list = _parse_int_list(args.t_sweep, "--t-sweep")
            sweep_rows = []
            for t_steps in t_list:
                psnrs = []
                for i, (obs, gt) in enumerate(zip(hazy_n, clean_n)):
                    scfg = SamplerConfig(
                        steps_t=t_steps, n_samples=cfg.sample.n_samples,
                        seed=derive_seed(cfg.sample.seed, t_steps, i),
                        base=cfg.sample.base, sifm_sigma=cfg.sample.sifm_sigma)
                    posterior = sample_posterior(ck.field, obs, scfg)
                    psnrs.append(psnr_affine(posterior.mmse, gt))
                sweep_rows.append({"t": t_steps, "alpha": None,
                                   "psnr_mmse": float(np.mean(psnrs)), "flag": ""})
            _write_sweep(out_dir, "t", sweep_rows)
    return EXIT_OK


def _score(stem: str, pred: np.ndarray, gt: np.ndarray, stats: NormStats,
           space: str, role: str = "clean") -> MetricRow:
    if pred.shape != gt.shape:
        return MetricRow(stem, float("nan"), float("nan"), float("nan"),
                         status=f"shape_mismatch:{pred.shape}vs{gt.shape}")
    if space == "normalized":
        role_stats = stats.hazy if role == "hazy" else stats.clean
        pred = normalize(pred, role_stats)
        gt = normalize(gt, stats.clean)
    rng = float(gt.max() - gt.min())
    if rng <= 0:
        return MetricRow(stem, float("nan"), float("nan"), float("nan"),
                         status="constant_gt")
    return MetricRow(stem, psnr_affine(pred, gt), psnr_fixed(pred, gt, rng),
                     mse_metric(pred, gt))


def _write_sweep(out_dir: Path, x_key: str, rows: list[dict]) -> None:
    csv_path = out_dir / f"sweep_{x_key}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([x_key, "alpha", "psnr_mmse", "flag"])
        for r in rows:
            w.writerow([r[x_key], "" if r.get("alpha") is None else f"{r['alpha']:.6f}",
                        f"{r['psnr_mmse']:.6f}", r.get("flag", "")])
    plots.save_sweep_plot(rows, x_key, out_dir / f"sweep_{x_key}.png")
    print(f"{x_key}-sweep written to {csv_path}")


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".png")
    src = Path(args.input)
    if args.kind == "loss":
        val_log = src.parent / VAL_LOG if src.name == TRAIN_LOG else None
        plots.save_loss_curve(src, out, val_log)
    elif args.kind == "calibration":
        try:
            report = json.loads(src.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{src}: cannot read calibration report ({exc})")
        plots.save_calibration_plot(report, out)
    else:
        rows = _read_sweep_csv(src)
        x_key = "k" if "k" in rows[0] else "t"
        plots.save_sweep_plot(rows, x_key, out)
    print(f"figure written to {out}")
    return EXIT_OK


def _read_sweep_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"sweep table not found: {path}")
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            row: dict = dict(rec)
            for key in ("k", "t"):
                if key in row and row[key] not in (None, ""):
                    row[key] = int(row[key])
            row["alpha"] = float(rec["alpha"]) if rec.get("alpha") else None
            row["psnr_mmse"] = float(rec["psnr_mmse"])
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: empty sweep table")
    return rows


def _fail(code: int, kind: str, exc: Exception) -> int:
    msg = str(exc).replace("\n", " ")
    print(f'HAZEFLOW_ERROR code={code} kind={kind} msg="{msg}"', file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (TrainingDivergenceError, IntegrationDivergenceError) as exc:
        return _fail(EXIT_DIVERGENCE, "divergence", exc)
    except CheckpointIncompatibilityError as exc:
        return _fail(EXIT_INCOMPATIBLE, "incompatibility", exc)
    except (DataError, ValidationError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except OSError as exc:
        return _fail(EXIT_DATA, "io", exc)


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
