"""Training loop with periodic checkpoints, validation probes, and loss logs.

Batch randomness for iteration i is drawn from a child stream keyed by
(seed, i), so a resumed run replays exactly the iterations a straight run
would have produced. Validation batches are fixed once per seed, making the
probe a comparable model-selection signal across the run.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .config import ExperimentConfig
from .dataset import load_manifest, load_norm_stats, load_normalized_split
from .errors import (CheckpointIncompatibilityError, DataError,
                     TrainingDivergenceError)
from .flow import FlowBatch, guided_cfm_loss, make_flow_batch, training_step
from .net import VelocityField, init_params, load_checkpoint, save_checkpoint
from .seeding import child_rng

VAL_RNG_KEY = 987_654_321
N_VAL_BATCHES = 4

TRAIN_LOG = "train_log.csv"
VAL_LOG = "val_log.csv"


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path | None
    iterations: int
    last_loss: float | None


def _val_batches(hazy, clean, cfg) -> list[FlowBatch]:
    rng = child_rng(cfg.seed, VAL_RNG_KEY)
    return [make_flow_batch(hazy, clean, rng, cfg) for _ in range(N_VAL_BATCHES)]


def _val_loss(field: VelocityField, batches: list[FlowBatch]) -> float:
    field.eval()
    total = 0.0
    with torch.no_grad():
        for b in batches:
            total += float(guided_cfm_loss(field(b.t, b.x_t, b.x_cond), b.v_target))
    field.train()
    return total / len(batches)


def run_training(cfg: ExperimentConfig, dataset_dir: Path | str, out_dir: Path | str,
                 resume: Path | str | None = None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(dataset_dir)
    sizes = {s: sum(1 for r in manifest["samples"] if r["split"] == s)
             for s in ("train", "val")}
    if sizes["train"] == 0:
        raise DataError(f"empty train split in {dataset_dir}")
    stats = load_norm_stats(dataset_dir)
    hazy, clean = load_normalized_split(dataset_dir, "train", stats)

    train_cfg = cfg.train
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.arch != cfg.arch or ck.conditioning != train_cfg.conditioning:
            raise CheckpointIncompatibilityError(
                f"checkpoint arch {ck.arch}/{ck.conditioning} does not match "
                f"config {cfg.arch}/{train_cfg.conditioning}")
        field = ck.field
        start_iter = ck.iteration
        optimizer = torch.optim.Adam(field.parameters(), lr=train_cfg.learning_rate)
        if ck.optimizer_state is not None:
            optimizer.load_state_dict(ck.optimizer_state)
    else:
        field = init_params(cfg.arch, train_cfg.seed, train_cfg.conditioning)
        start_iter = 0
        optimizer = torch.optim.Adam(field.parameters(), lr=train_cfg.learning_rate)

    val_batches = []
    if sizes["val"] > 0:
        val_batches = _val_batches(*load_normalized_split(dataset_dir, "val", stats),
                                   train_cfg)

    def checkpoint(path: Path, iteration: int) -> Path:
        save_checkpoint(path, field, optimizer, iteration,
                        norm_stats=stats.to_dict(),
                        train_config=_train_config_dict(cfg))
        return path

    append = resume is not None and (out_dir / TRAIN_LOG).exists()
    train_f = open(out_dir / TRAIN_LOG, "a" if append else "w", newline="")
    val_f = open(out_dir / VAL_LOG, "a" if append else "w", newline="")
    train_w = csv.writer(train_f)
    val_w = csv.writer(val_f)
    if not append:
        train_w.writerow(["iteration", "loss", "wall_time_s"])
        val_w.writerow(["iteration", "val_loss"])

    best_val = float("inf")
    best_path: Path | None = None
    last_loss: float | None = None
    t0 = time.monotonic()
    try:
        for it in range(start_iter, train_cfg.max_iterations):
            rng = child_rng(train_cfg.seed, it)
            batch = make_flow_batch(hazy, clean, rng, train_cfg)
            try:
                last_loss = training_step(field, optimizer, batch)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(
                    f"iteration {it + 1}: {exc}; last periodic checkpoint retained"
                ) from exc
            iteration = it + 1
            train_w.writerow([iteration, f"{last_loss:.8e}",
                              f"{time.monotonic() - t0:.3f}"])
            train_f.flush()
            if val_batches and iteration % train_cfg.val_interval == 0:
                vl = _val_loss(field, val_batches)
                val_w.writerow([iteration, f"{vl:.8e}"])
                val_f.flush()
                if vl < best_val:
                    best_val = vl
                    best_path = checkpoint(out_dir / "best.pt", iteration)
            if iteration % train_cfg.checkpoint_interval == 0:
                checkpoint(out_dir / f"ckpt_{iteration:06d}.pt", iteration)
    finally:
        train_f.close()
        val_f.close()

    final = checkpoint(out_dir / "final.pt", train_cfg.max_iterations)
    return TrainResult(final_checkpoint=final, best_checkpoint=best_path,
                       iterations=train_cfg.max_iterations, last_loss=last_loss)


def _train_config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg.train)
    d["arch"] = asdict(cfg.arch)
    return d
