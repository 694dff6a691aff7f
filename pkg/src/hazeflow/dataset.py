"""Paired datasets on disk.

Layout: one directory per split (train/val/test) holding
``pair_{index:05d}_hazy.raster`` / ``..._clean.raster`` files, plus a
``manifest.json`` at the dataset root recording the generating config, every
derived seed, and the normalization stats computed on the training split.
The manifest is sufficient to regenerate the dataset byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dataset_config_snapshot
from .errors import DataError, ValidationError
from .rasters import RASTER_SUFFIX, read_raster, write_raster
from .seeding import derive_seed
from .simulate import (NormStats, PairedSample, compute_norm_stats, gen_signal,
                       make_pair, normalize)

MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


def pair_stem(index: int) -> str:
    return f"pair_{index:05d}"


def simulate_dataset(cfg: ExperimentConfig, out_dir: Path | str) -> Path:
    """Generate all splits and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = cfg.dataset

    records = []
    train_pairs: list[PairedSample] = []
    signal_id = 0
    for split in SPLITS:
        n = getattr(d.splits, split)
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        for index in range(n):
            signal_seed = derive_seed(d.signal.seed, signal_id)
            spec = dataclasses.replace(d.signal, seed=signal_seed)
            signal = gen_signal(spec)
            pair = make_pair(signal, d.hazy_psf, d.clean_psf, d.noise,
                             signal_id=signal_id)
            stem = pair_stem(index)
            write_raster(split_dir / f"{stem}_hazy{RASTER_SUFFIX}", pair.hazy)
            write_raster(split_dir / f"{stem}_clean{RASTER_SUFFIX}", pair.clean)
            records.append({
                "split": split,
                "index": index,
                "signal_id": signal_id,
                "signal_seed": signal_seed,
                "hazy_noise_seed": derive_seed(d.noise.seed, signal_id, 0),
                "clean_noise_seed": derive_seed(d.noise.seed, signal_id, 1),
                "hazy_file": f"{split}/{stem}_hazy{RASTER_SUFFIX}",
                "clean_file": f"{split}/{stem}_clean{RASTER_SUFFIX}",
            })
            if split == "train":
                train_pairs.append(pair)
            signal_id += 1

    norm_stats = compute_norm_stats(train_pairs).to_dict() if train_pairs else None
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "dataset": dataset_config_snapshot(cfg),
        "norm_stats": norm_stats,
        "samples": records,
    }
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_manifest(dataset_dir: Path | str) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"dataset manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}")
    if manifest.get("format_version") != MANIFEST_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported manifest version")
    return manifest


def load_norm_stats(dataset_dir: Path | str) -> NormStats:
    manifest = load_manifest(dataset_dir)
    stats = manifest.get("norm_stats")
    if not stats:
        raise DataError(f"{dataset_dir}: manifest has no normalization stats "
                        "(empty train split?)")
    return NormStats.from_dict(stats)


def load_split(dataset_dir: Path | str, split: str) -> list[PairedSample]:
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}")
    manifest = load_manifest(dataset_dir)
    root = Path(dataset_dir)
    pairs = []
    for rec in manifest["samples"]:
        if rec["split"] != split:
            continue
        hazy = read_raster(root / rec["hazy_file"])
        clean = read_raster(root / rec["clean_file"])
        pairs.append(PairedSample(hazy=hazy, clean=clean, signal_id=rec["signal_id"]))
    return pairs


def load_normalized_split(dataset_dir: Path | str, split: str,
                          stats: NormStats | None = None):
    """(hazy, clean) stacks of shape (N, H, W), normalized per role."""
    stats = stats or load_norm_stats(dataset_dir)
    pairs = load_split(dataset_dir, split)
    if not pairs:
        raise DataError(f"empty {split} split in {dataset_dir}")
    hazy = np.stack([normalize(p.hazy, stats.hazy) for p in pairs])
    clean = np.stack([normalize(p.clean, stats.clean) for p in pairs])
    return hazy, clean
