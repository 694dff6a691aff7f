"""Experiment configuration: a single YAML file with sections for dataset
synthesis, training, sampling, tiling, and calibration.

Unknown keys are rejected to catch typos. ``--override KEY=VALUE`` edits use
dotted paths into the raw document before parsing; environment variables may
override paths only (HAZEFLOW_WORKDIR, HAZEFLOW_DATASET_DIR).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError, ValidationError
from .flow import TrainConfig
from .net import ArchSpec
from .sampling import SamplerConfig
from .simulate import NoiseSpec, PsfSpec, SignalSpec


@dataclass(frozen=True)
class SplitSizes:
    train: int
    val: int
    test: int

    def validate(self) -> None:
        if min(self.train, self.val, self.test) < 0:
            raise ValidationError("split sizes must be non-negative")

    def as_dict(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass(frozen=True)
class DatasetSection:
    signal: SignalSpec
    hazy_psf: PsfSpec
    clean_psf: PsfSpec
    noise: NoiseSpec
    splits: SplitSizes
    dir: str | None = None


@dataclass(frozen=True)
class TilingSection:
    tile: int = 64
    overlap: float = 0.5


@dataclass(frozen=True)
class CalibrationSection:
    n_bins: int = 50
    fit_split: str = "val"


@dataclass(frozen=True)
class ExperimentConfig:
    workdir: Path
    dataset: DatasetSection
    train: TrainConfig
    arch: ArchSpec
    sample: SamplerConfig
    tiling: TilingSection
    calibration: CalibrationSection
    allow_tile_mismatch: bool = False

    @property
    def dataset_dir(self) -> Path:
        if self.dataset.dir:
            return Path(self.dataset.dir)
        return self.workdir / "dataset"

    @property
    def checkpoints_dir(self) -> Path:
        return self.workdir / "checkpoints"

    @property
    def predictions_dir(self) -> Path:
        return self.workdir / "predictions"

    @property
    def reports_dir(self) -> Path:
        return self.workdir / "reports"


def _take(d: dict, section: str, known: dict) -> dict:
    """Pop known keys with defaults; reject anything left over."""
    out = {}
    d = dict(d or {})
    for key, default in known.items():
        out[key] = d.pop(key, default)
    if d:
        raise ConfigError(f"unknown keys in '{section}': {sorted(d)}")
    return out


_REQUIRED = object()


def _require(values: dict, section: str) -> dict:
    missing = [k for k, v in values.items() if v is _REQUIRED]
    if missing:
        raise ConfigError(f"missing required keys in '{section}': {missing}")
    return values


def _pair(value, section: str, key: str) -> tuple:
    try:
        a, b = value
        return (a, b)
    except Exception:
        raise ConfigError(f"'{section}.{key}' must be a two-element list")


def parse_overrides(pairs: list[str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override '{item}' has unparseable value: {exc}")
    return out


def _apply_override(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            nxt = {}
            node[p] = nxt
        node = nxt
    node[parts[-1]] = value


def load_config(path, overrides: dict[str, object] | None = None,
                env: dict | None = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    for key, value in (overrides or {}).items():
        _apply_override(doc, key, value)
    return build_config(doc, env=env)


def build_config(doc: dict, env: dict | None = None) -> ExperimentConfig:
    env = env or {}
    doc = dict(doc)
    top = _take(doc, "<root>", {
        "workdir": _REQUIRED, "dataset": _REQUIRED, "train": {},
        "sample": {}, "tiling": {}, "calibration": {},
        "allow_tile_mismatch": False,
    })
    _require({"workdir": top["workdir"], "dataset": top["dataset"]}, "<root>")

    workdir = Path(env.get("HAZEFLOW_WORKDIR") or top["workdir"])

    ds = _take(top["dataset"], "dataset", {
        "width": _REQUIRED, "height": _REQUIRED,
        "structure_kind": "blobs",
        "object_count_range": [3, 8],
        "intensity_range": [50.0, 200.0],
        "seed": 0,
        "splits": _REQUIRED,
        "hazy_psf": _REQUIRED,
        "clean_psf": _REQUIRED,
        "noise": _REQUIRED,
        "dir": None,
    })
    _require({k: ds[k] for k in ("width", "height", "splits", "hazy_psf",
                                 "clean_psf", "noise")}, "dataset")

    def psf(section: str, d: dict) -> PsfSpec:
        vals = _take(d, section, {
            "mode": _REQUIRED, "pinhole_au": _REQUIRED,
            "base_sigma": _REQUIRED, "kernel_radius": None,
        })
        _require(vals, section)
        return PsfSpec(mode=vals["mode"], pinhole_au=float(vals["pinhole_au"]),
                       base_sigma=float(vals["base_sigma"]),
                       kernel_radius=vals["kernel_radius"])

    noise_vals = _require(_take(ds["noise"], "dataset.noise", {
        "photon_gain": _REQUIRED, "read_sigma": _REQUIRED, "seed": 0,
    }), "dataset.noise")
    split_vals = _require(_take(ds["splits"], "dataset.splits", {
        "train": _REQUIRED, "val": _REQUIRED, "test": _REQUIRED,
    }), "dataset.splits")

    count_range = _pair(ds["object_count_range"], "dataset", "object_count_range")
    intensity_range = _pair(ds["intensity_range"], "dataset", "intensity_range")

    dataset = DatasetSection(
        signal=SignalSpec(
            width=int(ds["width"]), height=int(ds["height"]),
            structure_kind=str(ds["structure_kind"]),
            object_count_range=(int(count_range[0]), int(count_range[1])),
            intensity_range=(float(intensity_range[0]), float(intensity_range[1])),
            seed=int(ds["seed"])),
        hazy_psf=psf("dataset.hazy_psf", ds["hazy_psf"]),
        clean_psf=psf("dataset.clean_psf", ds["clean_psf"]),
        noise=NoiseSpec(photon_gain=float(noise_vals["photon_gain"]),
                        read_sigma=float(noise_vals["read_sigma"]),
                        seed=int(noise_vals["seed"])),
        splits=SplitSizes(train=int(split_vals["train"]), val=int(split_vals["val"]),
                          test=int(split_vals["test"])),
        dir=env.get("HAZEFLOW_DATASET_DIR") or ds["dir"],
    )

    tr = _take(top["train"], "train", {
        "steps_t": 20, "batch_size": 16, "learning_rate": 1e-4,
        "patch_size": 64, "max_iterations": 2000, "seed": 0,
        "conditioning": "concat", "time_sampling": "grid",
        "coupling": "gaussian", "sifm_sigma": 0.0,
        "checkpoint_interval": 500, "val_interval": 250,
        "arch": {},
    })
    arch_vals = _take(tr.pop("arch"), "train.arch", {
        "base_channels": 32, "depth": 3, "time_embed_dim": 64,
    })
    train = TrainConfig(
        steps_t=int(tr["steps_t"]), batch_size=int(tr["batch_size"]),
        learning_rate=float(tr["learning_rate"]), patch_size=int(tr["patch_size"]),
        max_iterations=int(tr["max_iterations"]), seed=int(tr["seed"]),
        conditioning=str(tr["conditioning"]), time_sampling=str(tr["time_sampling"]),
        coupling=str(tr["coupling"]), sifm_sigma=float(tr["sifm_sigma"]),
        checkpoint_interval=int(tr["checkpoint_interval"]),
        val_interval=int(tr["val_interval"]))
    arch = ArchSpec(base_channels=int(arch_vals["base_channels"]),
                    depth=int(arch_vals["depth"]),
                    time_embed_dim=int(arch_vals["time_embed_dim"]))

    sm = _take(top["sample"], "sample", {
        "steps_t": 20, "n_samples": 50, "seed": 0,
        "base": "gaussian", "sifm_sigma": 0.0,
    })
    sample = SamplerConfig(steps_t=int(sm["steps_t"]), n_samples=int(sm["n_samples"]),
                           seed=int(sm["seed"]), base=str(sm["base"]),
                           sifm_sigma=float(sm["sifm_sigma"]))

    tl = _take(top["tiling"], "tiling", {"tile": train.patch_size, "overlap": 0.5})
    tiling = TilingSection(tile=int(tl["tile"]), overlap=float(tl["overlap"]))

    cal = _take(top["calibration"], "calibration", {"n_bins": 50, "fit_split": "val"})
    calibration = CalibrationSection(n_bins=int(cal["n_bins"]),
                                     fit_split=str(cal["fit_split"]))

    cfg = ExperimentConfig(
        workdir=workdir, dataset=dataset, train=train, arch=arch,
        sample=sample, tiling=tiling, calibration=calibration,
        allow_tile_mismatch=bool(top["allow_tile_mismatch"]))
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    try:
        cfg.dataset.signal.validate()
        cfg.dataset.hazy_psf.validate()
        cfg.dataset.clean_psf.validate()
        cfg.dataset.noise.validate()
        cfg.dataset.splits.validate()
        cfg.train.validate()
        cfg.arch.validate()
        cfg.sample.validate()
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    div = 2 ** cfg.arch.depth
    if cfg.train.patch_size % div:
        raise ConfigError(
            f"patch_size {cfg.train.patch_size} not divisible by 2^depth={div}")
    if cfg.train.patch_size > min(cfg.dataset.signal.width, cfg.dataset.signal.height):
        raise ConfigError("patch_size exceeds the simulated image size")
    if cfg.tiling.tile != cfg.train.patch_size and not cfg.allow_tile_mismatch:
        raise ConfigError(
            f"tiling.tile ({cfg.tiling.tile}) must equal train.patch_size "
            f"({cfg.train.patch_size}); set allow_tile_mismatch to override")
    if not (0.0 < cfg.tiling.overlap < 1.0):
        raise ConfigError("tiling.overlap must lie strictly in (0, 1)")
    if cfg.calibration.n_bins < 2:
        raise ConfigError("calibration.n_bins must be >= 2")
    if cfg.calibration.fit_split not in ("train", "val", "test"):
        raise ConfigError("calibration.fit_split must be train, val, or test")


def dataset_config_snapshot(cfg: ExperimentConfig) -> dict:
    """The dataset portion of the config, as stored in dataset manifests."""
    d = cfg.dataset
    return {
        "width": d.signal.width, "height": d.signal.height,
        "structure_kind": d.signal.structure_kind,
        "object_count_range": list(d.signal.object_count_range),
        "intensity_range": list(d.signal.intensity_range),
        "seed": d.signal.seed,
        "splits": d.splits.as_dict(),
        "hazy_psf": {"mode": d.hazy_psf.mode, "pinhole_au": d.hazy_psf.pinhole_au,
                     "base_sigma": d.hazy_psf.base_sigma,
                     "kernel_radius": d.hazy_psf.kernel_radius},
        "clean_psf": {"mode": d.clean_psf.mode, "pinhole_au": d.clean_psf.pinhole_au,
                      "base_sigma": d.clean_psf.base_sigma,
                      "kernel_radius": d.clean_psf.kernel_radius},
        "noise": {"photon_gain": d.noise.photon_gain,
                  "read_sigma": d.noise.read_sigma, "seed": d.noise.seed},
    }
