"""Figure emission for the report path; every figure lands next to its
delimited counterpart (CSV/JSON) as a PNG file."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError


def save_loss_curve(train_log_csv: Path | str, out_png: Path | str,
                    val_log_csv: Path | str | None = None) -> None:
    iters, losses = _read_columns(train_log_csv, "iteration", "loss")
    fig, ax = plt.subplots(figsize=(6, 4))
    if iters:
        ax.plot(iters, losses, lw=0.8, label="train loss")
    if val_log_csv is not None and Path(val_log_csv).exists():
        vit, vloss = _read_columns(val_log_csv, "iteration", "val_loss")
        if vit:
            ax.plot(vit, vloss, "o-", ms=3, label="val loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("guided CFM loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_calibration_plot(report: dict, out_png: Path | str) -> None:
    curve = report["curve"]
    rmv = np.asarray(curve["rmv"], dtype=float)
    rmse = np.asarray(curve["rmse"], dtype=float)
    alpha, beta = report["fit"]["alpha"], report["fit"]["beta"]
    fig, ax = plt.subplots(figsize=(5, 5))
    lim = max(rmv.max(), rmse.max()) * 1.05 if rmv.size else 1.0
    ax.plot([0, lim], [0, lim], "k--", lw=1, label="y = x")
    ax.plot(rmv, rmse, "o", ms=4, label="bins")
    xs = np.linspace(0, lim, 50)
    ax.plot(xs, alpha * xs + beta, "-", lw=1.2,
            label=f"fit: {alpha:.3f}·RMV + {beta:.3f}")
    ax.set_xlabel("RMV")
    ax.set_ylabel("RMSE")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_sweep_plot(rows: list[dict], x_key: str, out_png: Path | str) -> None:
    xs = [r[x_key] for r in rows]
    psnr = [r["psnr_mmse"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, psnr, "o-", label="PSNR of MMSE")
    ax.set_xlabel(x_key)
    ax.set_ylabel("PSNR [dB]")
    alphas = [(r[x_key], r["alpha"]) for r in rows if r.get("alpha") is not None]
    if alphas:
        ax2 = ax.twinx()
        ax2.plot(*zip(*alphas), "s--", color="tab:orange", label="calibration alpha")
        ax2.set_ylabel("alpha")
        ax2.legend(loc="lower right")
    ax.legend(loc="lower center")
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def save_prediction_panel(hazy: np.ndarray, mmse: np.ndarray, pixel_std: np.ndarray,
                          out_png: Path | str) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    for ax, img, title in zip(axes, (hazy, mmse, pixel_std),
                              ("hazy input", "MMSE", "pixel std")):
        im = ax.imshow(img, cmap="magma")
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def _read_columns(path: Path | str, *names: str):
    path = Path(path)
    if not path.exists():
        raise DataError(f"log file not found: {path}")
    cols = {n: [] for n in names}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            for n in names:
                if row.get(n) not in (None, ""):
                    cols[n].append(float(row[n]))
    return tuple(cols[n] for n in names)
