"""Uncertainty calibration from posterior variability maps.

Pixels pooled over a split are sorted by predicted standard deviation and cut
into equal-population bins. Each bin contributes a root-mean-variance (RMV,
from the predicted stds) and a root-mean-squared-error (RMSE, from the MMSE
prediction against ground truth). A linear map RMSE ~= alpha * RMV + beta is
fitted by least squares with alpha constrained positive; applying it rescales
std maps into error estimates without touching the predictions themselves.
Calibration operates on normalized intensities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .metrics import psnr_affine
from .sampling import SamplerConfig, sample_posterior

ALPHA_MIN = 1e-6


@dataclass
class CalibrationCurve:
    rmv: np.ndarray
    rmse: np.ndarray
    bin_edges: np.ndarray
    n_bins: int
    bin_counts: np.ndarray

    def to_dict(self) -> dict:
        return {
            "rmv": [float(v) for v in self.rmv],
            "rmse": [float(v) for v in self.rmse],
            "bin_edges": [float(v) for v in self.bin_edges],
            "n_bins": int(self.n_bins),
            "bin_counts": [int(c) for c in self.bin_counts],
        }


@dataclass(frozen=True)
class CalibrationFit:
    alpha: float
    beta: float
    fit_residual: float
    clamped: bool = False

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta,
                "fit_residual": self.fit_residual, "clamped": self.clamped}


def _pool(arrays) -> np.ndarray:
    if isinstance(arrays, np.ndarray):
        arrays = [arrays]
    parts = [np.asarray(a, dtype=np.float64).ravel() for a in arrays]
    return np.concatenate(parts)


def build_curve(pixel_std, mmse, gt, n_bins: int = 50) -> CalibrationCurve:
    """Pool pixels, sort by predicted std, and bin into n_bins equal groups.

    Ties in std are broken by pixel index (stable sort). Bin sizes differ by
    at most one pixel.
    """
    sigma = _pool(pixel_std)
    pred = _pool(mmse)
    truth = _pool(gt)
    if not (sigma.size == pred.size == truth.size):
        raise ValidationError("pixel_std, mmse, and gt must align pixel-for-pixel")
    if n_bins < 2:
        raise ValidationError("n_bins must be >= 2")
    if sigma.size < n_bins:
        raise ValidationError(f"{sigma.size} pixels cannot fill {n_bins} bins")

    order = np.argsort(sigma, kind="stable")
    err_sq = (pred - truth) ** 2
    rmv = np.empty(n_bins)
    rmse = np.empty(n_bins)
    counts = np.empty(n_bins, dtype=np.int64)
    edges = np.empty(n_bins + 1)
    for j, bin_idx in enumerate(np.array_split(order, n_bins)):
        rmv[j] = np.sqrt(np.mean(sigma[bin_idx] ** 2))
        rmse[j] = np.sqrt(np.mean(err_sq[bin_idx]))
        counts[j] = bin_idx.size
        edges[j] = sigma[bin_idx[0]]
    edges[n_bins] = sigma[order[-1]]
    return CalibrationCurve(rmv=rmv, rmse=rmse, bin_edges=edges,
                            n_bins=n_bins, bin_counts=counts)


def fit_calibration(curve: CalibrationCurve) -> CalibrationFit:
    """Least-squares linear fit of RMSE against RMV with the slope kept positive."""
    x = np.asarray(curve.rmv, dtype=np.float64)
    y = np.asarray(curve.rmse, dtype=np.float64)
    var_x = np.mean((x - x.mean()) ** 2)
    if var_x <= 0:
        raise ValidationError("rmv values are identical; cannot fit a slope")
    alpha = float(np.mean((x - x.mean()) * (y - y.mean())) / var_x)
    clamped = alpha < ALPHA_MIN
    if clamped:
        alpha = ALPHA_MIN
    beta = float(y.mean() - alpha * x.mean())
    residual = float(np.sqrt(np.mean((y - (alpha * x + beta)) ** 2)))
    return CalibrationFit(alpha=alpha, beta=beta, fit_residual=residual, clamped=clamped)


def apply_calibration(pixel_std: np.ndarray, fit: CalibrationFit) -> np.ndarray:
    """Elementwise alpha * std + beta; input is left untouched."""
    sigma = np.asarray(pixel_std, dtype=np.float32)
    return (fit.alpha * sigma + fit.beta).astype(np.float32)


@dataclass(frozen=True)
class SweepRow:
    k: int
    alpha: float | None
    psnr_mmse: float
    flag: str = ""


def sample_efficiency_sweep(field, observations, targets, k_list,
                            steps_t: int = 20, seed: int = 0,
                            n_bins: int = 50) -> list[SweepRow]:
    """Calibration slope and MMSE PSNR as functions of posterior sample count.

    observations/targets are aligned lists of normalized rasters. One pool of
    max(k_list) samples is drawn per observation; each k evaluates the prefix
    of that pool, so successive rows share their early samples. Rows where
    the std map degenerates (e.g. k=1) are flagged instead of raising.
    """
    k_list = [int(k) for k in k_list]
    if sorted(k_list) != k_list or len(k_list) == 0 or k_list[0] < 1:
        raise ValidationError("k_list must be sorted and positive")
    k_max = k_list[-1]

    all_samples = []
    for i, obs in enumerate(observations):
        cfg = SamplerConfig(steps_t=steps_t, n_samples=k_max, seed=seed + i)
        all_samples.append(sample_posterior(field, obs, cfg).samples)

    rows: list[SweepRow] = []
    for k in k_list:
        stds, mmses = [], []
        psnrs = []
        for samples, gt in zip(all_samples, targets):
            prefix = samples[:k]
            mmse = prefix.mean(axis=0, dtype=np.float64).astype(np.float32)
            stds.append(prefix.std(axis=0, dtype=np.float64, ddof=0).astype(np.float32))
            mmses.append(mmse)
            psnrs.append(psnr_affine(mmse, gt))
        psnr = float(np.mean(psnrs))
        try:
            curve = build_curve(stds, mmses, targets, n_bins=n_bins)
            fit = fit_calibration(curve)
            rows.append(SweepRow(k=k, alpha=fit.alpha, psnr_mmse=psnr,
                                 flag="alpha_clamped" if fit.clamped else ""))
        except ValidationError as exc:
            rows.append(SweepRow(k=k, alpha=None, psnr_mmse=psnr,
                                 flag=f"calibration_degenerate: {exc}"))
    return rows
