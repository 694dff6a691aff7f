"""Distortion metrics: fixed-range PSNR and an affine-invariant variant.

The affine variant fits the scalar map a*pred + b minimizing MSE against the
ground truth before scoring, which makes the result invariant to linear
intensity transforms of the prediction; the dynamic range is taken from the
ground truth. Exact matches are capped at 150 dB.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

PSNR_CAP_DB = 150.0
_REL_EPS = 1e-15


@dataclass(frozen=True)
class MetricRow:
    image_id: str
    psnr_affine: float
    psnr_fixed: float
    mse: float
    status: str = "ok"


def _to_f64(pred, gt):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def _db(mse: float, range_sq: float) -> float:
    if mse <= range_sq * _REL_EPS:
        return PSNR_CAP_DB
    return float(min(-10.0 * np.log10(mse / range_sq), PSNR_CAP_DB))


def psnr_affine(pred, gt) -> float:
    """PSNR after the MSE-optimal scalar affine remap of the prediction."""
    p, g = _to_f64(pred, gt)
    rng = float(g.max() - g.min())
    if rng <= 0:
        raise ValidationError("ground truth is constant; undefined dynamic range")
    var_p = float(p.var())
    var_g = float(g.var())
    if var_p <= 0:
        mse = var_g  # best affine map of a constant prediction is b = mean(gt)
    else:
        cov = float(np.mean((p - p.mean()) * (g - g.mean())))
        mse = max(var_g - cov * cov / var_p, 0.0)
    return _db(mse, rng * rng)


def psnr_fixed(pred, gt, data_range: float) -> float:
    """Plain PSNR against a caller-supplied dynamic range."""
    if not data_range > 0:
        raise ValidationError("data_range must be positive")
    p, g = _to_f64(pred, gt)
    mse = float(np.mean((p - g) ** 2))
    return _db(mse, float(data_range) ** 2)


def mse(pred, gt) -> float:
    p, g = _to_f64(pred, gt)
    return float(np.mean((p - g) ** 2))


def aggregate(rows: list[MetricRow]) -> dict:
    """Mean and std per metric over the ok rows."""
    ok = [r for r in rows if r.status == "ok"]
    if not ok:
        return {"count": 0}
    out = {"count": len(ok)}
    for name in ("psnr_affine", "psnr_fixed", "mse"):
        vals = np.array([getattr(r, name) for r in ok], dtype=np.float64)
        out[f"{name}_mean"] = float(vals.mean())
        out[f"{name}_std"] = float(vals.std())
    return out
