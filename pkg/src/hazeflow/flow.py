"""Interpolation path, velocity targets, and the guided training objective.

The transport path blends a standard-normal base draw ``x0`` into the clean
target ``x1`` linearly: ``x_t = (1 - t) * x0 + t * x1``. Its velocity
``x1 - x0`` is constant in t and is what the conditional velocity estimator
regresses, given the interpolant and the hazy observation as conditioning.
Training draws t uniformly from the discrete grid {i/T : i = 0..T} by
default; continuous U[0,1] sampling is available behind a config flag for
ablation.

Array operations here are backend-agnostic: they accept numpy arrays or
torch tensors and return the same kind.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import TrainingDivergenceError, ValidationError

CONDITIONING_MODES = ("concat", "add")
TIME_SAMPLING_MODES = ("grid", "continuous")
COUPLING_MODES = ("gaussian", "sifm")

GRAD_CLIP_NORM = 1.0  # global-norm clip; guards toy-scale runs against rare divergence


@dataclass(frozen=True)
class TrainConfig:
    steps_t: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    patch_size: int = 64
    max_iterations: int = 2000
    seed: int = 0
    conditioning: str = "concat"
    time_sampling: str = "grid"
    coupling: str = "gaussian"
    sifm_sigma: float = 0.0
    checkpoint_interval: int = 500
    val_interval: int = 250

    def validate(self) -> None:
        if self.steps_t < 1:
            raise ValidationError("steps_t must be >= 1")
        if self.batch_size < 1 or self.patch_size < 1:
            raise ValidationError("batch_size and patch_size must be positive")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.max_iterations < 0:
            raise ValidationError("max_iterations must be non-negative")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValidationError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.time_sampling not in TIME_SAMPLING_MODES:
            raise ValidationError(f"time_sampling must be one of {TIME_SAMPLING_MODES}")
        if self.coupling not in COUPLING_MODES:
            raise ValidationError(f"coupling must be one of {COUPLING_MODES}")
        if self.sifm_sigma < 0:
            raise ValidationError("sifm_sigma must be non-negative")


@dataclass
class FlowBatch:
    """One training batch; all tensors share the (B, 1, H, W) layout except t (B,)."""

    x0: torch.Tensor
    x1: torch.Tensor
    x_cond: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    v_target: torch.Tensor


def _check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValidationError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def sample_time(steps_t: int, rng: np.random.Generator, size: int | None = None):
    """Uniform draw from the discrete grid {0, 1/T, ..., 1}; scalar or array."""
    if steps_t < 1:
        raise ValidationError("steps_t must be >= 1")
    idx = rng.integers(0, steps_t + 1, size=size)
    if size is None:
        return float(idx) / steps_t
    return idx / steps_t


def sample_time_continuous(steps_t: int, rng: np.random.Generator, size: int | None = None):
    """Ablation mode: continuous U[0,1]; steps_t accepted for signature parity."""
    if steps_t < 1:
        raise ValidationError("steps_t must be >= 1")
    return rng.uniform(0.0, 1.0, size=size)


def interpolate(x0, x1, t):
    """(1 - t) * x0 + t * x1 elementwise; t scalar or broadcastable to x0."""
    _check_same_shape(x0, x1)
    tmin = float(np.min(t)) if not torch.is_tensor(t) else float(t.min())
    tmax = float(np.max(t)) if not torch.is_tensor(t) else float(t.max())
    if tmin < 0.0 or tmax > 1.0:
        raise ValidationError(f"t must lie in [0, 1], got range [{tmin}, {tmax}]")
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1):
    """Constant-in-t velocity of the linear path: x1 - x0."""
    _check_same_shape(x0, x1)
    return x1 - x0


def guided_cfm_loss(v_pred, v_target):
    """Mean squared error over all pixels; returns a backend scalar."""
    _check_same_shape(v_pred, v_target)
    return ((v_pred - v_target) ** 2).mean()


def sifm_base_sample(x1: np.ndarray, degradation: np.ndarray, sigma: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Degradation-anchored base draw: degradation + sigma * N(0, I)."""
    _check_same_shape(x1, degradation)
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    base = np.asarray(degradation, dtype=np.float32)
    if sigma == 0:
        return base.copy()
    return (base + sigma * rng.standard_normal(base.shape)).astype(np.float32)


def make_flow_batch(hazy: np.ndarray, clean: np.ndarray, rng: np.random.Generator,
                    cfg: TrainConfig) -> FlowBatch:
    """Assemble one batch from normalized (N, H, W) stacks of paired images.

    Draws images with replacement, crops random patches when patch_size is
    smaller than the frames, samples per-element t and base noise, and fills
    the interpolant and its target velocity.
    """
    n, h, w = hazy.shape
    p = cfg.patch_size
    if p > h or p > w:
        raise ValidationError(f"patch_size {p} exceeds image size {h}x{w}")
    idx = rng.integers(0, n, size=cfg.batch_size)
    ys = rng.integers(0, h - p + 1, size=cfg.batch_size)
    xs = rng.integers(0, w - p + 1, size=cfg.batch_size)
    x_cond = np.stack([hazy[i, y:y + p, x:x + p] for i, y, x in zip(idx, ys, xs)])
    x1 = np.stack([clean[i, y:y + p, x:x + p] for i, y, x in zip(idx, ys, xs)])

    if cfg.time_sampling == "grid":
        t = sample_time(cfg.steps_t, rng, size=cfg.batch_size)
    else:
        t = sample_time_continuous(cfg.steps_t, rng, size=cfg.batch_size)

    noise = rng.standard_normal(x1.shape).astype(np.float32)
    if cfg.coupling == "sifm":
        # Degradation-anchored coupling; the hazy observation stands in for m(x1).
        x0 = x_cond + cfg.sifm_sigma * noise
    else:
        x0 = noise

    x0_t = torch.from_numpy(x0).unsqueeze(1).float()
    x1_t = torch.from_numpy(x1).unsqueeze(1).float()
    cond_t = torch.from_numpy(x_cond).unsqueeze(1).float()
    t_t = torch.from_numpy(np.asarray(t)).float()
    t_b = t_t.view(-1, 1, 1, 1)
    x_t = interpolate(x0_t, x1_t, t_b)
    v_target = target_velocity(x0_t, x1_t)
    return FlowBatch(x0=x0_t, x1=x1_t, x_cond=cond_t, t=t_t, x_t=x_t, v_target=v_target)


def training_step(field: torch.nn.Module, optimizer: torch.optim.Optimizer,
                  batch: FlowBatch) -> float:
    """One gradient step on the guided objective; returns the scalar loss."""
    field.train()
    optimizer.zero_grad(set_to_none=True)
    v_pred = field(batch.t, batch.x_t, batch.x_cond)
    loss = guided_cfm_loss(v_pred, batch.v_target)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise TrainingDivergenceError(
            f"non-finite loss {value} (t range [{float(batch.t.min()):.3f}, "
            f"{float(batch.t.max()):.3f}])")
    loss.backward()
    torch.nn.utils.clip_grad_norm_(field.parameters(), GRAD_CLIP_NORM)
    optimizer.step()
    return value
