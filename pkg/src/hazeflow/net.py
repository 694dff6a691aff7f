"""Trainable conditional velocity estimator and its checkpoint container.

The estimator is a small encoder-decoder with skip connections. Time enters
through a sinusoidal embedding passed through a two-layer projection and is
added to the features at every resolution level. The hazy observation
conditions the network either by channel concatenation with the interpolant
(default) or by element-wise addition, in which case the network sees a
single input channel.

Checkpoint files are torch containers holding, under fixed keys:
format_version, arch (ArchSpec fields), conditioning mode, params (tensors
named by layer path), optimizer state, training iteration, normalization
stats, and the training config snapshot.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import CheckpointIncompatibilityError, DataError, ValidationError
from .flow import CONDITIONING_MODES

CHECKPOINT_FORMAT_VERSION = 1
TIME_EMBED_SCALE = 1000.0


@dataclass(frozen=True)
class ArchSpec:
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 64

    def validate(self) -> None:
        if self.base_channels < 4 or self.base_channels % 4 != 0:
            raise ValidationError("base_channels must be a positive multiple of 4")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.time_embed_dim < 4 or self.time_embed_dim % 2 != 0:
            raise ValidationError("time_embed_dim must be an even integer >= 4")


# Profile used throughout the fast tests.
TINY_ARCH = ArchSpec(base_channels=8, depth=2, time_embed_dim=16)


def _num_groups(channels: int) -> int:
    return min(8, channels)


class _DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_num_groups(out_ch), out_ch),
            nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_num_groups(out_ch), out_ch),
            nn.SiLU(),
        )

    def forward(self, x):
        return self.block(x)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of scaled time; t is a (B,) tensor in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(
        -np.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    angles = (t.double() * TIME_EMBED_SCALE)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).to(t.dtype)


class VelocityField(nn.Module):
    """Conditional velocity estimator v(t, x_t, x_cond) -> dx/dt."""

    def __init__(self, arch: ArchSpec, conditioning: str = "concat"):
        super().__init__()
        arch.validate()
        if conditioning not in CONDITIONING_MODES:
            raise ValidationError(f"conditioning must be one of {CONDITIONING_MODES}")
        self.arch = arch
        self.conditioning = conditioning
        self.in_channels = 2 if conditioning == "concat" else 1
        self.out_channels = 1

        c, d, e = arch.base_channels, arch.depth, arch.time_embed_dim
        chans = [c * 2 ** i for i in range(d + 1)]

        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.stem = nn.Conv2d(self.in_channels, c, 3, padding=1)

        self.enc_blocks = nn.ModuleList()
        self.enc_time = nn.ModuleList()
        prev = c
        for i in range(d):
            self.enc_blocks.append(_DoubleConv(prev, chans[i]))
            self.enc_time.append(nn.Linear(e, chans[i]))
            prev = chans[i]
        self.pool = nn.AvgPool2d(2)

        self.mid_block = _DoubleConv(chans[d - 1], chans[d])
        self.mid_time = nn.Linear(e, chans[d])

        self.dec_blocks = nn.ModuleList()
        self.dec_time = nn.ModuleList()
        for i in reversed(range(d)):
            self.dec_blocks.append(_DoubleConv(chans[i + 1] + chans[i], chans[i]))
            self.dec_time.append(nn.Linear(e, chans[i]))
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

        self.head = nn.Conv2d(c, self.out_channels, 1)

    def forward(self, t, x_t: torch.Tensor, x_cond: torch.Tensor) -> torch.Tensor:
        if x_t.ndim != 4 or x_t.shape[1] != 1:
            raise ValidationError(f"x_t must be (B, 1, H, W), got {tuple(x_t.shape)}")
        if tuple(x_cond.shape) != tuple(x_t.shape):
            raise ValidationError(
                f"x_cond shape {tuple(x_cond.shape)} != x_t shape {tuple(x_t.shape)}")
        b, _, h, w = x_t.shape
        div = 2 ** self.arch.depth
        if h % div or w % div:
            raise ValidationError(f"spatial size {h}x{w} not divisible by 2^depth={div}")
        if not torch.is_tensor(t):
            t = torch.full((b,), float(t), dtype=x_t.dtype, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(b)
        if float(t.min()) < 0.0 or float(t.max()) > 1.0:
            raise ValidationError("t must lie in [0, 1]")

        emb = self.time_mlp(sinusoidal_embedding(t, self.arch.time_embed_dim).to(x_t.dtype))

        if self.conditioning == "concat":
            h_feat = self.stem(torch.cat([x_t, x_cond], dim=1))
        else:
            h_feat = self.stem(x_t + x_cond)

        skips = []
        for block, proj in zip(self.enc_blocks, self.enc_time):
            h_feat = block(h_feat) + proj(emb)[:, :, None, None]
            skips.append(h_feat)
            h_feat = self.pool(h_feat)

        h_feat = self.mid_block(h_feat) + self.mid_time(emb)[:, :, None, None]

        for block, proj in zip(self.dec_blocks, self.dec_time):
            h_feat = self.up(h_feat)
            h_feat = torch.cat([h_feat, skips.pop()], dim=1)
            h_feat = block(h_feat) + proj(emb)[:, :, None, None]

        return self.head(h_feat)

    def velocity_fn(self):
        """Numpy-facing closure (t, x, x_cond) -> velocity for the ODE sampler.

        x may be (H, W) or (k, H, W); x_cond may match x or be a single
        (H, W) raster shared across the leading dimension.
        """
        def fn(t: float, x: np.ndarray, x_cond: np.ndarray) -> np.ndarray:
            x = np.asarray(x, dtype=np.float32)
            squeeze = x.ndim == 2
            xb = x[None] if squeeze else x
            cond = np.asarray(x_cond, dtype=np.float32)
            if cond.ndim == 2:
                cond = np.broadcast_to(cond, xb.shape)
            xt = torch.from_numpy(np.ascontiguousarray(xb)).unsqueeze(1)
            ct = torch.from_numpy(np.ascontiguousarray(cond)).unsqueeze(1)
            was_training = self.training
            self.eval()
            try:
                with torch.no_grad():
                    v = self(float(t), xt, ct)
            finally:
                self.train(was_training)
            out = v.squeeze(1).numpy().astype(np.float32)
            return out[0] if squeeze else out

        return fn


def init_params(arch: ArchSpec, seed: int, conditioning: str = "concat") -> VelocityField:
    """Build a velocity field with deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    field = VelocityField(arch, conditioning)
    for name, p in field.named_parameters():
        if not torch.isfinite(p).all():
            raise ValidationError(f"non-finite initial parameter {name}")
    return field


def save_checkpoint(path, field: VelocityField, optimizer=None, iteration: int = 0,
                    norm_stats: dict | None = None, train_config: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": asdict(field.arch),
        "conditioning": field.conditioning,
        "params": field.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "iteration": int(iteration),
        "norm_stats": norm_stats,
        "train_config": train_config,
    }
    torch.save(payload, path)


@dataclass
class LoadedCheckpoint:
    field: VelocityField
    arch: ArchSpec
    conditioning: str
    optimizer_state: dict | None
    iteration: int
    norm_stats: dict | None
    train_config: dict | None


def load_checkpoint(path) -> LoadedCheckpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointIncompatibilityError(
            f"{path}: checkpoint format {version} != supported {CHECKPOINT_FORMAT_VERSION}")
    try:
        arch = ArchSpec(**payload["arch"])
        conditioning = payload["conditioning"]
        field = VelocityField(arch, conditioning)
        field.load_state_dict(payload["params"])
    except CheckpointIncompatibilityError:
        raise
    except Exception as exc:
        raise CheckpointIncompatibilityError(f"{path}: malformed checkpoint ({exc})") from exc
    return LoadedCheckpoint(
        field=field,
        arch=arch,
        conditioning=conditioning,
        optimizer_state=payload.get("optimizer"),
        iteration=int(payload.get("iteration", 0)),
        norm_stats=payload.get("norm_stats"),
        train_config=payload.get("train_config"),
    )
