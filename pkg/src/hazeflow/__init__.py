"""Guided conditional flow matching for dehazing paired microscopy-style images."""

__version__ = "0.1.0"

from .calibration import (CalibrationCurve, CalibrationFit, apply_calibration,
                          build_curve, fit_calibration, sample_efficiency_sweep)
from .flow import (FlowBatch, TrainConfig, guided_cfm_loss, interpolate,
                   make_flow_batch, sample_time, sifm_base_sample,
                   target_velocity, training_step)
from .metrics import psnr_affine, psnr_fixed
from .net import ArchSpec, TINY_ARCH, VelocityField, init_params, load_checkpoint, save_checkpoint
from .sampling import (PosteriorSet, SamplerConfig, euler_integrate,
                       mmse_mse_bound_check, sample_posterior)
from .simulate import (NoiseSpec, NormStats, PairedSample, PsfSpec, SignalSpec,
                       add_noise, apply_psf, compute_norm_stats, denormalize,
                       gen_signal, make_pair, make_psf, normalize)
from .tiling import TileGrid, plan_tiles, predict_tiled, sample_posterior_tiled

__all__ = [
    "ArchSpec", "CalibrationCurve", "CalibrationFit", "FlowBatch", "NoiseSpec",
    "NormStats", "PairedSample", "PosteriorSet", "PsfSpec", "SamplerConfig",
    "SignalSpec", "TINY_ARCH", "TileGrid", "TrainConfig", "VelocityField",
    "add_noise", "apply_calibration", "apply_psf", "build_curve",
    "compute_norm_stats", "denormalize", "euler_integrate", "fit_calibration",
    "gen_signal", "guided_cfm_loss", "init_params", "interpolate",
    "load_checkpoint", "make_flow_batch", "make_pair", "make_psf",
    "mmse_mse_bound_check", "normalize", "plan_tiles", "predict_tiled",
    "psnr_affine", "psnr_fixed", "sample_efficiency_sweep", "sample_posterior",
    "sample_posterior_tiled", "sample_time", "save_checkpoint",
    "sifm_base_sample", "target_velocity", "training_step",
]
