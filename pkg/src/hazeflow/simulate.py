"""Synthetic paired-data generation: signal synthesis and the optical forward model.

A paired sample is built in three stages. ``gen_signal`` draws a clean 2D
scene of bright objects on a zero background. ``apply_psf`` convolves it with
an isotropic Gaussian kernel whose width grows with the pinhole aperture, so
the same scene can be rendered once sharply ("confocal") and once heavily
hazed ("widefield"). ``add_noise`` applies signal-dependent shot noise plus
Gaussian read noise. Hazy and clean renditions of one scene use independent
noise draws derived from the pair's signal id, so their noise is
statistically identical but uncorrelated.

All operations are pure functions of their inputs and seeds.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import erf

from .errors import ValidationError
from .rasters import as_raster, require_finite, require_same_shape
from .seeding import derive_seed

STRUCTURE_KINDS = ("blobs", "filaments", "mixed")
PSF_MODES = ("confocal", "widefield")

# Effective kernel width: sigma_eff = base_sigma * (1 + PINHOLE_WIDTH_GAIN * pinhole_au).
# The gain is a fixed model constant; only monotonicity in pinhole_au matters.
PINHOLE_WIDTH_GAIN = 0.25

# Shot noise is sampled exactly below this expected count, by a Gaussian above.
POISSON_EXACT_MAX = 1.0e5


@dataclass(frozen=True)
class SignalSpec:
    width: int
    height: int
    structure_kind: str
    object_count_range: tuple[int, int]
    intensity_range: tuple[float, float]
    seed: int

    def validate(self) -> None:
        if self.width < 32 or self.height < 32:
            raise ValidationError("width and height must be >= 32")
        if self.structure_kind not in STRUCTURE_KINDS:
            raise ValidationError(f"structure_kind must be one of {STRUCTURE_KINDS}")
        lo, hi = self.object_count_range
        if not (0 <= lo <= hi):
            raise ValidationError("object_count_range must be a nonempty interval of ints >= 0")
        ilo, ihi = self.intensity_range
        if not (0 < ilo <= ihi):
            raise ValidationError("intensity_range must be strictly positive")


@dataclass(frozen=True)
class PsfSpec:
    mode: str
    pinhole_au: float
    base_sigma: float
    kernel_radius: int | None = None  # None: auto-sized to hold >99.99% of mass

    def validate(self) -> None:
        if self.mode not in PSF_MODES:
            raise ValidationError(f"mode must be one of {PSF_MODES}")
        if not self.pinhole_au > 0:
            raise ValidationError("pinhole_au must be positive")
        if not self.base_sigma > 0:
            raise ValidationError("base_sigma must be positive")
        if self.kernel_radius is not None and self.kernel_radius < 1:
            raise ValidationError("kernel_radius must be >= 1")

    @property
    def sigma_eff(self) -> float:
        return self.base_sigma * (1.0 + PINHOLE_WIDTH_GAIN * self.pinhole_au)


@dataclass(frozen=True)
class NoiseSpec:
    photon_gain: float
    read_sigma: float
    seed: int

    def validate(self) -> None:
        if not self.photon_gain > 0:
            raise ValidationError("photon_gain must be positive")
        if self.read_sigma < 0:
            raise ValidationError("read_sigma must be non-negative")


@dataclass
class PairedSample:
    hazy: np.ndarray
    clean: np.ndarray
    signal_id: int


@dataclass(frozen=True)
class RoleStats:
    mean: float
    std: float


@dataclass(frozen=True)
class NormStats:
    hazy: RoleStats
    clean: RoleStats

    def to_dict(self) -> dict:
        return {
            "hazy": {"mean": self.hazy.mean, "std": self.hazy.std},
            "clean": {"mean": self.clean.mean, "std": self.clean.std},
        }

    @staticmethod
    def from_dict(d: dict) -> "NormStats":
        return NormStats(
            hazy=RoleStats(float(d["hazy"]["mean"]), float(d["hazy"]["std"])),
            clean=RoleStats(float(d["clean"]["mean"]), float(d["clean"]["std"])),
        )


def _paint_ellipse(canvas: np.ndarray, cy: float, cx: float, a: float, b: float,
                   theta: float, value: float) -> None:
    h, w = canvas.shape
    r = int(np.ceil(max(a, b))) + 1
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    region = canvas[y0:y1, x0:x1]
    region[mask] = np.maximum(region[mask], value)


def _paint_filament(canvas: np.ndarray, rng: np.random.Generator, value: float) -> None:
    h, w = canvas.shape
    n_steps = int(rng.uniform(0.4, 0.9) * min(h, w))
    y = rng.uniform(2, h - 2)
    x = rng.uniform(2, w - 2)
    phi = rng.uniform(0, 2 * np.pi)
    thickness = rng.uniform(1.0, 2.2)
    r = int(np.ceil(thickness))
    disk_y, disk_x = np.mgrid[-r:r + 1, -r:r + 1]
    for _ in range(n_steps):
        phi += rng.normal(0.0, 0.15)
        y = float(np.clip(y + np.sin(phi), 1, h - 2))
        x = float(np.clip(x + np.cos(phi), 1, w - 2))
        iy, ix = int(round(y)), int(round(x))
        y0, y1 = max(0, iy - r), min(h, iy + r + 1)
        x0, x1 = max(0, ix - r), min(w, ix + r + 1)
        sy0, sx0 = y0 - (iy - r), x0 - (ix - r)
        mask = (disk_y ** 2 + disk_x ** 2 <= thickness ** 2)[sy0:sy0 + (y1 - y0), sx0:sx0 + (x1 - x0)]
        region = canvas[y0:y1, x0:x1]
        region[mask] = np.maximum(region[mask], value)


def gen_signal(spec: SignalSpec) -> np.ndarray:
    """Render a synthetic scene; deterministic in spec.seed.

    Objects are painted with a constant per-object intensity drawn from
    intensity_range, so every pixel is either exact background (0) or one of
    the object intensities. Blobs are placed without overlap so each remains
    a distinct connected component; filaments may cross.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    canvas = np.zeros((h, w), dtype=np.float32)

    lo, hi = spec.object_count_range
    count = int(rng.integers(lo, hi + 1))
    ilo, ihi = spec.intensity_range

    if spec.structure_kind == "blobs":
        kinds = ["blob"] * count
    elif spec.structure_kind == "filaments":
        kinds = ["filament"] * count
    else:
        kinds = [("blob" if rng.random() < 0.5 else "filament") for _ in range(count)]

    placed: list[tuple[float, float, float]] = []  # (cy, cx, bounding radius)
    max_r = max(3.0, min(h, w) / 10.0)
    for kind in kinds:
        value = float(rng.uniform(ilo, ihi))
        if kind == "filament":
            _paint_filament(canvas, rng, value)
            continue
        for attempt in range(200):
            a = rng.uniform(2.5, max_r)
            b = a * rng.uniform(0.65, 1.0)
            theta = rng.uniform(0, np.pi)
            cy = rng.uniform(a + 1, h - a - 1)
            cx = rng.uniform(a + 1, w - a - 1)
            if all(np.hypot(cy - py, cx - px) > a + pr + 2.0 for py, px, pr in placed):
                _paint_ellipse(canvas, cy, cx, a, b, theta, value)
                placed.append((cy, cx, a))
                break
        else:
            raise ValidationError(
                f"could not place {count} non-overlapping blobs on a {h}x{w} canvas")
    return canvas


def make_psf(spec: PsfSpec) -> np.ndarray:
    """Build the normalized isotropic Gaussian kernel for a PSF spec.

    Weights integrate the Gaussian over pixel bins, so the small-sigma limit
    is a discrete delta. Raises if the requested radius would truncate more
    than 1% of the kernel mass.
    """
    spec.validate()
    sigma = spec.sigma_eff
    radius = spec.kernel_radius
    if radius is None:
        radius = max(1, int(np.ceil(4.0 * sigma)))
    # Mass retained inside the window, per axis, for the bin-integrated Gaussian.
    frac_1d = float(erf((radius + 0.5) / (sigma * np.sqrt(2.0))))
    if frac_1d ** 2 < 0.99:
        raise ValidationError(
            f"kernel_radius={radius} holds only {frac_1d ** 2:.4f} of the PSF mass "
            f"(sigma_eff={sigma:.3f}); need >= 0.99")
    edges = np.arange(-radius - 0.5, radius + 1.5)
    cdf = 0.5 * (1.0 + erf(edges / (sigma * np.sqrt(2.0))))
    w1d = np.diff(cdf)
    kernel = np.outer(w1d, w1d)
    kernel /= kernel.sum()
    return kernel.astype(np.float64)


def apply_psf(signal: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Convolve with reflect padding; output shape equals input shape."""
    sig = as_raster(signal, "signal")
    require_finite(sig, "signal")
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValidationError("kernel must be 2D with odd dimensions")
    if abs(k.sum() - 1.0) > 1e-6:
        raise ValidationError("kernel must be normalized to unit sum")
    ry, rx = k.shape[0] // 2, k.shape[1] // 2
    if k[ry, rx] == 1.0 and np.count_nonzero(k) == 1:
        return sig.copy()  # exact delta: skip FFT round-off
    padded = np.pad(sig.astype(np.float64), ((ry, ry), (rx, rx)), mode="reflect")
    out = fftconvolve(padded, k, mode="valid")
    return out.astype(np.float32)


def add_noise(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Shot noise at photon_gain photons per intensity unit, plus read noise.

    photon_gain=inf disables shot noise exactly (the infinite-photon limit).
    """
    spec.validate()
    img = as_raster(image, "image")
    require_finite(img, "image")
    if np.any(img < 0):
        raise ValidationError("add_noise requires a non-negative image")
    rng = np.random.default_rng(spec.seed)
    if np.isinf(spec.photon_gain):
        out = img.astype(np.float64)
    else:
        lam = img.astype(np.float64) * spec.photon_gain
        exact = lam < POISSON_EXACT_MAX
        counts = np.where(
            exact,
            rng.poisson(np.where(exact, lam, 0.0)),
            rng.normal(lam, np.sqrt(np.where(exact, 1.0, lam))),
        )
        out = counts / spec.photon_gain
    if spec.read_sigma > 0:
        out = out + rng.normal(0.0, spec.read_sigma, size=img.shape)
    return out.astype(np.float32)


def make_pair(signal: np.ndarray, hazy_psf: PsfSpec, clean_psf: PsfSpec,
              noise: NoiseSpec, signal_id: int = 0) -> PairedSample:
    """Render one (hazy, clean) pair from a shared signal realization.

    The two renditions take independent noise draws from child seeds
    derived from (noise.seed, signal_id, role).
    """
    hazy_blur = apply_psf(signal, make_psf(hazy_psf))
    clean_blur = apply_psf(signal, make_psf(clean_psf))
    # Blur can undershoot slightly at FFT precision; shot noise needs >= 0.
    hazy_blur = np.maximum(hazy_blur, 0.0)
    clean_blur = np.maximum(clean_blur, 0.0)
    hazy = add_noise(hazy_blur, dataclasses.replace(noise, seed=derive_seed(noise.seed, signal_id, 0)))
    clean = add_noise(clean_blur, dataclasses.replace(noise, seed=derive_seed(noise.seed, signal_id, 1)))
    return PairedSample(hazy=hazy, clean=clean, signal_id=signal_id)


def compute_norm_stats(dataset: list[PairedSample]) -> NormStats:
    """Per-role mean/std over every pixel of the dataset."""
    if not dataset:
        raise ValidationError("dataset is empty")
    stats = {}
    for role in ("hazy", "clean"):
        pixels = np.concatenate([getattr(p, role).ravel().astype(np.float64) for p in dataset])
        mean = float(pixels.mean())
        std = float(pixels.std())
        if std <= 0:
            raise ValidationError(f"{role} pixels are constant; zero std")
        stats[role] = RoleStats(mean=mean, std=std)
    return NormStats(hazy=stats["hazy"], clean=stats["clean"])


def normalize(x: np.ndarray, stats: RoleStats) -> np.ndarray:
    return ((np.asarray(x, dtype=np.float32) - stats.mean) / stats.std).astype(np.float32)


def denormalize(x: np.ndarray, stats: RoleStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) * stats.std + stats.mean).astype(np.float32)
