import math

import numpy as np
import pytest
from scipy import ndimage

from hazeflow.errors import ValidationError
from hazeflow.simulate import (NoiseSpec, NormStats, PsfSpec, RoleStats,
                               SignalSpec, add_noise, apply_psf,
                               compute_norm_stats, denormalize, gen_signal,
                               make_pair, make_psf, normalize)


def blob_spec(count=(5, 5), seed=7, size=64):
    return SignalSpec(width=size, height=size, structure_kind="blobs",
                      object_count_range=count, intensity_range=(80.0, 200.0),
                      seed=seed)


class TestGenSignal:
    def test_zero_count_gives_background_only(self):
        sig = gen_signal(blob_spec(count=(0, 0)))
        assert np.array_equal(sig, np.zeros((64, 64), np.float32))

    def test_deterministic_given_seed(self):
        a = gen_signal(blob_spec())
        b = gen_signal(blob_spec())
        assert np.array_equal(a, b)

    def test_seeds_differ(self):
        a = gen_signal(blob_spec(seed=1))
        b = gen_signal(blob_spec(seed=2))
        assert not np.array_equal(a, b)

    def test_blob_count_matches_flood_fill_oracle(self):
        # Independent oracle: connected-component count of the bright mask.
        sig = gen_signal(blob_spec(count=(5, 5), seed=7))
        _, n_components = ndimage.label(sig > 0)
        assert n_components == 5

    @pytest.mark.parametrize("kind", ["blobs", "filaments", "mixed"])
    def test_intensities_in_range_or_zero(self, kind):
        spec = SignalSpec(64, 64, kind, (3, 6), (80.0, 200.0), seed=11)
        sig = gen_signal(spec)
        fg = sig[sig > 0]
        assert fg.size > 0
        assert np.all((fg >= 80.0) & (fg <= 200.0))

    @pytest.mark.parametrize("bad", [
        dict(width=16), dict(height=8), dict(structure_kind="donuts"),
        dict(object_count_range=(4, 2)), dict(intensity_range=(0.0, 5.0)),
        dict(intensity_range=(5.0, 1.0)),
    ])
    def test_invalid_spec_rejected(self, bad):
        base = dict(width=64, height=64, structure_kind="blobs",
                    object_count_range=(3, 5), intensity_range=(50.0, 100.0),
                    seed=0)
        base.update(bad)
        with pytest.raises(ValidationError):
            gen_signal(SignalSpec(**base))


class TestMakePsf:
    def test_delta_in_vanishing_width_limit(self):
        k = make_psf(PsfSpec("confocal", pinhole_au=1e-9, base_sigma=1e-9))
        expect = np.zeros_like(k)
        expect[k.shape[0] // 2, k.shape[1] // 2] = 1.0
        assert np.array_equal(k, expect)

    @pytest.mark.parametrize("pinhole,base", [(0.5, 0.3), (1.0, 1.0), (30.0, 0.5)])
    def test_unit_sum(self, pinhole, base):
        k = make_psf(PsfSpec("widefield", pinhole, base))
        assert abs(k.sum() - 1.0) <= 1e-6

    def test_second_moment_monotone_in_pinhole(self):
        # Direct moment computation as the oracle.
        def moment(kernel):
            r = kernel.shape[0] // 2
            yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
            return float((kernel * (yy ** 2 + xx ** 2)).sum())

        wide = make_psf(PsfSpec("widefield", 30.0, 0.5))
        narrow = make_psf(PsfSpec("widefield", 1.0, 0.5))
        assert moment(wide) > moment(narrow)

        moments = [moment(make_psf(PsfSpec("widefield", au, 0.5)))
                   for au in (0.5, 1, 2, 5, 10, 30)]
        assert all(b > a for a, b in zip(moments, moments[1:]))

    def test_truncation_error(self):
        with pytest.raises(ValidationError, match="mass"):
            make_psf(PsfSpec("widefield", 30.0, 0.5, kernel_radius=2))

    def test_radial_symmetry(self):
        k = make_psf(PsfSpec("widefield", 3.0, 0.8))
        assert np.allclose(k, k.T)
        assert np.allclose(k, k[::-1, :])
        assert np.allclose(k, k[:, ::-1])

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            make_psf(PsfSpec("lightsheet", 1.0, 1.0))


class TestApplyPsf:
    def test_delta_image_returns_centered_kernel(self):
        k = make_psf(PsfSpec("widefield", 2.0, 0.6))
        r = k.shape[0] // 2
        img = np.zeros((33, 33), np.float32)
        img[16, 16] = 1.0
        out = apply_psf(img, k)
        assert np.allclose(out[16 - r:16 + r + 1, 16 - r:16 + r + 1], k, atol=1e-7)

    def test_constant_preserved(self):
        k = make_psf(PsfSpec("widefield", 4.0, 0.5))
        out = apply_psf(np.full((40, 40), 3.25, np.float32), k)
        assert np.allclose(out, 3.25, atol=1e-5)

    def test_interior_mass_preserved(self):
        # Reflect-pad oracle: with zero margin wider than the kernel radius,
        # nothing reflects back, so total intensity is conserved.
        k = make_psf(PsfSpec("widefield", 2.0, 0.5))
        r = k.shape[0] // 2
        rng = np.random.default_rng(0)
        img = np.zeros((64, 64), np.float32)
        img[r + 2:-(r + 2), r + 2:-(r + 2)] = rng.uniform(0, 10, (64 - 2 * r - 4,) * 2)
        out = apply_psf(img, k)
        assert abs(out.sum() - img.sum()) / img.sum() < 1e-4

    def test_nonfinite_rejected(self):
        k = make_psf(PsfSpec("widefield", 1.0, 0.5))
        img = np.zeros((32, 32), np.float32)
        img[0, 0] = np.nan
        with pytest.raises(ValidationError):
            apply_psf(img, k)

    def test_unnormalized_kernel_rejected(self):
        with pytest.raises(ValidationError):
            apply_psf(np.zeros((32, 32), np.float32), np.ones((3, 3)))


class TestAddNoise:
    def test_vanishing_noise_limit(self):
        img = np.full((16, 16), 5.0, np.float32)
        out = add_noise(img, NoiseSpec(photon_gain=1e12, read_sigma=0.0, seed=3))
        assert np.allclose(out, img, atol=1e-4)

    def test_infinite_gain_is_exact(self):
        img = np.full((16, 16), 5.0, np.float32)
        out = add_noise(img, NoiseSpec(photon_gain=math.inf, read_sigma=0.0, seed=3))
        assert np.array_equal(out, img)

    def test_zero_image_stays_zero(self):
        out = add_noise(np.zeros((16, 16), np.float32),
                        NoiseSpec(photon_gain=2.0, read_sigma=0.0, seed=1))
        assert np.array_equal(out, np.zeros((16, 16), np.float32))

    def test_monte_carlo_mean(self):
        # Monte Carlo oracle: grand mean of repeated draws approaches the image.
        img = np.full((8, 8), 5.0, np.float32)
        gain, read = 1.0, 1.0
        n_draws = 10_000
        total = 0.0
        for i in range(n_draws):
            total += add_noise(img, NoiseSpec(gain, read, seed=i)).mean()
        grand_mean = total / n_draws
        se = math.sqrt((5.0 / gain + read ** 2) / (n_draws * img.size))
        assert abs(grand_mean - 5.0) <= 3 * se

    def test_deterministic(self):
        img = np.full((16, 16), 7.0, np.float32)
        spec = NoiseSpec(1.5, 0.5, seed=42)
        assert np.array_equal(add_noise(img, spec), add_noise(img, spec))

    def test_negative_input_rejected(self):
        with pytest.raises(ValidationError):
            add_noise(np.full((8, 8), -1.0, np.float32), NoiseSpec(1.0, 0.0, seed=0))


class TestMakePair:
    def test_identity_pipeline(self):
        # Near-zero-width clean PSF plus disabled noise reproduces the signal.
        sig = gen_signal(blob_spec())
        pair = make_pair(sig, PsfSpec("widefield", 30.0, 0.5),
                         PsfSpec("confocal", 1e-9, 1e-9),
                         NoiseSpec(math.inf, 0.0, seed=0), signal_id=1)
        assert np.array_equal(pair.clean, sig)

    def test_noise_draws_independent(self):
        sig = gen_signal(blob_spec())
        psf = PsfSpec("widefield", 1.0, 0.5)
        pair = make_pair(sig, psf, psf, NoiseSpec(1.0, 1.0, seed=5), signal_id=0)
        assert not np.array_equal(pair.hazy, pair.clean)

    def test_pair_deterministic(self):
        sig = gen_signal(blob_spec())
        psf_h = PsfSpec("widefield", 10.0, 0.5)
        psf_c = PsfSpec("confocal", 0.5, 0.3)
        noise = NoiseSpec(1.0, 1.0, seed=5)
        a = make_pair(sig, psf_h, psf_c, noise, signal_id=2)
        b = make_pair(sig, psf_h, psf_c, noise, signal_id=2)
        assert np.array_equal(a.hazy, b.hazy) and np.array_equal(a.clean, b.clean)

    def test_variance_matches_forward_model(self):
        # Monte Carlo oracle: Var[hazy - blur(s)] == blur(s)/gain + read^2.
        sig = gen_signal(SignalSpec(32, 32, "blobs", (3, 3), (50.0, 100.0), seed=2))
        psf = PsfSpec("widefield", 2.0, 0.5)
        blurred = apply_psf(sig, make_psf(psf))
        gain, read = 0.5, 1.0
        draws = np.stack([
            make_pair(sig, psf, psf, NoiseSpec(gain, read, seed=i), signal_id=i).hazy
            for i in range(1000)
        ])
        resid_var = draws.astype(np.float64).var(axis=0)
        expected = np.maximum(blurred, 0.0) / gain + read ** 2
        ratio = resid_var / expected
        assert abs(ratio.mean() - 1.0) < 0.03
        assert ratio.min() > 0.75 and ratio.max() < 1.3

    def test_noise_independence_correlation(self):
        # Residual correlation between hazy and clean noise over >= 1e5 pixels.
        psf = PsfSpec("widefield", 1.0, 0.5)
        kernel = make_psf(psf)
        hazy_res, clean_res = [], []
        for i in range(32):
            sig = gen_signal(SignalSpec(64, 64, "blobs", (4, 6), (50, 150), seed=i))
            blur = apply_psf(sig, kernel)
            pair = make_pair(sig, psf, psf, NoiseSpec(1.0, 1.0, seed=77), signal_id=i)
            hazy_res.append((pair.hazy - blur).ravel())
            clean_res.append((pair.clean - blur).ravel())
        h = np.concatenate(hazy_res)
        c = np.concatenate(clean_res)
        assert h.size >= 100_000
        rho = np.corrcoef(h, c)[0, 1]
        assert abs(rho) < 0.05


class TestNormStats:
    def test_mean_of_two_images(self):
        from hazeflow.simulate import PairedSample
        zeros = np.zeros((32, 32), np.float32)
        twos = np.full((32, 32), 2.0, np.float32)
        pairs = [PairedSample(hazy=zeros, clean=zeros, signal_id=0),
                 PairedSample(hazy=twos, clean=twos, signal_id=1)]
        stats = compute_norm_stats(pairs)
        assert stats.hazy.mean == pytest.approx(1.0)
        assert stats.clean.mean == pytest.approx(1.0)

    def test_roundtrip(self, rng):
        stats = RoleStats(mean=12.5, std=3.75)
        x = rng.uniform(0, 100, (64, 64)).astype(np.float32)
        back = denormalize(normalize(x, stats), stats)
        assert np.allclose(back, x, rtol=1e-6, atol=1e-5)

    def test_sampling_oracle_standard_normal(self):
        from hazeflow.simulate import PairedSample
        rng = np.random.default_rng(9)
        img = rng.standard_normal((1000, 1000)).astype(np.float32)
        stats = compute_norm_stats([PairedSample(hazy=img, clean=img, signal_id=0)])
        assert abs(stats.hazy.mean) < 0.05
        assert abs(stats.hazy.std - 1.0) < 0.05

    def test_constant_dataset_rejected(self):
        from hazeflow.simulate import PairedSample
        ones = np.ones((32, 32), np.float32)
        with pytest.raises(ValidationError, match="zero std"):
            compute_norm_stats([PairedSample(hazy=ones, clean=ones, signal_id=0)])

    def test_stats_dict_roundtrip(self):
        stats = NormStats(hazy=RoleStats(1.0, 2.0), clean=RoleStats(3.0, 4.0))
        assert NormStats.from_dict(stats.to_dict()) == stats
