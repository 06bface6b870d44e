import math

import numpy as np
import pytest

from holomux.config import ExperimentConfig, build_mode_grid
from holomux.errors import ParameterError
from holomux.geometry import Angle2D, wavevector_from_angle
from holomux.memory import (
    REGION_ANTISTOKES,
    REGION_STOKES,
    detect,
    draw_pair_counts,
    read_intensity_envelope,
    run_shot,
    sample_noise,
    sample_write,
    shot_rng,
    storage_survival,
)


def thermal_pmf(zeta, n):
    return zeta**n / (1.0 + zeta) ** (n + 1)


class TestThermalStatistics:
    def test_vacuum(self):
        rng = shot_rng(1, 0)
        counts = draw_pair_counts(0.0, 1000, rng)
        assert np.all(counts == 0)

    def test_single_mode_distribution_chi2(self):
        zeta = 0.18
        rng = shot_rng(7, 0)
        counts = draw_pair_counts(zeta, 200_000, rng)
        kmax = 8
        observed = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1)
        expected = np.array([thermal_pmf(zeta, k) for k in range(kmax)])
        expected = np.append(expected, 1.0 - expected.sum()) * counts.size
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        # dof = kmax; 99.9th percentile of chi2(8) is 26.1
        assert chi2 < 26.1
        assert counts.mean() == pytest.approx(zeta, abs=3 * math.sqrt(zeta * (1 + zeta) / counts.size))

    def test_mean_total_is_modes_times_zeta(self):
        cfg = ExperimentConfig(modes=100, zeta=0.01, fov_mrad=10.0)
        grid = build_mode_grid(cfg)
        rng = shot_rng(3, 1)
        shots = 30_000
        total = sum(sum(e.pair_count for e in sample_write(cfg, grid, rng))
                    for _ in range(shots))
        mean = total / shots
        sigma = math.sqrt(100 * 0.01 * 1.01 / shots)
        assert abs(mean - 1.0) < 3 * sigma

    def test_mode_independence(self):
        cfg = ExperimentConfig(modes=16, zeta=0.2, fov_mrad=4.0)
        grid = build_mode_grid(cfg)
        rng = shot_rng(11, 0)
        shots = 20_000
        samples = np.empty((shots, 16), dtype=np.int64)
        for s in range(shots):
            row = np.zeros(16, dtype=np.int64)
            for exc in sample_write(cfg, grid, rng):
                idx = np.argmin((grid.centers_x - exc.mode_center.theta_x) ** 2
                                + (grid.centers_y - exc.mode_center.theta_y) ** 2)
                row[idx] = exc.pair_count
            samples[s] = row
        cov = np.cov(samples.T)
        off = cov[~np.eye(16, dtype=bool)]
        # correlation fluctuates as 1/sqrt(shots) around zero
        var = np.diag(cov)
        corr = off / math.sqrt(float(var.mean()) ** 2)
        assert np.abs(corr).max() < 5.0 / math.sqrt(shots)

    def test_rejects_unphysical_occupancy(self):
        rng = shot_rng(0, 0)
        with pytest.raises(ParameterError):
            draw_pair_counts(1.0, 10, rng)


class TestStorageSurvival:
    def test_no_storage_no_loss(self):
        k = wavevector_from_angle(Angle2D(12.0, 5.0), 795e-9)
        assert storage_survival(k, 1e-4, 0.0) == 1.0

    def test_uniform_spin_wave_immune(self):
        k = wavevector_from_angle(Angle2D(0.0, 0.0), 795e-9)
        assert storage_survival(k, 1e-4, 1.0) == 1.0

    def test_hand_evaluated_decay(self):
        k = wavevector_from_angle(Angle2D(10.0, 0.0), 795e-9)
        assert float(storage_survival(k, 1e-4, 1e-6)) == pytest.approx(0.287, abs=0.001)

    def test_multiplicative_in_time(self):
        k = wavevector_from_angle(Angle2D(7.0, -3.0), 795e-9)
        a = float(storage_survival(k, 2e-4, 0.7e-6)) * float(storage_survival(k, 2e-4, 1.4e-6))
        b = float(storage_survival(k, 2e-4, 2.1e-6))
        assert a == pytest.approx(b, rel=1e-12)

    def test_rejects_negative(self):
        k = wavevector_from_angle(Angle2D(1.0, 0.0), 795e-9)
        with pytest.raises(ParameterError):
            storage_survival(k, -1e-4, 1e-6)


class TestReadEnvelope:
    def test_at_zero(self):
        assert read_intensity_envelope(0.0, 3.82e6) == 1.0

    def test_hand_evaluated(self):
        assert read_intensity_envelope(500e-9, 3.82e6) == pytest.approx(0.148, abs=0.001)

    def test_monotone(self):
        t = np.linspace(0, 2e-6, 50)
        env = read_intensity_envelope(t, 3.82e6)
        assert np.all(np.diff(env) < 0)

    def test_rejects_negative_time(self):
        with pytest.raises(ParameterError):
            read_intensity_envelope(-1e-9, 3.82e6)


class TestShotComposition:
    def test_no_read_when_eta_zero(self):
        cfg = ExperimentConfig(modes=25, zeta=0.3, eta_read=0.0, fov_mrad=3.0,
                               noise_rate=0.0, dark_rate=0.0)
        rec = run_shot(cfg, 0, 5)
        assert rec.antistokes_events == []

    def test_ideal_phase_matching(self):
        cfg = ExperimentConfig(modes=25, zeta=0.3, eta_read=1.0, eta_t=1.0, qe=1.0,
                               sigma_corr_mrad=0.0, sigma_kernel_mrad=0.0,
                               tau_s=0.0, fov_mrad=3.0, noise_rate=0.0, dark_rate=0.0)
        grid = build_mode_grid(cfg)
        centers = set(zip(grid.centers_x, grid.centers_y))
        found_pairs = 0
        for shot in range(50):
            rec = run_shot(cfg, shot, 9)
            for si, ai in rec.truth:
                s = rec.stokes_events[si].angle
                a = rec.antistokes_events[ai].angle
                assert a.theta_x == pytest.approx(-s.theta_x, abs=1e-12)
                assert a.theta_y == pytest.approx(-s.theta_y, abs=1e-12)
                assert (s.theta_x, s.theta_y) in centers
                found_pairs += 1
        assert found_pairs > 50

    def test_truth_pair_angular_spread(self):
        cfg = ExperimentConfig(modes=36, zeta=0.3, eta_read=1.0, eta_t=1.0, qe=1.0,
                               sigma_corr_mrad=0.41, sigma_kernel_mrad=0.11,
                               fov_mrad=3.0, noise_rate=0.0, dark_rate=0.0)
        sums = []
        for shot in range(3000):
            rec = run_shot(cfg, shot, 21)
            for si, ai in rec.truth:
                s, a = rec.stokes_events[si].angle, rec.antistokes_events[ai].angle
                # skip modes near the field-of-view edge, where the camera
                # acceptance truncates the blur distribution
                cx = (s.theta_x - a.theta_x) / 2
                cy = (s.theta_y - a.theta_y) / 2
                if max(abs(cx), abs(cy)) > cfg.fov_mrad - 2.0:
                    continue
                sums.append((s.theta_x + a.theta_x, s.theta_y + a.theta_y))
        sums = np.asarray(sums)
        expected = math.hypot(0.41, 0.11)
        got = sums.std(axis=0, ddof=1)
        n = len(sums)
        tol = 4 * expected / math.sqrt(2 * n)
        assert abs(got[0] - expected) < tol and abs(got[1] - expected) < tol
        # genuine pairs stay within 5 sigma_corr of perfect conjugation
        assert np.abs(sums).max() <= 5 * 0.41

    def test_empty_shot_when_everything_off(self):
        cfg = ExperimentConfig(modes=10, zeta=0.0, noise_rate=0.0, dark_rate=0.0,
                               fov_mrad=2.0)
        rec = run_shot(cfg, 1, 2)
        assert rec.stokes_events == [] and rec.antistokes_events == []
        assert rec.truth == []

    def test_deterministic_per_key(self):
        cfg = ExperimentConfig(modes=20, zeta=0.2, noise_rate=1.0, fov_mrad=2.0)
        a = run_shot(cfg, 17, 33)
        b = run_shot(cfg, 17, 33)
        assert a.stokes_events == b.stokes_events
        assert a.antistokes_events == b.antistokes_events
        assert a.truth == b.truth
        c = run_shot(cfg, 18, 33)
        assert c.stokes_events != a.stokes_events or c.antistokes_events != a.antistokes_events

    def test_high_gain_shot_scale(self):
        # mean write pairs per mode ~ 0.45 over 66 modes -> tens of photons
        cfg = ExperimentConfig(modes=66, zeta=0.45, eta_t=1.0, qe=1.0,
                               fov_mrad=3.0, noise_rate=0.0, dark_rate=0.0)
        totals = [run_shot(cfg, s, 4).tally.write_pairs for s in range(300)]
        assert 25 < np.mean(totals) < 35
        assert max(totals) > 45

    def test_time_bins(self):
        cfg = ExperimentConfig(modes=16, zeta=0.4, eta_read=0.5, eta_t=1.0, qe=1.0,
                               fov_mrad=2.0, noise_rate=1.0, dark_rate=1.0,
                               time_bins=True, t_read_s=1e-6, t_write_s=1e-6)
        bins = []
        for s in range(300):
            rec = run_shot(cfg, s, 6)
            for ev in rec.stokes_events + rec.antistokes_events:
                assert ev.time_bin_ns is not None
                assert ev.time_bin_ns % 100 == 0
                assert 0 <= ev.time_bin_ns < 1000
                if ev.region == REGION_ANTISTOKES:
                    bins.append(ev.time_bin_ns)
        # read-out decays with gamma0 = 3.82 MHz: early bins dominate
        bins = np.asarray(bins)
        assert (bins < 300).mean() > (bins >= 700).mean() + 0.2


class TestNoiseAndDetection:
    def test_silent_when_rates_zero(self):
        cfg = ExperimentConfig(noise_rate=0.0, dark_rate=0.0)
        rng = shot_rng(0, 0)
        assert sample_noise(cfg, REGION_STOKES, rng) == []

    def test_dark_rate_mean(self):
        cfg = ExperimentConfig(modes=10, zeta=0.0, noise_rate=0.0, dark_rate=2.0,
                               fov_mrad=2.0)
        shots = 20_000
        total = sum(len(run_shot(cfg, s, 8).antistokes_events) for s in range(shots))
        mean = total / shots
        assert abs(mean - 2.0) < 3 * math.sqrt(2.0 / shots)

    def test_noise_uniform_over_fov(self):
        cfg = ExperimentConfig(noise_rate=5.0, fov_mrad=1.5)
        rng = shot_rng(2, 2)
        xs = []
        for _ in range(2000):
            xs.extend(ev.angle.theta_x for ev in sample_noise(cfg, REGION_STOKES, rng))
        xs = np.asarray(xs)
        assert np.abs(xs).max() <= 1.5
        assert abs(xs.mean()) < 5 * 1.5 / math.sqrt(3 * len(xs))

    def test_detect_identity_and_thinning(self):
        cfg_id = ExperimentConfig(eta_t=1.0, qe=1.0)
        rng = shot_rng(1, 4)
        events = sample_noise(ExperimentConfig(noise_rate=200.0), REGION_STOKES, rng)
        assert detect(events, cfg_id, rng) == events
        assert detect([], cfg_id, rng) == []
        cfg_thin = ExperimentConfig(eta_t=0.5, qe=0.2)
        big = sample_noise(ExperimentConfig(noise_rate=200_000.0), REGION_STOKES, rng)
        kept = detect(big, cfg_thin, rng)
        expected = 0.1 * len(big)
        assert abs(len(kept) - expected) < 3 * math.sqrt(len(big) * 0.1 * 0.9)
