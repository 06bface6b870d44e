import math

import numpy as np
import pytest
from scipy.stats import norm

from holomux.extract import (
    ExtractionParams,
    benchmark_extraction,
    estimate_noise,
    extract_events,
    label_sparse,
    roundtrip_fidelity,
)
from holomux.frames import SpotModel, default_calibration, render_frame
from holomux.geometry import Angle2D
from holomux.memory import PhotonEvent, ShotRecord, shot_rng

SHAPE = (256, 512)


def render_single(theta, spot=None, seed=0, region="S"):
    spot = spot or SpotModel()
    split, cal_s, cal_as = default_calibration(SHAPE[1], SHAPE[0], fov_mrad=10.0)
    rec = ShotRecord(0)
    ev = PhotonEvent(region, Angle2D(*theta), 0)
    (rec.stokes_events if region == "S" else rec.antistokes_events).append(ev)
    frame = render_frame(rec, spot, SHAPE, split, cal_s, cal_as, shot_rng(seed, 0))
    return frame, (cal_s if region == "S" else cal_as)


def flood_fill_labels(mask):
    """Brute-force 8-connected labeling oracle."""
    h, w = mask.shape
    labels = -np.ones(mask.shape, dtype=int)
    current = 0
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or labels[y, x] >= 0:
                continue
            stack = [(y, x)]
            labels[y, x] = current
            while stack:
                cy, cx = stack.pop()
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if (0 <= ny < h and 0 <= nx < w and mask[ny, nx]
                                and labels[ny, nx] < 0):
                            labels[ny, nx] = current
                            stack.append((ny, nx))
            current += 1
    return labels, current


class TestLabeling:
    @pytest.mark.parametrize("density", [0.02, 0.1, 0.3, 0.5])
    def test_matches_flood_fill_oracle(self, density):
        rng = np.random.default_rng(int(density * 1000))
        for trial in range(6):
            mask = rng.random((64, 64)) < density
            flat = np.flatnonzero(mask.ravel())
            if flat.size == 0:
                continue
            ours = label_sparse(flat, 64)
            oracle, n_oracle = flood_fill_labels(mask)
            assert ours.max() + 1 == n_oracle
            # identical partitions up to label renumbering
            ys, xs = np.divmod(flat, 64)
            mapping = {}
            for lab_ours, lab_oracle in zip(ours, oracle[ys, xs]):
                assert mapping.setdefault(lab_ours, lab_oracle) == lab_oracle

    def test_single_pixel_and_diagonal(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[1, 1] = True
        mask[2, 2] = True   # diagonal neighbor: same component
        mask[5, 5] = True
        flat = np.flatnonzero(mask.ravel())
        labels = label_sparse(flat, 8)
        assert labels[0] == labels[1]
        assert labels[2] != labels[0]


class TestExtraction:
    def test_single_spot_subpixel(self):
        frame, cal = render_single((5.0, -3.0), seed=1)
        result = extract_events(frame, 5.0)
        assert len(result.events) == 1
        ev = result.events[0]
        assert ev.region == "S"
        px, py = cal.to_pixel(ev.angle.theta_x, ev.angle.theta_y)
        tx, ty = cal.to_pixel(5.0, -3.0)
        err = math.hypot(px - tx, py - ty)
        assert err < 0.1

    def test_two_separated_spots(self):
        spot = SpotModel()
        split, cal_s, cal_as = default_calibration(SHAPE[1], SHAPE[0], fov_mrad=10.0)
        rec = ShotRecord(0)
        rec.stokes_events = [PhotonEvent("S", Angle2D(-4.0, 0.0), 0),
                             PhotonEvent("S", Angle2D(4.0, 0.0), 0)]
        frame = render_frame(rec, spot, SHAPE, split, cal_s, cal_as, shot_rng(2, 0))
        result = extract_events(frame, 5.0)
        assert len(result.events) == 2
        got = sorted(ev.angle.theta_x for ev in result.events)
        assert got[0] == pytest.approx(-4.0, abs=0.1)
        assert got[1] == pytest.approx(4.0, abs=0.1)

    def test_pedestal_invariance(self):
        frame, _ = render_single((2.0, 2.0), seed=3)
        result1 = extract_events(frame, 5.0)
        shifted = frame
        shifted.pixels = (frame.pixels + 500).astype(np.uint16)
        result2 = extract_events(shifted, 5.0)
        assert len(result1.events) == len(result2.events) == 1
        a, b = result1.events[0].angle, result2.events[0].angle
        assert a.theta_x == b.theta_x and a.theta_y == b.theta_y

    def test_huge_threshold_finds_nothing(self):
        frame, _ = render_single((0.0, 0.0), seed=4)
        assert extract_events(frame, 1e6).events == []

    def test_oversized_blob_flagged_not_split(self):
        frame, _ = render_single((0.0, 0.0), seed=5,
                                 spot=SpotModel(amplitude=60000, sigma_px=4.0))
        params = ExtractionParams(max_area_px=60)
        result = extract_events(frame, 5.0, params)
        assert result.events == []
        assert len(result.oversized) == 1
        assert result.oversized[0].area > 60

    def test_noise_estimate_robust_to_spots(self):
        frame, _ = render_single((1.0, 1.0), seed=6)
        floor, sigma = estimate_noise(frame.pixels)
        assert floor == pytest.approx(100.0, abs=1.0)
        assert sigma == pytest.approx(8.0, rel=0.1)

    def test_pure_noise_false_positives_below_tail_bound(self):
        spot = SpotModel()
        split, cal_s, cal_as = default_calibration(SHAPE[1], SHAPE[0])
        n_frames = 400
        observed = 0
        for i in range(n_frames):
            frame = render_frame(ShotRecord(i), spot, SHAPE, split, cal_s, cal_as,
                                 shot_rng(7, i))
            observed += len(extract_events(frame, 5.0).events)
        # analytic bound: an event needs >= 2 adjacent pixels above threshold;
        # allow 2% threshold slack for the estimated noise scale
        q = norm.sf(5.0 * 0.98)
        n_px = SHAPE[0] * SHAPE[1]
        bound_per_frame = 4 * n_px * q * q
        assert bound_per_frame < 1e-3
        assert observed <= max(1.0, 3 * n_frames * bound_per_frame)


class TestRoundtripHarness:
    def test_default_model_meets_targets(self):
        report = roundtrip_fidelity(SpotModel(), n_frames=150, events_per_frame=12,
                                    frame_shape=(256, 512), fov_mrad=10.0, seed=11)
        assert report.recall >= 0.99
        assert report.rmse_px <= 0.15
        assert report.precision >= 0.99

    def test_zero_noise_perfect_precision(self):
        report = roundtrip_fidelity(SpotModel(noise_sigma=1e-3, noise_floor=50.0),
                                    n_frames=40, events_per_frame=6,
                                    frame_shape=(256, 512), fov_mrad=10.0, seed=12)
        assert report.precision == 1.0


def test_benchmark_returns_throughput():
    out = benchmark_extraction(n_frames=20, events_per_frame=20,
                               frame_shape=(256, 512))
    assert out["extract_fps"] > 0 and out["render_fps"] > 0
    assert out["events_extracted"] > 0
