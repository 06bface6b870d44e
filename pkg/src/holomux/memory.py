"""Monte Carlo generation of single experimental shots.

A shot is: write (thermal pair statistics per angular mode, Stokes photons
out), storage (diffusion kills high-wave-vector excitations), read
(conversion to anti-Stokes photons at the conjugate angle), plus broadband
noise, detector thinning and dark counts.

Every shot is a pure function of ``(config, shot_id, master_seed)``: the
random stream is a Philox counter-based generator keyed on the pair
``(master_seed, shot_id)``, so shots can be generated in any order and in
parallel without changing a single bit of the output.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .config import ExperimentConfig, ModeGrid, build_mode_grid, mode_occupancy_weights
from .errors import ParameterError
from .geometry import MRAD, Angle2D, WaveVector, wavevector_from_angle

REGION_STOKES = "S"
REGION_ANTISTOKES = "AS"

TIME_BIN_NS = 100  # camera gate granularity


@dataclass(frozen=True, slots=True)
class PhotonEvent:
    """One detected photon: camera region, angular position, originating shot."""

    region: str
    angle: Angle2D
    shot_id: int
    time_bin_ns: int | None = None


@dataclass(frozen=True, slots=True)
class ModeExcitation:
    """Pairs created in one angular mode during the write stage."""

    mode_center: Angle2D
    pair_count: int
    k: WaveVector


@dataclass(slots=True)
class ShotTally:
    """Bookkeeping counts of one shot, before and after each loss stage."""

    write_pairs: int = 0          # photon/spin-wave pairs created
    stored_pairs: int = 0         # spin-waves surviving storage
    read_pairs: int = 0           # anti-Stokes photons emitted (pre-detector)
    detected_pairs: int = 0       # truth-linked pairs with both photons detected


@dataclass(slots=True)
class ShotRecord:
    """All photons of one shot plus the genuine-pair truth channel."""

    shot_id: int
    stokes_events: list[PhotonEvent] = field(default_factory=list)
    antistokes_events: list[PhotonEvent] = field(default_factory=list)
    truth: list[tuple[int, int]] = field(default_factory=list)
    tally: ShotTally = field(default_factory=ShotTally)


def shot_rng(master_seed: int, shot_id: int) -> np.random.Generator:
    """Counter-based per-shot generator, stable across platforms and run order.

    The stream is fully determined by the Philox key ``(master_seed,
    shot_id)`` with a zero counter, so any shot can be regenerated in
    isolation and in any order.
    """
    key = np.array([master_seed & 0xFFFFFFFFFFFFFFFF, shot_id & 0xFFFFFFFFFFFFFFFF],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


_rng_pool = threading.local()


def _pooled_rng(master_seed: int, shot_id: int) -> np.random.Generator:
    """Same stream as :func:`shot_rng` without per-shot construction cost.

    Philox construction draws fallback entropy even with an explicit key;
    resetting the state of a thread-local instance avoids that while
    producing a bit-identical stream.
    """
    gen = getattr(_rng_pool, "gen", None)
    if gen is None:
        _rng_pool.bg = np.random.Philox(key=np.zeros(2, dtype=np.uint64))
        _rng_pool.gen = gen = np.random.Generator(_rng_pool.bg)
    _rng_pool.bg.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.zeros(4, dtype=np.uint64),
            "key": np.array([master_seed & 0xFFFFFFFFFFFFFFFF,
                             shot_id & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64),
        },
        "buffer": np.zeros(4, dtype=np.uint64),
        "buffer_pos": 4,
        "has_uint32": 0,
        "uinteger": 0,
    }
    return gen


@lru_cache(maxsize=32)
def _mode_tables(config: ExperimentConfig):
    """Per-mode centers, occupancy means and |K|^2, cached per configuration."""
    grid = build_mode_grid(config)
    weights = mode_occupancy_weights(config, grid)
    k2 = ((2.0 * math.pi * MRAD / config.wavelength_m) ** 2
          * (grid.centers_x**2 + grid.centers_y**2))
    means = config.zeta * weights
    p_geom = 1.0 / (1.0 + means)
    for arr in (means, k2, p_geom):
        arr.setflags(write=False)
    return grid, means, k2, p_geom


def draw_pair_counts(zeta, size, rng: np.random.Generator) -> np.ndarray:
    """Thermal photon-number samples P(n) = zeta^n / (1+zeta)^(n+1).

    This is the single-mode marginal of a two-mode squeezed state with
    mean occupancy ``zeta``. ``zeta`` may be a scalar or a per-mode array
    (which is how the occupancy envelope enters).
    """
    zeta = np.asarray(zeta, dtype=float)
    if np.any(zeta < 0) or np.any(zeta >= 1):
        raise ParameterError("per-mode occupancy must be in [0, 1)")
    p = 1.0 / (1.0 + zeta)
    return rng.geometric(np.broadcast_to(p, size)) - 1


def storage_survival(k, diffusion_m2_s: float, tau_s: float):
    """Probability exp(-2 D tau |K|^2) that a stored spin-wave survives.

    Spin-wave amplitude decays at rate D |K|^2, hence the factor 2 for the
    retrieval probability. Accepts a WaveVector or an array of |K| values.
    """
    if diffusion_m2_s < 0 or tau_s < 0:
        raise ParameterError("diffusion coefficient and storage time must be non-negative")
    if isinstance(k, WaveVector):
        k2 = k.norm() ** 2
    else:
        k2 = np.asarray(k, dtype=float) ** 2
    return np.exp(-2.0 * diffusion_m2_s * tau_s * k2)


def read_intensity_envelope(t_s, gamma0_hz: float):
    """Relative read-out intensity exp(-gamma0 t) within the read gate."""
    if gamma0_hz < 0:
        raise ParameterError(f"decay rate must be non-negative, got {gamma0_hz}")
    t_s = np.asarray(t_s, dtype=float)
    if np.any(t_s < 0):
        raise ParameterError("time must be non-negative")
    result = np.exp(-gamma0_hz * t_s)
    return float(result) if result.ndim == 0 else result


def sample_write(
    config: ExperimentConfig,
    mode_grid: ModeGrid,
    rng: np.random.Generator,
) -> list[ModeExcitation]:
    """Draw the write stage: per-mode thermal pair counts.

    Modes are independent; mode ``m`` has mean occupancy
    ``zeta * weight_m`` where the weight is 1 by default or follows the
    configured Gaussian envelope.
    """
    weights = mode_occupancy_weights(config, mode_grid)
    counts = draw_pair_counts(config.zeta * weights, len(mode_grid), rng)
    out = []
    for i in np.flatnonzero(counts):
        center = Angle2D(float(mode_grid.centers_x[i]), float(mode_grid.centers_y[i]))
        out.append(ModeExcitation(center, int(counts[i]),
                                  wavevector_from_angle(center, config.wavelength_m)))
    return out


def _sample_time_bins_read(n: int, config: ExperimentConfig, rng) -> np.ndarray:
    """Exponentially distributed arrival times, truncated to the read gate."""
    u = rng.random(n)
    scale = config.gamma0_hz
    if scale <= 0:
        t = u * config.t_read_s
    else:
        # inverse CDF of exp(-gamma0 t) truncated at t_read
        cap = -math.expm1(-scale * config.t_read_s)
        t = -np.log1p(-u * cap) / scale
    return (np.floor(t / (TIME_BIN_NS * 1e-9)) * TIME_BIN_NS).astype(np.int64)


def _sample_time_bins_write(n: int, config: ExperimentConfig, rng) -> np.ndarray:
    t = rng.random(n) * config.t_write_s
    return (np.floor(t / (TIME_BIN_NS * 1e-9)) * TIME_BIN_NS).astype(np.int64)


def sample_noise(config: ExperimentConfig, region: str, rng, shot_id: int = 0,
                 rate: float | None = None) -> list[PhotonEvent]:
    """Broadband background: Poisson-many events uniform over the field of view."""
    if rate is None:
        rate = config.noise_rate
    n = rng.poisson(rate)
    events = []
    if n == 0:
        return events
    xy = rng.uniform(-config.fov_mrad, config.fov_mrad, size=(n, 2))
    if config.time_bins:
        gate = config.t_write_s if region == REGION_STOKES else config.t_read_s
        bins = (np.floor(rng.random(n) * gate / (TIME_BIN_NS * 1e-9)) * TIME_BIN_NS).astype(np.int64)
    else:
        bins = None
    for i in range(n):
        events.append(PhotonEvent(region, Angle2D(float(xy[i, 0]), float(xy[i, 1])), shot_id,
                                  int(bins[i]) if bins is not None else None))
    return events


def detect(events: list[PhotonEvent], config: ExperimentConfig, rng) -> list[PhotonEvent]:
    """Thin a list of physical photons by the detection chain eta_T * QE."""
    eta = config.eta_t * config.qe
    if eta >= 1.0:
        return list(events)
    keep = rng.random(len(events)) < eta
    return [ev for ev, k in zip(events, keep) if k]


def run_shot(config: ExperimentConfig, shot_id: int, master_seed: int) -> ShotRecord:
    """Generate one complete shot.

    Deterministic in ``(config, shot_id, master_seed)``. Truth links pair
    each detected anti-Stokes photon with the detected Stokes photon from
    the same excitation; pairs where either photon is lost leave no link.
    """
    rng = _pooled_rng(master_seed, shot_id)
    grid, means, k2, p_geom = _mode_tables(config)
    record = ShotRecord(shot_id)
    tally = record.tally

    jitter = config.sigma_corr_mrad / math.sqrt(2.0)
    read_blur = math.hypot(jitter, config.sigma_kernel_mrad)
    eta_det = config.eta_t * config.qe
    fov = config.fov_mrad
    timed = config.time_bins

    # same thermal law as draw_pair_counts, with the parameter precomputed
    counts = rng.geometric(p_geom) - 1
    total = int(counts.sum())
    tally.write_pairs = total

    s_xy = np.empty((0, 2))
    kept_s = np.empty(0, dtype=bool)
    as_xy = np.empty((0, 2))
    parent = np.empty(0, dtype=np.int64)   # excitation index of each emitted AS photon
    if total:
        excited = np.flatnonzero(counts)
        mode_of = np.repeat(excited, counts[excited])
        s_xy = np.column_stack((grid.centers_x[mode_of], grid.centers_y[mode_of]))
        s_xy += rng.normal(0.0, jitter, size=(total, 2))

        if config.spinwave_fraction >= 1.0:
            has_spinwave = np.ones(total, dtype=bool)
        else:
            has_spinwave = rng.random(total) < config.spinwave_fraction
        survival = np.exp(-2.0 * config.diffusion_m2_s * config.tau_s * k2[mode_of])
        stored = has_spinwave & (rng.random(total) < survival)
        converted = stored & (rng.random(total) < config.eta_read)
        tally.stored_pairs = int(stored.sum())
        tally.read_pairs = int(converted.sum())

        parent = np.flatnonzero(converted)
        n_read = parent.size
        as_xy = -np.column_stack((grid.centers_x[mode_of[parent]],
                                  grid.centers_y[mode_of[parent]]))
        as_xy += rng.normal(0.0, read_blur, size=(n_read, 2))
        in_fov_as = (np.abs(as_xy) <= fov).all(axis=1)
        parent, as_xy = parent[in_fov_as], as_xy[in_fov_as]

        # detector thinning; a lost Stokes photon breaks the truth link
        kept_s = (np.abs(s_xy) <= fov).all(axis=1)
        if eta_det < 1.0:
            kept_s &= rng.random(total) < eta_det
            kept_as = rng.random(parent.size) < eta_det
            parent, as_xy = parent[kept_as], as_xy[kept_as]

    s_final = np.flatnonzero(kept_s)
    s_index_of = {int(e): i for i, e in enumerate(s_final)}
    s_bins = _sample_time_bins_write(s_final.size, config, rng) if timed else None
    for i, e in enumerate(s_final):
        record.stokes_events.append(PhotonEvent(
            REGION_STOKES, Angle2D(float(s_xy[e, 0]), float(s_xy[e, 1])), shot_id,
            int(s_bins[i]) if timed else None))
    as_bins = _sample_time_bins_read(parent.size, config, rng) if timed else None
    for j in range(parent.size):
        as_pos = len(record.antistokes_events)
        record.antistokes_events.append(PhotonEvent(
            REGION_ANTISTOKES, Angle2D(float(as_xy[j, 0]), float(as_xy[j, 1])), shot_id,
            int(as_bins[j]) if timed else None))
        s_at = s_index_of.get(int(parent[j]))
        if s_at is not None:
            record.truth.append((s_at, as_pos))
            tally.detected_pairs += 1

    # broadband noise passes the same detection chain as signal photons
    for region, target in ((REGION_STOKES, record.stokes_events),
                           (REGION_ANTISTOKES, record.antistokes_events)):
        noise = sample_noise(config, region, rng, shot_id)
        target.extend(detect(noise, config, rng))

    # dark counts originate in the intensifier, after the optical losses
    for region, target in ((REGION_STOKES, record.stokes_events),
                           (REGION_ANTISTOKES, record.antistokes_events)):
        target.extend(sample_noise(config, region, rng, shot_id, rate=config.dark_rate))

    return record
