"""Synthetic intensified-camera frames: rendering and the binary file format.

A frame is a 16-bit raster split into a Stokes region (left of the split
column) and an anti-Stokes region (right of it), each carrying an affine
angle-to-pixel calibration. Photons become Gaussian flashes with Poisson
shot noise on top of a Gaussian readout pedestal.

File layout (little endian): magic ``HOLO``, version u16, width u16,
height u16, region_split u16, 6 f64 calibration coefficients for the
Stokes region, 6 for the anti-Stokes region, then height x width u16
pixels row-major. Frames may be concatenated in one stream, each with its
own header.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigFileError, ParameterError
from .memory import REGION_ANTISTOKES, REGION_STOKES, ShotRecord

MAGIC = b"HOLO"
VERSION = 1
_HEADER = struct.Struct("<4sHHHH")
_CAL = struct.Struct("<6d")

SATURATION = 65535


@dataclass(frozen=True, slots=True)
class SpotModel:
    """Point-spread and noise parameters of the intensified camera."""

    amplitude: float = 160.0     # peak counts of a single-photon flash
    sigma_px: float = 1.2        # flash spread
    noise_floor: float = 100.0   # readout pedestal
    noise_sigma: float = 8.0     # readout noise

    def __post_init__(self):
        if self.sigma_px <= 0:
            raise ParameterError(f"sigma_px must be positive, got {self.sigma_px}")
        if self.amplitude <= 0 or self.noise_sigma < 0 or self.noise_floor < 0:
            raise ParameterError("spot model amplitudes must be non-negative")


@dataclass(frozen=True, slots=True)
class AffineCalibration:
    """px = c0 + c1 theta_x + c2 theta_y; py = c3 + c4 theta_x + c5 theta_y."""

    c: tuple[float, float, float, float, float, float]

    def to_pixel(self, theta_x, theta_y):
        c = self.c
        return (c[0] + c[1] * np.asarray(theta_x) + c[2] * np.asarray(theta_y),
                c[3] + c[4] * np.asarray(theta_x) + c[5] * np.asarray(theta_y))

    def to_angle(self, px, py):
        c = self.c
        det = c[1] * c[5] - c[2] * c[4]
        if det == 0:
            raise ParameterError("calibration is not invertible")
        dx = np.asarray(px) - c[0]
        dy = np.asarray(py) - c[3]
        return ((c[5] * dx - c[2] * dy) / det, (-c[4] * dx + c[1] * dy) / det)


@dataclass
class Frame:
    """One camera exposure with its geometry and calibration."""

    pixels: np.ndarray                     # uint16, shape (height, width)
    region_split: int                      # first column of the anti-Stokes region
    cal_s: AffineCalibration
    cal_as: AffineCalibration
    rejected: list = field(default_factory=list)   # events outside calibration

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def calibration(self, region: str) -> AffineCalibration:
        return self.cal_s if region == REGION_STOKES else self.cal_as


def default_calibration(
    width: int = 1024,
    height: int = 512,
    region_split: int | None = None,
    fov_mrad: float = 25.0,
    pad_px: int = 8,
) -> tuple[int, AffineCalibration, AffineCalibration]:
    """Map [-fov, fov]^2 onto each region's pixel box, with an edge margin."""
    if region_split is None:
        region_split = width // 2
    sx = (region_split - 1 - 2 * pad_px) / (2 * fov_mrad)
    sy = (height - 1 - 2 * pad_px) / (2 * fov_mrad)
    cal_s = AffineCalibration((pad_px + fov_mrad * sx, sx, 0.0,
                               pad_px + fov_mrad * sy, 0.0, sy))
    cal_as = AffineCalibration((region_split + pad_px + fov_mrad * sx, sx, 0.0,
                                pad_px + fov_mrad * sy, 0.0, sy))
    return region_split, cal_s, cal_as


def render_frame(
    shot: ShotRecord,
    spot_model: SpotModel,
    frame_shape: tuple[int, int],
    region_split: int,
    cal_s: AffineCalibration,
    cal_as: AffineCalibration,
    rng: np.random.Generator,
) -> Frame:
    """Paint a shot onto a fresh frame.

    Each event becomes a Gaussian flash at its calibrated sub-pixel
    position with Poisson statistics per pixel; readout noise is Gaussian
    around the pedestal. Events mapping outside their region are rejected
    and reported on the frame, not painted.
    """
    height, width = frame_shape
    base = rng.normal(spot_model.noise_floor, spot_model.noise_sigma,
                      size=(height, width)).astype(np.float32)

    half = max(int(math.ceil(4 * spot_model.sigma_px)), 2)
    rejected = []
    for region, events, cal, x_lo, x_hi in (
        (REGION_STOKES, shot.stokes_events, cal_s, 0, region_split),
        (REGION_ANTISTOKES, shot.antistokes_events, cal_as, region_split, width),
    ):
        for ev in events:
            px, py = cal.to_pixel(ev.angle.theta_x, ev.angle.theta_y)
            px, py = float(px), float(py)
            if not (x_lo + 1 <= px <= x_hi - 2 and 1 <= py <= height - 2):
                rejected.append((region, ev))
                continue
            ix, iy = int(round(px)), int(round(py))
            x0, x1 = max(ix - half, x_lo), min(ix + half + 1, x_hi)
            y0, y1 = max(iy - half, 0), min(iy + half + 1, height)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            lam = spot_model.amplitude * np.exp(
                -((xs - px) ** 2 + (ys - py) ** 2) / (2 * spot_model.sigma_px**2))
            base[y0:y1, x0:x1] += rng.poisson(lam)

    pixels = np.clip(np.rint(base), 0, SATURATION).astype(np.uint16)
    frame = Frame(pixels, region_split, cal_s, cal_as, rejected)
    if rejected:
        warnings.warn(f"{len(rejected)} event(s) fell outside the calibrated region "
                      f"in shot {shot.shot_id} and were not rendered", stacklevel=2)
    return frame


# ---------------------------------------------------------------------------
# binary stream IO

def write_frames(path: str | Path, frames) -> int:
    """Write frames as one concatenated stream; returns the frame count."""
    from .eventio import atomic_output

    n = 0
    with atomic_output(path, "wb") as fh:
        for frame in frames:
            _write_one(fh, frame)
            n += 1
    return n


def _write_one(fh, frame: Frame):
    if frame.pixels.dtype != np.uint16:
        raise ParameterError("frame pixels must be uint16")
    fh.write(_HEADER.pack(MAGIC, VERSION, frame.width, frame.height, frame.region_split))
    fh.write(_CAL.pack(*frame.cal_s.c))
    fh.write(_CAL.pack(*frame.cal_as.c))
    fh.write(frame.pixels.astype("<u2").tobytes())


def read_frames(path: str | Path):
    """Yield frames from a stream written by :func:`write_frames`."""
    with open(path, "rb") as fh:
        while True:
            head = fh.read(_HEADER.size)
            if not head:
                return
            if len(head) < _HEADER.size:
                raise ConfigFileError(f"{path}: truncated frame header")
            magic, version, width, height, split = _HEADER.unpack(head)
            if magic != MAGIC:
                raise ConfigFileError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise ConfigFileError(f"{path}: unsupported frame version {version}")
            cal_s = AffineCalibration(_CAL.unpack(fh.read(_CAL.size)))
            cal_as = AffineCalibration(_CAL.unpack(fh.read(_CAL.size)))
            raw = fh.read(2 * width * height)
            if len(raw) < 2 * width * height:
                raise ConfigFileError(f"{path}: truncated pixel data")
            pixels = np.frombuffer(raw, dtype="<u2").reshape(height, width).copy()
            yield Frame(pixels, split, cal_s, cal_as)


def spot_model_from_pairs(pairs: dict[str, str], source: str = "<config>") -> SpotModel:
    """Build a SpotModel from optional config keys (shares the keyvalue file)."""
    mapping = {
        "spot_amplitude": "amplitude",
        "spot_sigma_px": "sigma_px",
        "noise_floor": "noise_floor",
        "noise_sigma": "noise_sigma",
    }
    kwargs = {}
    for key, name in mapping.items():
        if key in pairs:
            try:
                kwargs[name] = float(pairs[key])
            except ValueError as exc:
                raise ConfigFileError(f"{source}: bad value for {key}: {pairs[key]!r}") from exc
    return SpotModel(**kwargs)
