"""Scattering geometry and the closed-form relations used everywhere else.

Conventions, fixed once for the whole package:

* Angles are stored in milliradians in all public data structures;
  radians appear only inside formula evaluation.
* Gaussian widths: for a profile exp(-theta^2 / 2 sigma^2) the 1/e^2
  half-width is w = 2 sigma (intensity falls to e^-2 at theta = 2 sigma).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ParameterError

MRAD = 1e-3  # radians per milliradian


@dataclass(frozen=True, slots=True)
class Angle2D:
    """Scattering direction relative to the drive axis, in mrad."""

    theta_x: float
    theta_y: float

    def __post_init__(self):
        if not (math.isfinite(self.theta_x) and math.isfinite(self.theta_y)):
            raise ParameterError(f"angle components must be finite, got {self}")

    def norm(self) -> float:
        return math.hypot(self.theta_x, self.theta_y)


@dataclass(frozen=True, slots=True)
class WaveVector:
    """Transverse spin-wave wave-vector, in rad/m."""

    k_x: float
    k_y: float

    def norm(self) -> float:
        return math.hypot(self.k_x, self.k_y)


def phase_matched_angle(theta_s: Angle2D) -> Angle2D:
    """Anti-Stokes emission direction conjugate to a Stokes direction.

    Momentum conservation in the backward-free geometry gives
    theta_AS = -theta_S, componentwise.
    """
    return Angle2D(-theta_s.theta_x, -theta_s.theta_y)


def wavevector_from_angle(theta: Angle2D, wavelength_m: float) -> WaveVector:
    """Spin-wave wave-vector K = 2 pi theta / lambda for a scattering angle.

    ``theta`` is in mrad, ``wavelength_m`` in meters; the result is rad/m.
    """
    if wavelength_m <= 0:
        raise ParameterError(f"wavelength must be positive, got {wavelength_m}")
    scale = 2.0 * math.pi * MRAD / wavelength_m
    return WaveVector(scale * theta.theta_x, scale * theta.theta_y)


def fresnel_number(beam_radius_m: float, wavelength_m: float, cell_length_m: float) -> float:
    """Fresnel number w^2 / (lambda L) of the interaction volume.

    Sets the geometric bound on the number of resolvable angular modes.
    """
    if beam_radius_m <= 0 or wavelength_m <= 0 or cell_length_m <= 0:
        raise ParameterError(
            "beam radius, wavelength and cell length must all be positive, got "
            f"({beam_radius_m}, {wavelength_m}, {cell_length_m})"
        )
    return beam_radius_m**2 / (wavelength_m * cell_length_m)


def width_from_sigma(sigma: float) -> float:
    """1/e^2 half-width w = 2 sigma of a Gaussian with standard deviation sigma."""
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    return 2.0 * sigma


def sigma_from_width(width: float) -> float:
    """Inverse of :func:`width_from_sigma`."""
    if width < 0:
        raise ParameterError(f"width must be non-negative, got {width}")
    return width / 2.0
