"""Closed-form storage-time evolution of correlation widths and D fitting.

Diffusion attenuates a spin-wave of wave-vector K at rate D |K|^2, so the
retrieval probability falls as exp(-2 D t |K|^2). On the coincidence map
this narrows the Gaussian widths harmonically,

    1 / sigma^2(t) = 1 / sigma^2(0) + 8 pi^2 D t / lambda^2,

for the widths measured along the rotated axes (x_S +/- x_AS)/sqrt(2).
The registered widths are additionally floored by the angle-independent
pair spread (read-beam blur plus pair jitter), entering as a Gaussian
convolution.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import FitError, ParameterError
from .eventio import atomic_output, fmt
from .geometry import MRAD, Angle2D, wavevector_from_angle
from .memory import storage_survival

_LOG10_D_MIN = -12.0  # fit bound; reaching it means "consistent with zero"


def variance_evolution(sigma0_mrad: float, diffusion_m2_s: float, t_s: float,
                       wavelength_m: float) -> float:
    """Width sigma(t) = [sigma0^-2 + 8 pi^2 D t / lambda^2]^(-1/2), in mrad."""
    if sigma0_mrad <= 0:
        raise ParameterError(f"sigma0 must be positive, got {sigma0_mrad}")
    if diffusion_m2_s < 0 or t_s < 0:
        raise ParameterError("diffusion coefficient and time must be non-negative")
    inv0 = 1.0 / (sigma0_mrad * MRAD) ** 2
    inv = inv0 + 8.0 * math.pi**2 * diffusion_m2_s * t_s / wavelength_m**2
    return 1.0 / math.sqrt(inv) / MRAD


def coincidence_decay(n0: float, theta_mrad: float, diffusion_m2_s: float,
                      t_s: float, wavelength_m: float) -> float:
    """Coincidence count at angle theta after storage: n0 exp(-2 D t |K|^2)."""
    k = wavevector_from_angle(Angle2D(theta_mrad, 0.0), wavelength_m)
    return n0 * float(storage_survival(k, diffusion_m2_s, t_s))


def convolved_width(sigma_atomic_mrad: float, sigma_kernel_mrad: float) -> float:
    """Width of a Gaussian convolved with a Gaussian: quadrature sum."""
    if sigma_atomic_mrad < 0 or sigma_kernel_mrad < 0:
        raise ParameterError("widths must be non-negative")
    return math.hypot(sigma_atomic_mrad, sigma_kernel_mrad)


def effective_kernel_mrad(config) -> float:
    """Constant width floor of the registered pair spread, rotated frame.

    The per-pair jitter sigma_corr and the read blur sigma_kernel act on
    the raw sum coordinate x_S + x_AS; projected on the normalized axes
    they contribute sqrt((sigma_corr^2 + sigma_kernel^2) / 2).
    """
    return math.sqrt((config.sigma_corr_mrad**2 + config.sigma_kernel_mrad**2) / 2.0)


def atomic_span_mrad(config) -> float:
    """Initial atomic width along the difference axis, sqrt(2) x mode spread."""
    from .config import build_mode_grid, mode_occupancy_weights

    grid = build_mode_grid(config)
    w = mode_occupancy_weights(config, grid)
    total = w.sum()
    mx = (w * grid.centers_x).sum() / total
    var = (w * (grid.centers_x - mx) ** 2).sum() / total
    return math.sqrt(2.0 * var)


def predict_mode_count(config, tau_s: float) -> float:
    """Model mode count M(tau): evolve both widths, convolve, take the ratio.

    The conditional (sum-axis) spread carries no atomic width, so its
    convolved value stays at the kernel floor and M tends to the floor of
    exactly 2 as the difference-axis width collapses onto the same kernel.
    """
    kernel = effective_kernel_mrad(config)
    if kernel <= 0:
        raise ParameterError("configuration has zero pair spread; mode count undefined")
    span0 = atomic_span_mrad(config)
    if span0 <= 0:
        return 2.0
    span = variance_evolution(span0, config.diffusion_m2_s, tau_s, config.wavelength_m)
    w_diff = convolved_width(span, kernel)
    w_sum = kernel
    return 2.0 * (w_diff / w_sum) ** 2


@dataclass
class WidthSeries:
    """Fitted correlation widths versus storage time."""

    tau_s: np.ndarray
    sigma_sum_mrad: np.ndarray
    sigma_sum_err: np.ndarray
    sigma_diff_mrad: np.ndarray
    sigma_diff_err: np.ndarray

    def __post_init__(self):
        self.tau_s = np.asarray(self.tau_s, dtype=float)
        for name in ("sigma_sum_mrad", "sigma_sum_err", "sigma_diff_mrad", "sigma_diff_err"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(np.diff(self.tau_s) <= 0):
            raise ParameterError("storage times must be strictly increasing")
        if np.any(self.sigma_sum_mrad <= 0) or np.any(self.sigma_diff_mrad <= 0):
            raise ParameterError("widths must be positive")

    def __len__(self):
        return len(self.tau_s)


@dataclass
class DiffusionFitResult:
    diffusion_m2_s: float
    diffusion_err: float
    sigma0_sum_mrad: float
    sigma0_diff_mrad: float
    residual_norm: float
    covariance: np.ndarray = field(repr=False)
    clamped_to_zero: bool = False


def _width_model(log10_d, sigma0, kernel, tau, wavelength_m):
    d = 10.0**log10_d
    evolved = np.array([variance_evolution(sigma0, d, t, wavelength_m) for t in tau])
    return np.hypot(evolved, kernel)


def fit_diffusion(series: WidthSeries, wavelength_m: float,
                  sigma_kernel_mrad: float, max_nfev: int = 600) -> DiffusionFitResult:
    """Weighted least squares of the composed width model over (D, sigma0_sum, sigma0_diff).

    D is parametrized as log10(D) to keep it positive; an optimum pinned at
    the lower bound is reported as D clamped to zero with a warning.
    """
    if len(series) < 3:
        raise ParameterError("need at least 3 width measurements to fit D")
    tau = series.tau_s
    w_sum = 1.0 / np.maximum(series.sigma_sum_err, 1e-6)
    w_diff = 1.0 / np.maximum(series.sigma_diff_err, 1e-6)

    kernel = sigma_kernel_mrad
    # initial D from the two ends of the difference-axis series
    sd0, sdn = series.sigma_diff_mrad[0], series.sigma_diff_mrad[-1]
    a0 = math.sqrt(max(sd0**2 - kernel**2, 1e-8))
    an = math.sqrt(max(sdn**2 - kernel**2, 1e-8))
    dt = tau[-1] - tau[0]
    slope = max((1.0 / (an * MRAD) ** 2 - 1.0 / (a0 * MRAD) ** 2) / dt, 1e-12) if dt > 0 else 1e-12
    d_guess = slope * wavelength_m**2 / (8 * math.pi**2)
    s_sum0 = math.sqrt(max(series.sigma_sum_mrad[0] ** 2 - kernel**2, 1e-8))
    p0 = [math.log10(max(d_guess, 10.0**_LOG10_D_MIN)), s_sum0, a0]

    def residuals(p):
        log10_d, s0s, s0d = p
        m_sum = _width_model(log10_d, s0s, kernel, tau, wavelength_m)
        m_diff = _width_model(log10_d, s0d, kernel, tau, wavelength_m)
        return np.concatenate((w_sum * (m_sum - series.sigma_sum_mrad),
                               w_diff * (m_diff - series.sigma_diff_mrad)))

    res = least_squares(residuals, p0,
                        bounds=([_LOG10_D_MIN, 1e-6, 1e-6], [2.0, np.inf, np.inf]),
                        max_nfev=max_nfev)
    if not res.success:
        raise FitError(
            f"diffusion fit did not converge: {res.message}; residual norm "
            f"{np.linalg.norm(res.fun):.3g}, initial guess {p0}",
            initial_guess=p0,
        )
    log10_d, s0s, s0d = res.x
    d = 10.0**log10_d
    jtj = res.jac.T @ res.jac
    try:
        cov = np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        cov = np.full((3, 3), np.nan)
    # delta method: sigma(D) = D ln(10) sigma(log10 D)
    d_err = d * math.log(10) * math.sqrt(max(cov[0, 0], 0.0))
    clamped = log10_d <= _LOG10_D_MIN + 1e-9
    if clamped:
        warnings.warn("fitted diffusion coefficient hit the lower bound; reporting D = 0",
                      stacklevel=2)
        d = 0.0
    return DiffusionFitResult(d, d_err, float(s0s), float(s0d),
                              float(np.linalg.norm(res.fun)), cov, clamped)


# ---------------------------------------------------------------------------
# widths CSV

WIDTHS_HEADER = "tau_us,sigma_sum_mrad,sigma_sum_err,sigma_diff_mrad,sigma_diff_err"


def write_widths_csv(path, series: WidthSeries):
    with atomic_output(path) as fh:
        fh.write(WIDTHS_HEADER + "\n")
        for i in range(len(series)):
            fh.write(",".join(fmt(v) for v in (
                series.tau_s[i] * 1e6,
                series.sigma_sum_mrad[i], series.sigma_sum_err[i],
                series.sigma_diff_mrad[i], series.sigma_diff_err[i])) + "\n")


def read_widths_csv(path) -> WidthSeries:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != WIDTHS_HEADER:
            raise ParameterError(f"{path}: unexpected widths CSV header {header!r}")
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                rows.append([float(p) for p in line.split(",")])
    arr = np.asarray(rows)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ParameterError(f"{path}: malformed widths CSV")
    return WidthSeries(arr[:, 0] * 1e-6, arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])
