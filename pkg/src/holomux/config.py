"""Experiment configuration, mode grid construction, and the config file format.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Keys carry their unit as a suffix (``lambda_nm``, ``tau_us``,
``D_m2_per_s``); unknown keys are a hard error so typos cannot silently
fall back to defaults.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigFileError, ParameterError
from .geometry import Angle2D, fresnel_number

# Per-mode mean occupancy at which the measured photon production rate
# starts to bend away from the linear (spontaneous) regime.
LINEAR_REGIME_MEAN = 0.47


@dataclass(frozen=True, slots=True)
class ExperimentConfig:
    """All physical and detector parameters of one memory configuration.

    Lengths and times are SI; angles are mrad (package-wide convention).
    """

    wavelength_m: float = 795e-9        # drive wavelength
    cell_length_m: float = 0.10         # vapor cell length L
    beam_radius_m: float = 2.3e-3       # drive beam 1/e^2 radius w
    zeta: float = 0.10                  # per-mode pair probability (thermal mean)
    modes: int = 0                      # mode count M; 0 = round(Fresnel number)
    diffusion_m2_s: float = 7.3e-3      # diffusion coefficient D
    tau_s: float = 0.0                  # storage time
    eta_read: float = 0.30              # internal read-out efficiency
    eta_t: float = 0.50                 # filter transmission
    qe: float = 0.20                    # detector quantum efficiency
    dark_rate: float = 1.0              # dark counts per gate per camera region
    delta_theta_mrad: float = 0.3       # stripe gate half-width
    gamma0_hz: float = 3.82e6           # read decay rate
    t_write_s: float = 1e-6             # write gate duration
    t_read_s: float = 1e-6              # read gate duration
    noise_rate: float = 0.0             # broadband noise events per shot per region
    sigma_corr_mrad: float = 0.41       # conditional angular spread of a pair
    sigma_kernel_mrad: float = 0.11     # read-beam angular blur (diffraction scale)
    sigma_env_mrad: float = 0.0         # Gaussian envelope on mode occupancy; 0 = uniform
    fov_mrad: float = 25.0              # angular field of view half-width
    spinwave_fraction: float = 1.0      # fraction of Stokes events backed by a spin-wave
    central_window_mrad: float = 0.3    # half-width of the |sum| band for center statistics
    bin_mrad: float = 0.15              # coincidence histogram bin width
    time_bins: bool = False             # attach 100 ns time bins to events
    od: float = 0.0                     # optical depth, metadata only

    def __post_init__(self):
        for name in ("eta_read", "eta_t", "qe", "spinwave_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.zeta < 1.0:
            raise ParameterError(f"zeta must be in [0, 1), got {self.zeta}")
        for name in (
            "wavelength_m", "cell_length_m", "beam_radius_m", "fov_mrad",
            "bin_mrad", "delta_theta_mrad",
        ):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        for name in (
            "diffusion_m2_s", "tau_s", "dark_rate", "noise_rate",
            "sigma_corr_mrad", "sigma_kernel_mrad", "sigma_env_mrad",
            "t_write_s", "t_read_s", "gamma0_hz", "central_window_mrad", "od",
        ):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.modes < 0:
            raise ParameterError(f"modes must be non-negative, got {self.modes}")
        if self.zeta > LINEAR_REGIME_MEAN:
            warnings.warn(
                f"per-mode mean occupancy zeta={self.zeta} exceeds {LINEAR_REGIME_MEAN}; "
                "the photon production rate is no longer linear in pulse energy "
                "and the simulated thermal statistics stop being a good model",
                stacklevel=2,
            )

    def fresnel(self) -> float:
        return fresnel_number(self.beam_radius_m, self.wavelength_m, self.cell_length_m)

    def mode_count(self) -> int:
        """Configured mode count, defaulting to the rounded Fresnel number."""
        if self.modes > 0:
            return self.modes
        return int(round(self.fresnel()))

    def with_updates(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class ModeGrid:
    """Angular mode centers tiling the field of view.

    The grid is the closest-to-square arrangement holding exactly the
    configured number of cells; a partial last row is horizontally
    centered so the tiling stays left/right symmetric.
    """

    centers_x: np.ndarray   # mrad, one entry per mode
    centers_y: np.ndarray
    cell_w_mrad: float      # cell width along x
    cell_h_mrad: float      # cell height along y
    fov_mrad: float

    @property
    def cells(self) -> list[Angle2D]:
        return [Angle2D(float(x), float(y)) for x, y in zip(self.centers_x, self.centers_y)]

    def __len__(self) -> int:
        return len(self.centers_x)


@lru_cache(maxsize=32)
def _grid_arrays(n_modes: int, fov_mrad: float):
    cols = math.ceil(math.sqrt(n_modes))
    rows = math.ceil(n_modes / cols)
    cw = 2.0 * fov_mrad / cols
    ch = 2.0 * fov_mrad / rows
    xs, ys = [], []
    remaining = n_modes
    for r in range(rows):
        in_row = min(cols, remaining)
        remaining -= in_row
        y = -fov_mrad + (r + 0.5) * ch
        # center a partial row so the x marginal stays symmetric
        offset = (cols - in_row) * cw / 2.0
        for c in range(in_row):
            xs.append(-fov_mrad + offset + (c + 0.5) * cw)
            ys.append(y)
    cx = np.array(xs)
    cy = np.array(ys)
    cx.setflags(write=False)
    cy.setflags(write=False)
    return cx, cy, cw, ch


def build_mode_grid(config: ExperimentConfig) -> ModeGrid:
    """Mode centers for a configuration (cached; arrays are read-only)."""
    n = config.mode_count()
    if n < 1:
        raise ParameterError(f"mode count must be >= 1, got {n}")
    cx, cy, cw, ch = _grid_arrays(n, config.fov_mrad)
    return ModeGrid(cx, cy, cw, ch, config.fov_mrad)


def mode_occupancy_weights(config: ExperimentConfig, grid: ModeGrid | None = None) -> np.ndarray:
    """Relative excitation weight per mode.

    Uniform by default; with ``sigma_env_mrad`` set, a Gaussian envelope
    over the mode centers models the angular gain profile of the drive.
    """
    if grid is None:
        grid = build_mode_grid(config)
    if config.sigma_env_mrad <= 0:
        return np.ones(len(grid))
    r2 = grid.centers_x**2 + grid.centers_y**2
    return np.exp(-r2 / (2.0 * config.sigma_env_mrad**2))


# ---------------------------------------------------------------------------
# Config file parsing

# file key -> (dataclass field, scale factor to the stored unit)
_SCALED_KEYS = {
    "lambda_nm": ("wavelength_m", 1e-9),
    "cell_length_cm": ("cell_length_m", 1e-2),
    "beam_radius_mm": ("beam_radius_m", 1e-3),
    "D_m2_per_s": ("diffusion_m2_s", 1.0),
    "tau_us": ("tau_s", 1e-6),
    "gamma0_MHz": ("gamma0_hz", 1e6),
    "t_write_us": ("t_write_s", 1e-6),
    "t_read_us": ("t_read_s", 1e-6),
}

_PLAIN_KEYS = {
    "zeta": "zeta",
    "modes": "modes",
    "eta_read": "eta_read",
    "eta_T": "eta_t",
    "QE": "qe",
    "dark_rate": "dark_rate",
    "delta_theta_mrad": "delta_theta_mrad",
    "noise_rate": "noise_rate",
    "sigma_corr_mrad": "sigma_corr_mrad",
    "sigma_kernel_mrad": "sigma_kernel_mrad",
    "sigma_env_mrad": "sigma_env_mrad",
    "fov_mrad": "fov_mrad",
    "spinwave_fraction": "spinwave_fraction",
    "central_window_mrad": "central_window_mrad",
    "bin_mrad": "bin_mrad",
    "time_bins": "time_bins",
    "od": "od",
}

_INT_FIELDS = {"modes"}
_BOOL_FIELDS = {"time_bins"}

# Keys owned by the frame pipeline (camera geometry, spot model, extraction
# thresholds). They live in the same config file; the physics parser must
# accept them, and frames/extract parse them from the same pairs.
AUXILIARY_KEYS = frozenset({
    "frame_width_px", "frame_height_px", "region_split_px",
    "spot_amplitude", "spot_sigma_px", "noise_floor", "noise_sigma",
    "threshold_sigma", "min_spot_px", "max_spot_px",
})


def parse_key_values(text: str, source: str = "<string>") -> dict[str, str]:
    """Parse ``key = value`` lines; comments and blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigFileError(f"{source}:{lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigFileError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_text(text: str, source: str = "<string>") -> ExperimentConfig:
    return config_from_pairs(parse_key_values(text, source), source)


def config_from_pairs(pairs: dict[str, str], source: str = "<string>") -> ExperimentConfig:
    kwargs = {}
    for key, value in pairs.items():
        if key in AUXILIARY_KEYS:
            continue
        if key in _SCALED_KEYS:
            name, scale = _SCALED_KEYS[key]
            try:
                kwargs[name] = float(value) * scale
            except ValueError as exc:
                raise ConfigFileError(f"{source}: bad numeric value for {key}: {value!r}") from exc
        elif key in _PLAIN_KEYS:
            name = _PLAIN_KEYS[key]
            try:
                if name in _BOOL_FIELDS:
                    if value.lower() not in ("true", "false", "0", "1"):
                        raise ValueError(value)
                    kwargs[name] = value.lower() in ("true", "1")
                elif name in _INT_FIELDS:
                    kwargs[name] = int(value)
                else:
                    kwargs[name] = float(value)
            except ValueError as exc:
                raise ConfigFileError(f"{source}: bad value for {key}: {value!r}") from exc
        else:
            raise ConfigFileError(f"{source}: unknown config key {key!r}")
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return config_from_text(path.read_text(), source=str(path))


def config_to_text(config: ExperimentConfig) -> str:
    """Serialize a config in the file format (inverse of :func:`config_from_text`)."""
    lines = ["# holomux experiment configuration"]
    for key, (name, scale) in _SCALED_KEYS.items():
        lines.append(f"{key} = {getattr(config, name) / scale:.10g}")
    for key, name in _PLAIN_KEYS.items():
        v = getattr(config, name)
        if name in _BOOL_FIELDS:
            lines.append(f"{key} = {'true' if v else 'false'}")
        elif name in _INT_FIELDS:
            lines.append(f"{key} = {v}")
        else:
            lines.append(f"{key} = {v:.10g}")
    return "\n".join(lines) + "\n"


def builtin_preset(name: str) -> ExperimentConfig:
    """Load one of the configurations shipped with the package."""
    from importlib.resources import files

    resource = files("holomux.presets").joinpath(f"{name}.conf")
    try:
        text = resource.read_text()
    except FileNotFoundError as exc:
        raise ConfigFileError(f"no built-in preset named {name!r}") from exc
    return config_from_text(text, source=f"preset:{name}")
