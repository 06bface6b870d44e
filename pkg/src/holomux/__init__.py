"""holomux: simulation and analysis of an angularly multiplexed photon-pair memory.

The package covers the full chain from Monte Carlo shot generation
(write / store / read with diffusion losses and detector imperfections)
through synthetic camera frames, single-photon spot extraction,
stripe-gated coincidence histograms with accidental subtraction,
correlation-width fitting and mode counting, diffusion-model fits,
and rate planning for a multiplexed heralded photon source.
"""

__version__ = "0.1.0"

from .geometry import (
    Angle2D,
    WaveVector,
    fresnel_number,
    phase_matched_angle,
    sigma_from_width,
    wavevector_from_angle,
    width_from_sigma,
)
from .config import ExperimentConfig, ModeGrid, build_mode_grid

__all__ = [
    "Angle2D",
    "WaveVector",
    "ExperimentConfig",
    "ModeGrid",
    "build_mode_grid",
    "fresnel_number",
    "phase_matched_angle",
    "wavevector_from_angle",
    "width_from_sigma",
    "sigma_from_width",
    "__version__",
]
