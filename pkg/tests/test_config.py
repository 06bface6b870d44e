import numpy as np
import pytest

from holomux.config import (
    ExperimentConfig,
    build_mode_grid,
    config_from_text,
    config_to_text,
    builtin_preset,
    mode_occupancy_weights,
)
from holomux.errors import ConfigFileError, ParameterError


def test_default_mode_count_is_rounded_fresnel():
    cfg = ExperimentConfig()
    assert cfg.mode_count() == round(cfg.fresnel())
    assert cfg.mode_count() == 67


def test_explicit_mode_count_wins():
    cfg = ExperimentConfig(modes=66)
    assert cfg.mode_count() == 66


def test_parse_round_trip():
    cfg = ExperimentConfig(modes=38, zeta=0.18, tau_s=2e-6, fov_mrad=1.6)
    again = config_from_text(config_to_text(cfg))
    assert again == cfg


def test_parse_units():
    cfg = config_from_text("lambda_nm = 780\ntau_us = 2.5\ncell_length_cm = 10\n")
    assert cfg.wavelength_m == pytest.approx(780e-9)
    assert cfg.tau_s == pytest.approx(2.5e-6)
    assert cfg.cell_length_m == pytest.approx(0.10)


def test_comments_and_blank_lines():
    cfg = config_from_text("# a comment\n\nzeta = 0.05  # inline\n")
    assert cfg.zeta == 0.05


def test_unknown_key_is_hard_error():
    with pytest.raises(ConfigFileError, match="unknown config key"):
        config_from_text("zeta = 0.1\nbogus_key = 3\n")


def test_duplicate_key_is_error():
    with pytest.raises(ConfigFileError, match="duplicate"):
        config_from_text("zeta = 0.1\nzeta = 0.2\n")


def test_malformed_line_is_error():
    with pytest.raises(ConfigFileError):
        config_from_text("zeta 0.1\n")


def test_bad_number_is_error():
    with pytest.raises(ConfigFileError):
        config_from_text("zeta = banana\n")


def test_frame_keys_are_accepted_by_physics_parser():
    cfg = config_from_text("zeta = 0.1\nspot_sigma_px = 1.5\nnoise_floor = 90\n")
    assert cfg.zeta == 0.1


def test_efficiencies_bounded():
    with pytest.raises(ParameterError):
        ExperimentConfig(eta_read=1.5)
    with pytest.raises(ParameterError):
        ExperimentConfig(zeta=1.0)


def test_linear_regime_warning():
    with pytest.warns(UserWarning, match="0.47"):
        ExperimentConfig(zeta=0.6)


def test_mode_grid_tiles_without_overlap():
    cfg = ExperimentConfig(modes=66, fov_mrad=2.0)
    grid = build_mode_grid(cfg)
    assert len(grid) == 66
    # all cells inside the field of view
    assert np.all(np.abs(grid.centers_x) <= cfg.fov_mrad - grid.cell_w_mrad / 2 + 1e-12)
    assert np.all(np.abs(grid.centers_y) <= cfg.fov_mrad - grid.cell_h_mrad / 2 + 1e-12)
    # no two cells overlap: centers are unique and at least one cell apart
    pts = np.column_stack((grid.centers_x, grid.centers_y))
    for i in range(len(pts)):
        d = np.abs(pts - pts[i])
        d[i] = np.inf
        sep = (d[:, 0] > grid.cell_w_mrad - 1e-9) | (d[:, 1] > grid.cell_h_mrad - 1e-9)
        assert sep.all()


@pytest.mark.parametrize("m", [1, 2, 9, 38, 64, 66, 67, 100])
def test_mode_grid_count_and_symmetry(m):
    cfg = ExperimentConfig(modes=m, fov_mrad=3.0)
    grid = build_mode_grid(cfg)
    assert len(grid) == m
    # x marginal stays centered even with a partial last row
    assert abs(float(np.mean(grid.centers_x))) < 1e-9


def test_occupancy_weights_uniform_and_enveloped():
    cfg = ExperimentConfig(modes=25, fov_mrad=2.0)
    w = mode_occupancy_weights(cfg)
    assert np.all(w == 1.0)
    cfg_env = cfg.with_updates(sigma_env_mrad=1.0)
    w_env = mode_occupancy_weights(cfg_env)
    grid = build_mode_grid(cfg_env)
    center = np.argmin(grid.centers_x**2 + grid.centers_y**2)
    assert w_env.max() == w_env[center]
    assert w_env.min() < w_env.max() <= 1.0


def test_builtin_presets_load():
    hi = builtin_preset("fig4_high_gain")
    lo = builtin_preset("single_photon")
    assert hi.mode_count() == 66
    assert lo.mode_count() == 38
    assert lo.eta_read == pytest.approx(0.13)
    # the low-gain preset generates 6.9 pairs per shot across the memory
    assert lo.zeta * lo.mode_count() == pytest.approx(6.9, abs=1e-6)
