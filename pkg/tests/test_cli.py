import numpy as np
import pytest
from click.testing import CliRunner

from holomux.cli import main
from holomux.coincidence import make_edges, write_histogram_csv
from holomux.eventio import read_events_csv, read_keyvalue


@pytest.fixture
def runner():
    return CliRunner()


TEST_CONF = """
modes = 25
zeta = 0.25
fov_mrad = 2.0
sigma_env_mrad = 1.2
eta_read = 0.6
eta_T = 1.0
QE = 1.0
noise_rate = 0.3
dark_rate = 0.0
D_m2_per_s = 7.3e-3
frame_width_px = 512
frame_height_px = 256
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "test.conf"
    path.write_text(TEST_CONF)
    return path


def test_version(runner):
    out = runner.invoke(main, ["--version"])
    assert out.exit_code == 0
    assert "holomux" in out.output


def test_simulate_writes_events_and_manifest(runner, conf, tmp_path):
    out_dir = tmp_path / "sim"
    result = runner.invoke(main, [
        "simulate", "--config", str(conf), "--shots", "200", "--seed", "5",
        "--out", str(out_dir), "--emit-truth"])
    assert result.exit_code == 0, result.output
    table = read_events_csv(out_dir / "events.csv")
    assert table.n_shots == 200
    assert (out_dir / "truth.csv").exists()
    manifest = read_keyvalue(out_dir / "manifest.keyvalue")
    assert manifest["shots"] == "200"
    assert manifest["master_seed"] == "5"


def test_full_chain_render_extract_coincide(runner, conf, tmp_path):
    sim = tmp_path / "sim"
    r = runner.invoke(main, ["simulate", "--config", str(conf), "--shots", "60",
                             "--seed", "3", "--out", str(sim)])
    assert r.exit_code == 0, r.output
    ren = tmp_path / "frames"
    r = runner.invoke(main, ["render", "--config", str(conf),
                             "--events", str(sim / "events.csv"),
                             "--seed", "3", "--out", str(ren)])
    assert r.exit_code == 0, r.output
    assert (ren / "frames.holo").exists()
    ext = tmp_path / "extracted"
    r = runner.invoke(main, ["extract", "--config", str(conf),
                             "--frames", str(ren / "frames.holo"),
                             "--out", str(ext)])
    assert r.exit_code == 0, r.output
    original = read_events_csv(sim / "events.csv")
    recovered = read_events_csv(ext / "events.csv")
    # extraction recovers nearly every rendered photon
    assert len(recovered) >= 0.95 * len(original)
    coin = tmp_path / "coin"
    r = runner.invoke(main, ["coincide", "--config", str(conf),
                             "--events", str(ext / "events.csv"),
                             "--delta-theta", "0.3", "--bin", "0.15",
                             "--out", str(coin)])
    assert r.exit_code == 0, r.output
    assert (coin / "hist.csv").exists()


def test_fit_modes_on_synthetic_histogram(runner, tmp_path):
    from tests.test_coincidence import synthetic_histogram

    edges = make_edges(4.0, 0.15)
    hist = synthetic_histogram(0.3, 1.6, 30_000, edges, seed=6)
    hist_path = tmp_path / "hist.csv"
    write_histogram_csv(hist_path, hist, np.zeros_like(hist.n2))
    out_dir = tmp_path / "fit"
    r = runner.invoke(main, ["fit-modes", "--hist", str(hist_path),
                             "--out", str(out_dir)])
    assert r.exit_code == 0, r.output
    fit = read_keyvalue(out_dir / "fit.keyvalue")
    assert float(fit["modes"]) == pytest.approx(2 * (1.6 / 0.3) ** 2, rel=0.1)


def test_fit_diffusion_cli(runner, tmp_path):
    from tests.test_diffusion import TestFitDiffusion
    from holomux.diffusion import write_widths_csv

    series = TestFitDiffusion.synthetic(1.2e-4, seed=2)
    widths = tmp_path / "widths.csv"
    write_widths_csv(widths, series)
    out_dir = tmp_path / "dfit"
    r = runner.invoke(main, ["fit-diffusion", "--series", str(widths),
                             "--lambda-nm", "795", "--sigma-kernel-mrad", "0.30",
                             "--out", str(out_dir)])
    assert r.exit_code == 0, r.output
    fit = read_keyvalue(out_dir / "diffusion.keyvalue")
    assert float(fit["D_m2_per_s"]) == pytest.approx(1.2e-4, rel=0.05)


def test_plan_table(runner, tmp_path):
    out = tmp_path / "table.csv"
    r = runner.invoke(main, ["plan", "--zeta", "0.01", "--modes", "100",
                             "--eta-h", "0.15", "--n", "8", "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert "0.6340" in r.output
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "N,p_multiplexed,p_independent,ratio,log10_ratio"
    assert len(lines) == 9


def test_plan_requires_arguments(runner):
    r = runner.invoke(main, ["plan"])
    assert r.exit_code != 0


def test_plan_route(runner, tmp_path):
    triggers = tmp_path / "triggers.csv"
    triggers.write_text("theta_x_mrad,theta_y_mrad\n2.0,0.0\n-0.5,0.1\n0.4,0.4\n")
    out = tmp_path / "plan.csv"
    r = runner.invoke(main, ["plan", "route", "--triggers", str(triggers),
                             "--ports", "2", "--out", str(out)])
    assert r.exit_code == 0, r.output
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("port,")
    assert len(lines) == 4
    assert lines[1].startswith("0,-0.5,0.1,0.5,-0.1")
    assert lines[3].startswith("-1,")


def test_reproduce_fig4_smoke(runner, conf, tmp_path):
    out_dir = tmp_path / "fig4"
    r = runner.invoke(main, [
        "reproduce", "fig4", "--config", str(conf),
        "--tau-list-us", "0,1,3", "--shots", "2500", "--seed", "6",
        "--no-figures", "--out", str(out_dir)])
    assert r.exit_code == 0, r.output
    assert (out_dir / "widths.csv").exists()
    assert (out_dir / "modes.csv").exists()
    assert not (out_dir / "modes_vs_tau.png").exists()


def test_reproduce_single_photon_smoke(runner, conf, tmp_path):
    out_dir = tmp_path / "sp"
    r = runner.invoke(main, [
        "reproduce", "single-photon", "--config", str(conf), "--shots", "4000",
        "--seed", "2", "--out", str(out_dir)])
    assert r.exit_code == 0, r.output
    assert (out_dir / "report.keyvalue").exists()
    assert (out_dir / "single_photon_level.png").exists()


def test_error_exits_nonzero_without_partial_output(runner, conf, tmp_path):
    # an unsorted event stream is a hard error in coincide
    bad = tmp_path / "bad.csv"
    bad.write_text("shot_id,region,theta_x_mrad,theta_y_mrad\n"
                   "0,S,0.1,0.1\n1,S,0.2,0.2\n0,AS,-0.1,-0.1\n")
    out_dir = tmp_path / "coin"
    r = runner.invoke(main, ["coincide", "--config", str(conf),
                             "--events", str(bad), "--out", str(out_dir)])
    assert r.exit_code != 0
    assert not (out_dir / "hist.csv").exists()


def test_unknown_config_key_fails_cleanly(runner, tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("zeta = 0.1\nmystery = 1\n")
    out_dir = tmp_path / "x"
    r = runner.invoke(main, ["simulate", "--config", str(conf), "--shots", "5",
                             "--seed", "1", "--out", str(out_dir)])
    assert r.exit_code != 0
    assert not out_dir.exists() or not (out_dir / "events.csv").exists()
