import numpy as np
import pytest

from holomux.config import ExperimentConfig
from holomux.errors import ConfigFileError
from holomux.eventio import (
    EventTableBuilder,
    atomic_output,
    fmt,
    read_events_csv,
    read_keyvalue,
    read_truth_csv,
    sha256_file,
    write_events_csv,
    write_keyvalue,
    write_truth_csv,
)
from holomux.memory import run_shot


def test_fmt_six_significant_digits():
    assert fmt(1.23456789) == "1.23457"
    assert fmt(-0.000123456789) == "-0.000123457"
    assert fmt(1e6) == "1e+06"
    assert fmt(0.0) == "0"


def build_table(n_shots=20, seed=3):
    cfg = ExperimentConfig(modes=20, zeta=0.3, fov_mrad=2.0, noise_rate=1.0)
    builder = EventTableBuilder()
    for s in range(n_shots):
        builder.add_record(run_shot(cfg, s, seed))
    return builder.build()


def test_events_csv_round_trip(tmp_path):
    table = build_table()
    path = tmp_path / "events.csv"
    write_events_csv(path, table)
    back = read_events_csv(path)
    assert back.n_shots == table.n_shots
    assert np.array_equal(back.shot_id, table.shot_id)
    assert np.array_equal(back.region, table.region)
    # values survive at the documented 6 significant digits
    assert np.allclose(back.theta_x, table.theta_x, rtol=5.1e-6, atol=1e-7)


def test_events_csv_rejects_garbage(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("nonsense header\n")
    with pytest.raises(ConfigFileError):
        read_events_csv(path)
    path.write_text("shot_id,region,theta_x_mrad,theta_y_mrad\n0,Q,1.0,2.0\n")
    with pytest.raises(ConfigFileError, match="unknown region"):
        read_events_csv(path)


def test_truth_csv_round_trip(tmp_path):
    rows = [(0, 1, 0), (3, 0, 2), (7, 4, 4)]
    path = tmp_path / "truth.csv"
    write_truth_csv(path, rows)
    back = read_truth_csv(path)
    assert back.tolist() == [list(r) for r in rows]


def test_keyvalue_round_trip(tmp_path):
    path = tmp_path / "report.keyvalue"
    write_keyvalue(path, {"alpha": 1.23456789, "n": 7, "name": "run1"})
    back = read_keyvalue(path)
    assert back["alpha"] == "1.23457"
    assert back["n"] == "7"
    assert back["name"] == "run1"


def test_atomic_output_leaves_nothing_on_error(tmp_path):
    target = tmp_path / "out.csv"
    with pytest.raises(RuntimeError):
        with atomic_output(target) as fh:
            fh.write("partial")
            raise RuntimeError("boom")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_atomic_output_replaces_existing(tmp_path):
    target = tmp_path / "out.csv"
    target.write_text("old")
    with atomic_output(target) as fh:
        fh.write("new")
    assert target.read_text() == "new"


def test_sha256_file(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"abc")
    assert sha256_file(p) == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
