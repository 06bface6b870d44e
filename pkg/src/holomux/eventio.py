"""File formats shared by the CLI stages.

Numeric CSV output is fixed at 6 significant digits (Python's correctly
rounded, round-half-even float formatting), which makes output files
byte-identical across platforms for identical inputs.
"""

from __future__ import annotations

import hashlib
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigFileError, ParameterError
from .memory import REGION_ANTISTOKES, REGION_STOKES, ShotRecord

EVENT_HEADER = "shot_id,region,theta_x_mrad,theta_y_mrad"
EVENT_HEADER_TIMED = EVENT_HEADER + ",time_bin_ns"
TRUTH_HEADER = "shot_id,stokes_idx,antistokes_idx"


def fmt(x: float) -> str:
    """Canonical 6-significant-digit representation used in all CSV output."""
    return f"{x:.6g}"


@dataclass
class EventTable:
    """Columnar view of an event stream, grouped by shot."""

    shot_id: np.ndarray     # int64
    region: np.ndarray      # uint8, 0 = Stokes, 1 = anti-Stokes
    theta_x: np.ndarray     # mrad
    theta_y: np.ndarray
    time_bin_ns: np.ndarray | None = None
    n_shots: int = 0        # number of shots represented (including empty ones)

    def __len__(self) -> int:
        return len(self.shot_id)

    REGION_CODE = {REGION_STOKES: 0, REGION_ANTISTOKES: 1}
    REGION_NAME = {0: REGION_STOKES, 1: REGION_ANTISTOKES}


class EventTableBuilder:
    """Accumulates shot records into an :class:`EventTable` without holding them."""

    def __init__(self, timed: bool = False):
        self.timed = timed
        self._sid: list[int] = []
        self._reg: list[int] = []
        self._x: list[float] = []
        self._y: list[float] = []
        self._t: list[int] = []
        self.n_shots = 0

    def add_record(self, record: ShotRecord):
        self.n_shots += 1
        for code, events in ((0, record.stokes_events), (1, record.antistokes_events)):
            for ev in events:
                self._sid.append(record.shot_id)
                self._reg.append(code)
                self._x.append(ev.angle.theta_x)
                self._y.append(ev.angle.theta_y)
                if self.timed:
                    self._t.append(ev.time_bin_ns if ev.time_bin_ns is not None else -1)

    def build(self) -> EventTable:
        return EventTable(
            shot_id=np.asarray(self._sid, dtype=np.int64),
            region=np.asarray(self._reg, dtype=np.uint8),
            theta_x=np.asarray(self._x, dtype=float),
            theta_y=np.asarray(self._y, dtype=float),
            time_bin_ns=np.asarray(self._t, dtype=np.int64) if self.timed else None,
            n_shots=self.n_shots,
        )


def write_events_csv(path: str | Path, table: EventTable):
    with atomic_output(path) as fh:
        fh.write((EVENT_HEADER_TIMED if table.time_bin_ns is not None else EVENT_HEADER) + "\n")
        fh.write(f"# n_shots = {table.n_shots}\n")
        for i in range(len(table)):
            row = (f"{table.shot_id[i]},{EventTable.REGION_NAME[int(table.region[i])]},"
                   f"{fmt(table.theta_x[i])},{fmt(table.theta_y[i])}")
            if table.time_bin_ns is not None:
                row += f",{table.time_bin_ns[i]}"
            fh.write(row + "\n")


def read_events_csv(path: str | Path) -> EventTable:
    path = Path(path)
    sid, reg, xs, ys, ts = [], [], [], [], []
    timed = False
    n_shots = 0
    with open(path) as fh:
        header = fh.readline().strip()
        if header == EVENT_HEADER_TIMED:
            timed = True
        elif header != EVENT_HEADER:
            raise ConfigFileError(f"{path}: unrecognized event CSV header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.startswith("n_shots"):
                    n_shots = int(body.split("=", 1)[1])
                continue
            parts = line.split(",")
            if len(parts) != (5 if timed else 4):
                raise ConfigFileError(f"{path}:{lineno}: malformed event row {line!r}")
            sid.append(int(parts[0]))
            if parts[1] not in EventTable.REGION_CODE:
                raise ConfigFileError(f"{path}:{lineno}: unknown region {parts[1]!r}")
            reg.append(EventTable.REGION_CODE[parts[1]])
            xs.append(float(parts[2]))
            ys.append(float(parts[3]))
            if timed:
                ts.append(int(parts[4]))
    if n_shots == 0 and sid:
        n_shots = int(max(sid)) + 1
    return EventTable(
        shot_id=np.asarray(sid, dtype=np.int64),
        region=np.asarray(reg, dtype=np.uint8),
        theta_x=np.asarray(xs, dtype=float),
        theta_y=np.asarray(ys, dtype=float),
        time_bin_ns=np.asarray(ts, dtype=np.int64) if timed else None,
        n_shots=n_shots,
    )


def write_truth_csv(path: str | Path, rows):
    """``rows`` yields (shot_id, stokes_idx, antistokes_idx) triples."""
    with atomic_output(path) as fh:
        fh.write(TRUTH_HEADER + "\n")
        for sid, si, ai in rows:
            fh.write(f"{sid},{si},{ai}\n")


def read_truth_csv(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TRUTH_HEADER:
            raise ConfigFileError(f"{path}: unrecognized truth CSV header {header!r}")
        rows = [tuple(int(p) for p in line.strip().split(","))
                for line in fh if line.strip() and not line.startswith("#")]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# keyvalue reports

def write_keyvalue(path: str | Path, pairs: dict):
    with atomic_output(path) as fh:
        for key, value in pairs.items():
            if isinstance(value, float):
                fh.write(f"{key} = {fmt(value)}\n")
            else:
                fh.write(f"{key} = {value}\n")


def read_keyvalue(path: str | Path) -> dict[str, str]:
    from .config import parse_key_values

    path = Path(path)
    return parse_key_values(path.read_text(), source=str(path))


# ---------------------------------------------------------------------------
# atomic output and hashing

@contextmanager
def atomic_output(path: str | Path, mode: str = "w"):
    """Write to a temp file and rename on success, so failures leave nothing."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    try:
        with open(tmp, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
