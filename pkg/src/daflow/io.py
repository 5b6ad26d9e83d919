"""Versioned CSV output, dataset files and binary checkpoints."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

CSV_VERSION_LINE = "# daflow-csv v1"

TRAIN_COLUMNS = ["iter", "epoch", "method", "objective", "grad_norm",
                 "theta_dist_to_ref", "wall_ms", "seed"]
METRIC_COLUMNS = ["run_id", "metric", "value", "N", "d_x", "method", "seed"]
RATE_COLUMNS = ["N", "mean_rel_err", "stderr", "target"]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


class CsvWriter:
    """Append-only writer for one versioned CSV file.

    A new file gets the version comment, an optional ``# config_hash=...``
    line and the column header.  Re-opening an existing file checks the header
    and appends.
    """

    def __init__(self, path, columns, config_hash: str | None = None):
        self.path = Path(path)
        self.columns = list(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self.path.stat().st_size > 0:
            meta, header, _ = _read_raw(self.path)
            if header != self.columns:
                raise ValueError(f"{self.path}: existing columns {header} differ "
                                 f"from {self.columns}")
        else:
            with open(self.path, "w", newline="") as fh:
                fh.write(CSV_VERSION_LINE + "\n")
                if config_hash:
                    fh.write(f"# config_hash={config_hash}\n")
                csv.writer(fh).writerow(self.columns)

    def write(self, rows):
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for row in rows:
                w.writerow([_fmt(row.get(c)) for c in self.columns])


def write_csv(path, columns, rows, config_hash: str | None = None):
    path = Path(path)
    if path.exists():
        path.unlink()
    CsvWriter(path, columns, config_hash).write(rows)


def _read_raw(path):
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CSV_VERSION_LINE:
        raise ValueError(f"{path}: missing '{CSV_VERSION_LINE}' header")
    body = []
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val.strip()
        else:
            body.append(line)
    rows = list(csv.reader(body))
    return meta, rows[0] if rows else [], rows[1:]


def read_csv(path) -> tuple[dict, list[dict]]:
    meta, header, rows = _read_raw(path)
    return meta, [dict(zip(header, r)) for r in rows]


# ---------------------------------------------------------------------------
# datasets


def sequence_columns(d_x: int, d_y: int) -> list[str]:
    return (["t"] + [f"x_{i}" for i in range(d_x)]
            + [f"y_{i}" for i in range(d_y)])


def save_sequence(path, states: np.ndarray, obs: np.ndarray,
                  config_hash: str | None = None):
    """Write ``x_{0:T}`` and ``y_{1:T}``; the ``t = 0`` row has empty ``y``."""
    states = np.asarray(states, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    T, d_x = states.shape[0] - 1, states.shape[1]
    d_y = obs.shape[1]
    if obs.shape[0] != T:
        raise ValueError("need T+1 states and T observations")
    cols = sequence_columns(d_x, d_y)
    rows = []
    for t in range(T + 1):
        row = {"t": t, **{f"x_{i}": states[t, i] for i in range(d_x)}}
        if t > 0:
            row.update({f"y_{i}": obs[t - 1, i] for i in range(d_y)})
        rows.append(row)
    write_csv(path, cols, rows, config_hash)


def load_sequence(path) -> tuple[np.ndarray, np.ndarray]:
    _, header, rows = _read_raw(path)
    xi = [i for i, c in enumerate(header) if c.startswith("x_")]
    yi = [i for i, c in enumerate(header) if c.startswith("y_")]
    states = np.array([[float(r[i]) for i in xi] for r in rows])
    obs = np.array([[float(r[i]) for i in yi] for r in rows[1:]])
    return states, obs.reshape(len(rows) - 1, len(yi))


def load_dataset(directory) -> tuple[np.ndarray, np.ndarray]:
    """Stack every ``seq_<i>.csv`` in ``directory`` (sorted by ``i``)."""
    directory = Path(directory)
    files = sorted(directory.glob("seq_*.csv"),
                   key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no seq_<i>.csv files in {directory}")
    pairs = [load_sequence(f) for f in files]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "DAFLOW-CHECKPOINT 1"


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]):
    """Text header (JSON metadata + array table) followed by raw ``<f8`` data.

    The file is written to a temporary name and renamed, so a crash never
    leaves a truncated checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        table.append({"name": name, "shape": list(a.shape), "offset": offset,
                      "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = "\n".join([_MAGIC, "meta " + json.dumps(meta, sort_keys=True),
                        "arrays " + json.dumps(table), "END"]) + "\n"
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode())
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    lines = raw[:end].decode().split("\n")
    meta = json.loads(lines[1][len("meta "):])
    table = json.loads(lines[2][len("arrays "):])
    data = raw[end + len(b"\nEND\n"):]
    arrays = {}
    for entry in table:
        buf = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(
            entry["shape"]).astype(np.float64)
    return meta, arrays
