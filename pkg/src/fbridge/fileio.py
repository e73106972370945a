"""On-disk formats: observation files, flat configs, traces, summaries.

Observations travel as a CSV of ``time, v1, ..., vm`` rows plus a JSON
sidecar holding the per-time readout matrix L and noise covariance Sigma
(these cannot be expressed in a flat CSV).  Rows may have fewer readout
entries than the widest row; the sidecar is authoritative for per-time
dimensions.  Floats are written with 17 significant digits so a write and
read round trip is exact.

Run configuration files are flat ``key = value`` lines; '#' starts a
comment.  Vectors are comma separated ("0.5, 1.0"), matrices use ';'
between rows ("1, 0; 0, 1").
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .models import ObservationScheme, PathSegment


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_observations(csv_path, schema_path, scheme: ObservationScheme) -> None:
    """Write a scheme with values to a CSV and its JSON sidecar."""
    if scheme.values is None:
        raise ConfigError("cannot write an observation scheme without values")
    m_max = max(L.shape[0] for L in scheme.lmats)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + [f"v{j + 1}" for j in range(m_max)])
        for i, t in enumerate(scheme.times):
            row = [_fmt(t)] + [_fmt(v) for v in scheme.values[i]]
            row += [""] * (1 + m_max - len(row))
            writer.writerow(row)
    records = []
    for i, t in enumerate(scheme.times):
        records.append({
            "time": float(t),
            "L": [[float(v) for v in row] for row in scheme.lmats[i]],
            "Sigma": [[float(v) for v in row] for row in scheme.covs[i]],
        })
    with open(schema_path, "w") as fh:
        json.dump({"readouts": records}, fh, indent=1)


def read_observations(csv_path, schema_path=None) -> ObservationScheme:
    """Read a scheme (with values) from a CSV and its JSON sidecar.

    The sidecar path defaults to the CSV path with a .json suffix.
    """
    csv_path = Path(csv_path)
    if schema_path is None:
        schema_path = csv_path.with_suffix(".json")
    try:
        with open(schema_path) as fh:
            schema = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"observation sidecar not found: {schema_path}") from None
    records = schema.get("readouts")
    if not records:
        raise ConfigError("observation sidecar carries no readouts")
    times = [rec["time"] for rec in records]
    lmats = [np.asarray(rec["L"], dtype=float) for rec in records]
    covs = [np.asarray(rec["Sigma"], dtype=float) for rec in records]
    values = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "time":
            raise ConfigError("observation CSV must start with a 'time' header")
        rows = [row for row in reader if row]
    if len(rows) != len(records):
        raise ConfigError("observation CSV and sidecar disagree on row count")
    for i, row in enumerate(rows):
        t = float(row[0])
        if abs(t - times[i]) > 1e-9:
            raise ConfigError(f"row {i} time {t:g} does not match the sidecar")
        m = lmats[i].shape[0]
        vals = [v for v in row[1:] if v != ""]
        if len(vals) != m:
            raise ConfigError(f"row {i} has {len(vals)} readout entries, "
                              f"sidecar expects {m}")
        values.append(np.array([float(v) for v in vals]))
    return ObservationScheme(times, lmats, covs, values)


def parse_config(path) -> dict[str, str]:
    """Flat key = value file; later keys override earlier ones."""
    cfg: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def parse_vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.replace(";", ",").split(",") if
                         v.strip() != ""])
    except ValueError:
        raise ConfigError(f"cannot parse vector from '{text}'") from None


def parse_matrix(text: str) -> np.ndarray:
    rows = [r for r in text.split(";") if r.strip() != ""]
    try:
        mat = [[float(v) for v in r.replace(",", " ").split()] for r in rows]
    except ValueError:
        raise ConfigError(f"cannot parse matrix from '{text}'") from None
    if not mat or any(len(r) != len(mat[0]) for r in mat):
        raise ConfigError(f"matrix rows disagree on length in '{text}'")
    return np.array(mat, dtype=float)


def write_trace_jsonl(path, trace) -> None:
    """One JSON object per sweep; see Trace.records for the fields."""
    with open(path, "w") as fh:
        for rec in trace.records():
            fh.write(json.dumps(rec) + "\n")


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=1)


def write_path_csv(path, segment: PathSegment) -> None:
    d = segment.values.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + [f"x{j + 1}" for j in range(d)])
        for t, x in zip(segment.grid, segment.values):
            writer.writerow([_fmt(t)] + [_fmt(v) for v in x])


def write_band_csv(path, grid, mean, lo, hi) -> None:
    """Posterior band output: per-time mean and quantile bounds per state."""
    mean = np.atleast_2d(mean)
    d = mean.shape[1]
    header = ["time"]
    for j in range(d):
        header += [f"mean{j + 1}", f"lo{j + 1}", f"hi{j + 1}"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, t in enumerate(grid):
            row = [_fmt(t)]
            for j in range(d):
                row += [_fmt(mean[i, j]), _fmt(lo[i, j]), _fmt(hi[i, j])]
            writer.writerow(row)
