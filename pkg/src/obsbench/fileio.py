"""File formats: loadfile CSV, JSON documents, run manifests and output bundles."""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import FormatError
from .model import CellParams, Loadfile, OcvCurve, ParamMap
from .observers import ObserverGains

LOADFILE_COLUMNS = ("time_s", "current_a", "voltage_v", "temp_c")
REQUIRED_COLUMNS = ("time_s", "current_a")
TRAJECTORY_HEADER = ("t", "soc_true", "soc_hat", "v_meas", "v_hat", "e")


def fmt(x) -> str:
    """Shortest round-trip text for a float; stable across runs."""
    if x is None:
        return ""
    return repr(float(x))


# --------------------------------------------------------------------------- loadfile

def parse_loadfile(path) -> Loadfile:
    """Read ``time_s,current_a[,voltage_v][,temp_c]``; errors name the file row."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise FormatError(f"cannot open loadfile {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise FormatError(f"{path}: missing column {col!r}")
        for col in header:
            if col not in LOADFILE_COLUMNS:
                raise FormatError(f"{path}: unknown column {col!r}")
        if len(set(header)) != len(header):
            raise FormatError(f"{path}: duplicated column in header")
        rows = []
        prev_t = None
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise FormatError(f"{path}: row {lineno} has {len(rec)} fields, expected {len(header)}")
            try:
                vals = [float(c) for c in rec]
            except ValueError:
                raise FormatError(f"{path}: row {lineno} has a non-numeric field") from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}: row {lineno} has a non-finite value")
            t = vals[header.index("time_s")]
            if prev_t is not None and not t > prev_t:
                raise FormatError(f"{path}: timestamp not strictly increasing at row {lineno}")
            prev_t = t
            rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    cols = {name: arr[:, header.index(name)] for name in header}
    return Loadfile(cols["time_s"], cols["current_a"], cols.get("voltage_v"), cols.get("temp_c"))


def write_loadfile(path, lf: Loadfile) -> None:
    names = [n for n in LOADFILE_COLUMNS if getattr(lf, n) is not None]
    cols = [getattr(lf, n) for n in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for k in range(len(lf)):
            w.writerow([fmt(c[k]) for c in cols])


# --------------------------------------------------------------------------- JSON

def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON at line {exc.lineno}") from None


def write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_params(path) -> CellParams:
    return CellParams.from_dict(read_json(path))


def read_ocv(path) -> OcvCurve:
    return OcvCurve.from_dict(read_json(path))


def read_param_map(path) -> ParamMap:
    return ParamMap.from_dict(read_json(path))


def read_gains(path) -> ObserverGains:
    return ObserverGains.from_dict(read_json(path))


def read_scenario(path):
    from .harness import Scenario
    return Scenario.from_dict(read_json(path), base_dir=os.path.dirname(os.path.abspath(path)))


# --------------------------------------------------------------------------- manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    version: str
    inputs: dict  # path -> sha256
    scenario: dict | None
    seed: int | None
    timestamp: str
    command: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, inputs=(), scenario=None, seed=None, command="", **extra) -> "RunManifest":
        digests = {str(p): sha256_file(p) for p in inputs if p}
        stamp = _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()
        return cls(__version__, digests, scenario, seed, stamp, command, dict(extra))

    def to_dict(self) -> dict:
        return {"version": self.version, "inputs": dict(self.inputs), "scenario": self.scenario,
                "seed": self.seed, "timestamp": self.timestamp, "command": self.command,
                **({"extra": self.extra} if self.extra else {})}

    @classmethod
    def from_dict(cls, data: dict) -> "RunManifest":
        try:
            return cls(data["version"], dict(data["inputs"]), data.get("scenario"),
                       data.get("seed"), data["timestamp"], data.get("command", ""),
                       dict(data.get("extra", {})))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"bad manifest: {exc}") from None

    def verify(self) -> list:
        """Inputs whose current digest differs from the recorded one."""
        return [p for p, d in self.inputs.items() if not os.path.exists(p) or sha256_file(p) != d]


# --------------------------------------------------------------------------- bundles

def write_trajectory(path, run) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for row in zip(run.t, run.soc_true, run.soc_hat, run.v_meas, run.v_hat, run.e):
            w.writerow([fmt(x) for x in row])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return fmt(v)
    return str(v)


def write_comparison(path, rows: list, columns=None) -> None:
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def write_bundle(out_dir, result, manifest: RunManifest) -> dict:
    """Trajectory CSVs, metrics JSON, comparison CSV and the manifest.

    Wall-clock is left out so reruns reproduce every byte except the
    manifest timestamp; ``obsbench timing`` reports it instead.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    metrics = {}
    for run in result.runs:
        p = os.path.join(out_dir, f"trajectory_{run.name}.csv")
        write_trajectory(p, run)
        paths[run.name] = p
        metrics[run.name] = {
            "soc_pct": run.metrics.to_dict(),
            "voltage_v": run.voltage_metrics.to_dict(),
            "convergence_time_s": run.convergence_time_s,
        }
    metrics["_scenario"] = {"model_voltage_rmse_v": result.model_voltage_rmse_v}
    write_json(os.path.join(out_dir, "metrics.json"), metrics)
    write_comparison(os.path.join(out_dir, "comparison.csv"), result.comparison_rows())
    write_json(os.path.join(out_dir, "manifest.json"), manifest.to_dict())
    return paths
