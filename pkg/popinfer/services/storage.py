"""File formats: price CSV, truth log, run records, ensemble summary and reports.

Run directory layout::

    rundir/
        series.csv
        config.json
        runs/run_0000.jsonl.gz
        summary.csv
        summary.json
        metrics.prom
"""
from __future__ import annotations

import gzip
import json
import re
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd
from prometheus_client import REGISTRY, write_to_textfile

from popinfer.config import settings
from popinfer.core.errors import InputError, SeriesFormatError
from popinfer.core.logging import get_logger
from popinfer.schemas.run import RunConfig
from popinfer.schemas.subset import AgentSubset
from popinfer.schemas.synth import SynthSpec
from popinfer.services.diagnostics import ResidualReport
from popinfer.services.ensemble import EnsembleSummary, RunRecord
from popinfer.services.mg_model import PriceSeries

logger = get_logger(__name__)

PathLike = Union[str, Path]

SERIES_COLUMNS = ["timestamp", "rate"]
SUMMARY_COLUMNS = ["k", "z", "z_hat", "S", "sem"]


# ── Price series ───────────────────────────────────────────────────────────────

def _csv_line(row: int) -> int:
    # header is line 1
    return row + 2


def load_csv(path: PathLike) -> PriceSeries:
    """Read a ``timestamp,rate`` CSV, rejecting malformed or non-positive rates."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"series file not found: {path}")
    try:
        frame = pd.read_csv(
            path,
            dtype={"timestamp": str},
            keep_default_na=False,
            float_precision="round_trip",
        )
    except pd.errors.EmptyDataError as exc:
        raise SeriesFormatError(f"{path} is empty") from exc
    except pd.errors.ParserError as exc:
        found = re.search(r"line (\d+)", str(exc))
        raise SeriesFormatError(f"{path}: malformed row", [int(found.group(1))] if found else None) from exc

    if list(frame.columns) != SERIES_COLUMNS:
        raise SeriesFormatError(f"{path}: header must be '{','.join(SERIES_COLUMNS)}'", [1])
    if frame.empty:
        raise SeriesFormatError(f"{path} has no data rows")

    rates = pd.to_numeric(frame["rate"], errors="coerce") if frame["rate"].dtype == object else frame["rate"]
    bad = np.flatnonzero(rates.isna().to_numpy())
    if bad.size:
        raise SeriesFormatError(f"{path}: non-numeric rate", [_csv_line(i) for i in bad])
    values = rates.to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(values) | (values <= 0))
    if bad.size:
        raise SeriesFormatError(f"{path}: rates must be positive", [_csv_line(i) for i in bad])

    logger.debug("series_loaded", path=str(path), length=len(values))
    return PriceSeries(values, tuple(frame["timestamp"]))


def save_csv(series: PriceSeries, path: PathLike) -> None:
    frame = pd.DataFrame({"timestamp": list(series.timestamps), "rate": series.rates})
    frame.to_csv(path, index=False)


# ── Configuration documents ────────────────────────────────────────────────────

def load_run_config(path: PathLike) -> RunConfig:
    return RunConfig.model_validate_json(Path(path).read_text())


def load_synth_spec(path: PathLike) -> SynthSpec:
    return SynthSpec.model_validate_json(Path(path).read_text())


def write_json(document: Dict, path: PathLike) -> None:
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


# ── Truth log ──────────────────────────────────────────────────────────────────

def write_truth(truth: Iterable[Dict], path: PathLike) -> None:
    with open(path, "w") as fh:
        for entry in truth:
            fh.write(json.dumps(entry) + "\n")


def read_truth(path: PathLike) -> List[Dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ── Run records ────────────────────────────────────────────────────────────────

def write_run_record(record: RunRecord, path: PathLike) -> None:
    """Gzip JSON lines: one header line, then one line per step."""
    header = {
        "run_index": record.run_index,
        "seed": record.seed,
        "subset": record.subset.model_dump(),
        "flagged": record.flagged,
        "error": record.error,
        "forecast": record.forecast,
        "state_dim": int(record.x.shape[1]),
    }
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write((json.dumps(header) + "\n").encode())
        for i in range(record.n_steps):
            step = {
                "k": int(record.k[i]),
                "z": float(record.z[i]),
                "z_hat": float(record.z_hat[i]),
                "nu": float(record.nu[i]),
                "S": float(record.S[i]),
                "x": [float(v) for v in record.x[i]],
                "active": list(record.active[i]),
            }
            fh.write((json.dumps(step) + "\n").encode())


def read_run_record(path: PathLike) -> RunRecord:
    with gzip.open(path, "rt") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise InputError(f"run record {path} is empty")
    header, steps = lines[0], lines[1:]
    dim = header["state_dim"]
    return RunRecord(
        run_index=header["run_index"],
        seed=header["seed"],
        subset=AgentSubset.model_validate(header["subset"]),
        k=np.array([s["k"] for s in steps], dtype=int),
        z=np.array([s["z"] for s in steps], dtype=float),
        z_hat=np.array([s["z_hat"] for s in steps], dtype=float),
        nu=np.array([s["nu"] for s in steps], dtype=float),
        S=np.array([s["S"] for s in steps], dtype=float),
        x=np.array([s["x"] for s in steps], dtype=float).reshape(len(steps), dim),
        active=[tuple(s["active"]) for s in steps],
        flagged=header["flagged"],
        error=header["error"],
        forecast=header["forecast"],
    )


# ── Ensemble summary ───────────────────────────────────────────────────────────

def write_summary(summary: EnsembleSummary, rundir: PathLike) -> None:
    rundir = Path(rundir)
    frame = pd.DataFrame({
        "k": summary.k, "z": summary.z, "z_hat": summary.z_hat, "S": summary.S, "sem": summary.sem,
    })
    frame.to_csv(rundir / "summary.csv", index=False)
    write_json({"n_runs": summary.n_runs, "flagged": summary.flagged, "forecast": summary.forecast},
               rundir / "summary.json")


def read_summary(rundir: PathLike) -> EnsembleSummary:
    rundir = Path(rundir)
    csv_path, meta_path = rundir / "summary.csv", rundir / "summary.json"
    if not csv_path.is_file() or not meta_path.is_file():
        raise InputError(f"{rundir} does not contain summary.csv and summary.json")
    frame = pd.read_csv(csv_path, float_precision="round_trip")
    meta = json.loads(meta_path.read_text())
    return EnsembleSummary(
        k=frame["k"].to_numpy(dtype=int),
        z=frame["z"].to_numpy(dtype=float),
        z_hat=frame["z_hat"].to_numpy(dtype=float),
        S=frame["S"].to_numpy(dtype=float),
        sem=frame["sem"].to_numpy(dtype=float),
        n_runs=meta["n_runs"],
        flagged=list(meta["flagged"]),
        forecast=meta["forecast"],
    )


# ── Run directory ──────────────────────────────────────────────────────────────

def write_rundir(
    rundir: PathLike,
    series: PriceSeries,
    cfg: RunConfig,
    summary: EnsembleSummary,
    records: Sequence[RunRecord],
) -> Path:
    rundir = Path(rundir)
    runs_dir = rundir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    save_csv(series, rundir / "series.csv")
    (rundir / "config.json").write_text(cfg.model_dump_json(indent=2) + "\n")
    for record in records:
        write_run_record(record, runs_dir / f"run_{record.run_index:04d}.jsonl.gz")
    write_summary(summary, rundir)
    write_to_textfile(str(rundir / settings.metrics_filename), REGISTRY)

    logger.info("rundir_written", rundir=str(rundir), runs=len(records))
    return rundir


def read_run_records(rundir: PathLike) -> List[RunRecord]:
    return [read_run_record(p) for p in sorted((Path(rundir) / "runs").glob("run_*.jsonl.gz"))]


# ── Reports ────────────────────────────────────────────────────────────────────

def write_report(report: ResidualReport, path: PathLike) -> Path:
    """Report CSV plus a JSON summary next to it (same stem, .json)."""
    path = Path(path)
    report.to_frame().to_csv(path, index=False, na_rep="")
    summary_path = path.with_suffix(".json")
    write_json(report.summary(), summary_path)
    return summary_path
