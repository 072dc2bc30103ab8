"""CSV report writers and the run-directory summary bundle."""

from __future__ import annotations

import csv
import json
import subprocess
from pathlib import Path

from . import __version__


def write_csv(path, fields, rows) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            vals = [r[f] for f in fields] if isinstance(r, dict) else list(r)
            w.writerow([_fmt(v) for v in vals])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> list[dict]:
    """Parse a report CSV; ragged rows raise ``ValueError`` naming file and line."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty CSV") from None
        except csv.Error as exc:
            raise ValueError(f"{path}:1: {exc}") from exc
        rows = []
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                raise ValueError(f"{path}:{reader.line_num}: {exc}") from exc
            if len(row) != len(header):
                raise ValueError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            rows.append(dict(zip(header, (_parse(v) for v in row))))
    return rows


def _parse(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _run_section(run_dir: Path) -> dict:
    reports = {}
    for p in sorted(run_dir.iterdir()):
        if p.suffix == ".csv":
            reports[p.stem] = read_csv(p)
        elif p.suffix == ".json" and p.name != "config.json":
            try:
                reports[p.stem] = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ValueError(f"{p}:{exc.lineno}: {exc.msg}") from exc
    if not reports:
        raise ValueError(f"{run_dir}: no reports found")
    config_path = run_dir / "config.json"
    config = json.loads(config_path.read_text()) if config_path.exists() else None
    return {"config": config, "reports": reports}


def report_bundle(*run_dirs) -> dict:
    """Merge the CSV/JSON reports of one or more run directories into one summary.

    A single run gives ``{"version", "config", "reports"}``; several runs are
    keyed by directory name under ``"runs"``.
    """
    dirs = [Path(d) for d in run_dirs]
    if not dirs:
        raise ValueError("no run directories given")
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(d)
    if len(dirs) == 1:
        return {"version": version_string(), **_run_section(dirs[0])}
    return {"version": version_string(), "runs": {d.name: _run_section(d) for d in dirs}}
