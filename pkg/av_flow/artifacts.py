from __future__ import annotations

import csv
import json
import math
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from av_flow.diffop import GridFunction
from av_flow.errors import ArtifactError

METADATA = "metadata.json"
TRACE = "trace.csv"
STATES = "states.bin"
EVENTS = "events.jsonl"

TRACE_COLUMNS = [
    "step",
    "time",
    "energy",
    "mass",
    "euler_lagrange_residual",
    "normal_trace_residual",
    "fenchel_gap",
    "boundary_subgradient_residual",
]


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


@contextmanager
def _io(path: Path) -> Iterator[None]:
    try:
        yield
    except OSError as e:
        raise ArtifactError(str(path), e.strerror or str(e)) from e


def jsonable(value: Any) -> Any:
    # json cannot carry numpy scalars or non-finite floats.
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else str(v)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def prepare_run_dir(path: Path) -> Path:
    with _io(path):
        path.mkdir(parents=True, exist_ok=True)
        # A rerun starts a fresh event log.
        (path / EVENTS).unlink(missing_ok=True)
    return path


def write_json(path: Path, data: dict[str, Any]) -> None:
    with _io(path):
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(jsonable(data), indent=2, sort_keys=False) + "\n", encoding="utf-8")
        tmp.replace(path)


def read_json(path: Path) -> dict[str, Any]:
    with _io(path):
        text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArtifactError(str(path), f"malformed json: {e}") from e
    if not isinstance(data, dict):
        raise ArtifactError(str(path), "expected a json object")
    return data


def append_event(run_dir: Path, event: dict[str, Any]) -> None:
    p = run_dir / EVENTS
    event = dict(event)
    event.setdefault("schema", 1)
    event.setdefault("timestamp", _now_iso())
    with _io(p):
        with p.open("a", encoding="utf-8") as f:
            f.write(json.dumps(jsonable(event), separators=(",", ":")) + "\n")


def read_events(path: Path) -> list[dict[str, Any]]:
    """Malformed lines are skipped."""

    events: list[dict[str, Any]] = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        return events
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            events.append(obj)
    return events


def write_csv(path: Path, rows: Iterable[dict[str, Any]], columns: list[str]) -> None:
    with _io(path):
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row.get(k)) for k in columns})


def read_csv(path: Path) -> list[dict[str, str]]:
    with _io(path):
        with path.open("r", encoding="utf-8", newline="") as f:
            return list(csv.DictReader(f))


def _fmt(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_states(path: Path, states: list[GridFunction]) -> dict[str, Any]:
    """Raw float64, C order: (states, *node_shape, m). Returns the layout record."""

    if not states:
        raise ArtifactError(str(path), "no states to write")
    block = np.stack([s.values for s in states]).astype("<f8", copy=False)
    with _io(path):
        tmp = path.with_suffix(".tmp")
        block.tofile(tmp)
        tmp.replace(path)
    return {"dtype": "float64", "byteorder": "little", "order": "C", "shape": list(block.shape)}


def read_states(path: Path, layout: dict[str, Any]) -> np.ndarray:
    with _io(path):
        data = np.fromfile(path, dtype="<f8")
    shape = tuple(int(s) for s in layout["shape"])
    if data.size != int(np.prod(shape)):
        raise ArtifactError(str(path), f"expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape)


def metadata(**fields: Any) -> dict[str, Any]:
    out = {"schema": 1, "created": _now_iso()}
    out.update(fields)
    return out


def write_dat(path: Path, columns: list[str], rows: Iterable[Iterable[Any]]) -> None:
    """Whitespace-separated table with a '#' header, as plotting tools expect."""

    lines = ["# " + " ".join(columns)]
    for row in rows:
        lines.append(" ".join(_dat_cell(v) for v in row))
    with _io(path):
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _dat_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.12g}"
    return str(value)
