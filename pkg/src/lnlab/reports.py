"""Report emission: CSV and JSON-lines rows with round-trippable numbers.

Column layouts are fixed per report kind:

    bounds : check,placement,D,delta_t,gamma_max,beta_max,lhs,rhs,margin,seed
    moments: layer,ma,var,frob,seed,placement,delta_t
    trials : placement,weight_decay,seed,diverged,first_divergence_step,final_loss

Floats are serialized with 17 significant digits, so reading a file back
reproduces every value bit-exactly.  All writes go through a single lock.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

CSV = "csv"
JSONL = "jsonl"
_FORMATS = (CSV, JSONL)

BOUNDS_COLUMNS = (
    "check", "placement", "D", "delta_t", "gamma_max", "beta_max",
    "lhs", "rhs", "margin", "seed",
)
MOMENTS_COLUMNS = ("layer", "ma", "var", "frob", "seed", "placement", "delta_t")
TRIALS_COLUMNS = (
    "placement", "weight_decay", "seed", "diverged", "first_divergence_step", "final_loss",
)
GRADCHECK_COLUMNS = ("category", "instance", "d", "n", "heads", "depth", "rel_err", "seed")

_write_lock = threading.Lock()


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def _json_value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        if v != v:
            return "NaN"
        if v == float("inf"):
            return "Infinity"
        if v == float("-inf"):
            return "-Infinity"
        return "%.17g" % v
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)


def write_report(rows: list[dict], columns: tuple[str, ...], path, fmt: str = CSV) -> None:
    """Write homogeneous rows to ``path``; missing keys are emitted as empty."""
    if fmt not in _FORMATS:
        raise ValueError(f"unknown format {fmt!r}, expected one of {_FORMATS}")
    path = Path(path)
    if fmt == CSV:
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join(format_value(row.get(c)) for c in columns))
    else:
        lines = []
        for row in rows:
            parts = ", ".join(
                f"{json.dumps(c)}: {_json_value(row.get(c))}" for c in columns
            )
            lines.append("{" + parts + "}")
    text = "\n".join(lines) + "\n"
    with _write_lock:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _parse_cell(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_report(path) -> list[dict]:
    """Read a CSV or JSON-lines report back into row dicts."""
    path = Path(path)
    raw = path.read_text().rstrip("\n")
    if not raw:
        return []
    lines = raw.split("\n")
    if lines[0].lstrip().startswith("{"):
        return [json.loads(line) for line in lines]
    header = lines[0].split(",")
    return [
        {c: _parse_cell(cell) for c, cell in zip(header, line.split(","))}
        for line in lines[1:]
    ]
