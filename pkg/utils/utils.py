"""Utility functions for run directories and CSV/JSON artifacts."""

import csv
import json
import os
import re
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np


def get_run_key(name: str) -> str:
    """Generate a filesystem-safe key from a run or dataset name."""
    key = re.sub(r"[^A-Za-z0-9._-]+", "_", name.strip())
    return key.strip("_") or "run"


def get_run_dir(out_dir: str, name: Optional[str] = None) -> str:
    """Create and return out_dir, or out_dir/<key(name)> when a name is given."""
    path = out_dir if name is None else os.path.join(out_dir, get_run_key(name))
    os.makedirs(path, exist_ok=True)
    return path


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")


def write_json(path: str, data: Dict):
    with open(path, "w") as f:
        json.dump(data, f, indent=2, default=_jsonable)


def read_json(path: str) -> Dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"JSON file not found: {path}")
    with open(path, "r") as f:
        return json.load(f)


def write_rows_csv(path: str, fieldnames: Sequence[str], rows: Iterable[Dict]):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_cell(row.get(k)) for k in fieldnames})


def read_rows_csv(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="") as f:
        return list(csv.DictReader(f))


def _format_cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return value


def parse_number_list(text: str, kind=float) -> List:
    """'0,0.01,0.02' -> [0.0, 0.01, 0.02]."""
    return [kind(part) for part in text.split(",") if part.strip()]
