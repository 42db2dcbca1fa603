from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from volterrafk.config import ExperimentConfig

SCHEMA_VERSION = 1

FORWARD_COLUMNS = ["path", "k", "t", "X"]
BACKWARD_COLUMNS = ["i", "t", "mean_Y", "stderr"]
CONVERGENCE_COLUMNS = ["rung", "value", "estimate", "error"]


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float

    def to_dict(self) -> dict:
        return {"name": self.name, "pass": bool(self.passed), "value": self.value, "tolerance": self.tolerance}


def check_at_most(name: str, value: float, tolerance: float) -> Check:
    value = float(value)
    return Check(name, math.isfinite(value) and value <= tolerance, value, float(tolerance))


def check_flag(name: str, ok: bool) -> Check:
    return Check(name, bool(ok), 1.0 if ok else 0.0, 1.0)


def _plain(o: Any):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def forward_table(grid, values: np.ndarray, max_paths: int = 100) -> pd.DataFrame:
    n = min(max_paths, values.shape[0])
    k = np.arange(grid.N + 1)
    return pd.DataFrame(
        {
            "path": np.repeat(np.arange(n), grid.N + 1),
            "k": np.tile(k, n),
            "t": np.tile(grid.nodes, n),
            "X": values[:n].reshape(-1),
        },
        columns=FORWARD_COLUMNS,
    )


def backward_table(grid, mean: np.ndarray, stderr: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(
        {"i": np.arange(grid.N + 1), "t": grid.nodes, "mean_Y": mean, "stderr": stderr},
        columns=BACKWARD_COLUMNS,
    )


def convergence_table(rows: list[dict]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=CONVERGENCE_COLUMNS)


def write_tables(directory: Path, tables: dict[str, pd.DataFrame]) -> list[Path]:
    out = []
    for name, df in tables.items():
        p = directory / name
        df.to_csv(p, index=False)
        out.append(p)
    return out


def write_report(
    directory: Path,
    cfg: ExperimentConfig,
    results: dict,
    checks: list[Check],
    runtime: float,
) -> Path:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": cfg.subcommand,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "results": results,
        "invariant_checks": [c.to_dict() for c in checks],
        "runtime_seconds": runtime,
    }
    p = directory / "report.json"
    p.write_text(json.dumps(doc, indent=2, default=_plain))
    return p
