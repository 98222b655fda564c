"""TRE versus emitter angle range and projection count.

Each cell simulates a projection stack of the fixed volume for one emitter
layout, runs the registration stages against it and reports landmark errors.
Cells are independent; a failing cell is recorded and the sweep continues.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import RegistrationConfig, geometry_from_dict, with_emitters
from .geometry import LandmarkSet, Volume3D
from .phantom import landmark_tre
from .projector import clear_cache, project_stack
from .registration import register_3d2d

log = logging.getLogger(__name__)

COLUMNS = ("angle_deg", "num_proj", "stage", "tre_mean", "tre_x", "tre_y", "tre_z", "error")


@dataclass(frozen=True)
class SweepCell:
    angle_deg: float
    num_proj: int


@dataclass
class SweepInputs:
    source: Volume3D
    target: Volume3D
    landmarks_moving: LandmarkSet
    landmarks_fixed: LandmarkSet
    geometry: dict
    config: RegistrationConfig
    stages: tuple = ("affine", "lddmm")


@dataclass
class CellResult:
    cell: SweepCell
    rows: list = field(default_factory=list)
    error: Optional[str] = None


def sweep_cells(angles: Sequence[float], angle_count: int, counts: Sequence[int], count_angle: float) -> list:
    """Angle sweep at a fixed count followed by a count sweep at a fixed angle (duplicates dropped)."""
    cells = [SweepCell(float(a), int(angle_count)) for a in angles]
    cells += [SweepCell(float(count_angle), int(n)) for n in counts]
    return list(dict.fromkeys(cells))


def _row(cell: SweepCell, stage: str, report=None, error: str = "") -> dict:
    row = {"angle_deg": cell.angle_deg, "num_proj": cell.num_proj, "stage": stage, "error": error}
    d = report.as_dict() if report is not None else {}
    for k in ("tre_mean", "tre_x", "tre_y", "tre_z"):
        row[k] = d.get(k, float("nan"))
    return row


def run_cell(inputs: SweepInputs, cell: SweepCell) -> CellResult:
    out = CellResult(cell)
    try:
        geom = geometry_from_dict(with_emitters(inputs.geometry, cell.num_proj, cell.angle_deg))
        stack = project_stack(inputs.target, geom)
        results = register_3d2d(inputs.source, stack, geom, inputs.config, inputs.stages)
        out.rows.append(_row(cell, "initial", landmark_tre(inputs.landmarks_moving, inputs.landmarks_fixed)))
        for stage, res in results.items():
            out.rows.append(_row(cell, stage, landmark_tre(inputs.landmarks_moving, inputs.landmarks_fixed, res.phi)))
    except Exception as exc:  # recorded, the sweep goes on
        log.warning("sweep cell %s failed: %s", cell, exc)
        out.error = f"{type(exc).__name__}: {exc}"
        out.rows = [_row(cell, stage, error=out.error) for stage in inputs.stages]
    finally:
        clear_cache()
    return out


def _worker(args):
    inputs, cell, threads = args
    torch.set_num_threads(threads)
    return run_cell(inputs, cell)


def run_sweep(inputs: SweepInputs, cells: Sequence[SweepCell], jobs: int = 1, threads: int = 1,
              progress=None) -> list[CellResult]:
    """Run every cell, in parallel worker processes when ``jobs > 1``; results keep cell order."""
    if jobs <= 1:
        results = []
        for cell in cells:
            results.append(run_cell(inputs, cell))
            if progress:
                progress(results[-1])
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(_worker, [(inputs, c, threads) for c in cells]))
    if progress:
        for r in results:
            progress(r)
    return results


def write_csv(path, results: Sequence[CellResult]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        for res in results:
            writer.writerows(res.rows)
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("angle_deg", "tre_mean", "tre_x", "tre_y", "tre_z"):
            r[k] = float(r[k])
        r["num_proj"] = int(r["num_proj"])
    return rows
