import os

import numpy as np
import pytest
import torch
from hypothesis import settings

from tomoreg.geometry import Grid3D, ScanGeometry
from tomoreg.projector import clear_cache

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_default_dtype(torch.float64)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(a, b) -> float:
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    scale = max(float(a.abs().max()), float(b.abs().max()), 1e-300)
    return float((a - b).abs().max()) / scale


def small_geometry(n_views=2, pixels=(20, 20), spacing=2.0, planes=16, dz=2.0, start=1.0, d=200.0,
                   spread=20.0) -> ScanGeometry:
    xs = np.linspace(-spread, spread, n_views) if n_views > 1 else [0.0]
    return ScanGeometry(pixels, (spacing, spacing), tuple((float(x), 0.0, d) for x in xs), planes, dz, start)


def small_grid(n=16, spacing=2.0) -> Grid3D:
    # centred in x, y; sits above the receiver in z
    half = 0.5 * (n - 1) * spacing
    return Grid3D((n, n, n), (spacing,) * 3, (-half, -half, 1.0 + 0.5 * spacing))


@pytest.fixture(autouse=True)
def _fresh_projector_cache():
    yield
    clear_cache()
