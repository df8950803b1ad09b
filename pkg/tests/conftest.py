import sys
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from slabscat.harmonics import CutoffWarning  # noqa: E402
from slabscat.structure import CellGeometry, CoefficientField  # noqa: E402

settings.register_profile("slabscat", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("slabscat")

# criterion number -> (passed, one-line detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(autouse=True)
def _quiet_cutoff():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CutoffWarning)
        yield


@pytest.fixture
def record():
    def _record(criterion: int, passed: bool, detail: str):
        ACCEPTANCE[criterion] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {k}: {detail}")


def random_field(geom: CellGeometry, rng, eps=(1.0, 4.0), tau=(0.5, 2.0)) -> CoefficientField:
    """Cellwise uniform random coefficients within the given bounds."""
    return CoefficientField(rng.uniform(*eps, size=geom.shape), rng.uniform(*tau, size=geom.shape))


def smooth_direction(geom: CellGeometry, rng):
    """Random low-frequency trigonometric perturbation pair on cell centers."""
    x, z = geom.cell_centers()
    s = (z - geom.z_minus) / geom.thickness
    out = []
    for _ in range(2):
        a = rng.normal(size=4)
        out.append(a[0] + a[1] * np.sin(x + a[3]) * np.cos(np.pi * s) + a[2] * np.cos(2 * x) * s)
    return out[0], out[1]


def relative_direction(field, d_eps, d_tau, size=0.1):
    """Rescale a direction so its sup norm is ``size`` times each coefficient's lower bound."""
    return (
        size * field.eps.min() * d_eps / np.abs(d_eps).max(),
        size * field.tau.min() * d_tau / np.abs(d_tau).max(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
