"""Period-cell geometry, coefficient rasters, inclusions and admissibility."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

PERIOD = 2.0 * math.pi
RASTER_TAG = "slabscat-raster"


@dataclass(frozen=True)
class CellGeometry:
    """One period ``[0, 2*pi) x (z_minus, z_plus)`` on an ``nx`` by ``nz`` cell grid."""

    z_minus: float
    z_plus: float
    nx: int
    nz: int

    def __post_init__(self):
        if not self.z_minus < self.z_plus:
            raise ValueError(f"need z_minus < z_plus, got {self.z_minus} >= {self.z_plus}")
        if self.nx < 4 or self.nx % 2:
            raise ValueError(f"nx must be even and >= 4, got {self.nx}")
        if self.nz < 2:
            raise ValueError(f"nz must be >= 2, got {self.nz}")

    @property
    def period(self) -> float:
        return PERIOD

    @property
    def thickness(self) -> float:
        return self.z_plus - self.z_minus

    @property
    def h1(self) -> float:
        return PERIOD / self.nx

    @property
    def h3(self) -> float:
        return self.thickness / self.nz

    @property
    def cell_area(self) -> float:
        return self.h1 * self.h3

    @property
    def area(self) -> float:
        return PERIOD * self.thickness

    @property
    def shape(self) -> tuple[int, int]:
        """Raster shape ``(nz, nx)``: rows along x3, columns along x1."""
        return (self.nz, self.nx)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        x = (np.arange(self.nx) + 0.5) * self.h1
        z = self.z_minus + (np.arange(self.nz) + 0.5) * self.h3
        return np.meshgrid(x, z)

    def default_m_max(self) -> int:
        return self.nx // 2 - 1


@dataclass(frozen=True)
class CoefficientField:
    """Cellwise-constant real coefficients ``eps`` and ``tau`` of shape ``(nz, nx)``."""

    eps: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        eps = np.array(self.eps, dtype=float)
        tau = np.array(self.tau, dtype=float)
        if eps.ndim != 2 or eps.shape != tau.shape:
            raise ValueError(f"eps and tau must be 2-D arrays of equal shape, got {eps.shape} and {tau.shape}")
        if not (np.all(np.isfinite(eps)) and np.all(np.isfinite(tau))):
            raise ValueError("coefficients must be finite")
        if eps.min() <= 0 or tau.min() <= 0:
            raise ValueError("coefficients must be strictly positive (lossless admissible structure)")
        eps.setflags(write=False)
        tau.setflags(write=False)
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "tau", tau)

    @property
    def shape(self) -> tuple[int, int]:
        return self.eps.shape

    @classmethod
    def uniform(cls, geom: CellGeometry, eps: float = 1.0, tau: float = 1.0) -> "CoefficientField":
        return cls(np.full(geom.shape, float(eps)), np.full(geom.shape, float(tau)))

    def check_bounds(self, eps_bounds: tuple[float, float], tau_bounds: tuple[float, float]) -> None:
        """Raise if any cell leaves the global bounds ``0 < lo <= value <= hi``."""
        for name, arr, (lo, hi) in (("eps", self.eps, eps_bounds), ("tau", self.tau, tau_bounds)):
            if lo <= 0:
                raise ValueError(f"global lower bound for {name} must be positive")
            if arr.min() < lo or arr.max() > hi:
                raise ValueError(f"{name} outside global bounds [{lo}, {hi}]")


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def contains(self, x, z):
        return (x - self.center[0]) ** 2 + (z - self.center[1]) ** 2 < self.radius**2

    def bounds(self) -> tuple[float, float, float, float]:
        cx, cz = self.center
        r = self.radius
        return (cx - r, cz - r, cx + r, cz + r)


@dataclass(frozen=True)
class Rect:
    corner_lo: tuple[float, float]
    corner_hi: tuple[float, float]

    def contains(self, x, z):
        (x0, z0), (x1, z1) = self.corner_lo, self.corner_hi
        return (x >= x0) & (x < x1) & (z >= z0) & (z < z1)

    def bounds(self) -> tuple[float, float, float, float]:
        return (*self.corner_lo, *self.corner_hi)


Shape = Union[Disk, Rect]


@dataclass(frozen=True)
class Inclusion:
    shape: Shape
    eps: float
    tau: float
    id: int = 0


@dataclass(frozen=True)
class AdmissibleEnvelope:
    """Cellwise bounding functions ``eps_lo <= eps <= eps_hi``, ``tau_lo <= tau <= tau_hi``."""

    eps_lo: np.ndarray
    eps_hi: np.ndarray
    tau_lo: np.ndarray
    tau_hi: np.ndarray

    def __post_init__(self):
        arrays = [np.array(getattr(self, k), dtype=float) for k in ("eps_lo", "eps_hi", "tau_lo", "tau_hi")]
        if any(a.shape != arrays[0].shape for a in arrays) or arrays[0].ndim != 2:
            raise ValueError("envelope arrays must share one 2-D shape")
        if np.any(arrays[0] > arrays[1]) or np.any(arrays[2] > arrays[3]):
            raise ValueError("envelope requires eps_lo <= eps_hi and tau_lo <= tau_hi")
        if arrays[0].min() <= 0 or arrays[2].min() <= 0:
            raise ValueError("envelope lower bounds must be strictly positive")
        for k, a in zip(("eps_lo", "eps_hi", "tau_lo", "tau_hi"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, k, a)

    @classmethod
    def uniform(cls, geom: CellGeometry, eps: tuple[float, float], tau: tuple[float, float]) -> "AdmissibleEnvelope":
        full = lambda v: np.full(geom.shape, float(v))  # noqa: E731
        return cls(full(eps[0]), full(eps[1]), full(tau[0]), full(tau[1]))

    @classmethod
    def around(cls, field: CoefficientField, eps_delta: float = 0.0, tau_delta: float = 0.0) -> "AdmissibleEnvelope":
        return cls(field.eps - eps_delta, field.eps + eps_delta, field.tau - tau_delta, field.tau + tau_delta)

    @property
    def shape(self) -> tuple[int, int]:
        return self.eps_lo.shape

    def softest(self) -> CoefficientField:
        """``(eps_lo, tau_hi)``: the corner with the largest eigenfrequencies."""
        return CoefficientField(self.eps_lo, self.tau_hi)

    def stiffest(self) -> CoefficientField:
        """``(eps_hi, tau_lo)``: the corner with the smallest eigenfrequencies."""
        return CoefficientField(self.eps_hi, self.tau_lo)


@dataclass(frozen=True)
class SourceTerm:
    """Cellwise volume sources: flux ``xi`` of shape ``(nz, nx, 2)`` and scalar ``h``."""

    xi: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=complex)
        h = np.asarray(self.h, dtype=complex)
        if h.ndim != 2 or xi.shape != h.shape + (2,):
            raise ValueError(f"xi must have shape h.shape + (2,), got {xi.shape} and {h.shape}")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "h", h)

    @classmethod
    def zeros(cls, geom: CellGeometry) -> "SourceTerm":
        return cls(np.zeros(geom.shape + (2,), complex), np.zeros(geom.shape, complex))


# -- rasterization -----------------------------------------------------------------


def _check_inside(geom: CellGeometry, inc: Inclusion) -> None:
    x0, z0, x1, z1 = inc.shape.bounds()
    if x0 < 0 or x1 > PERIOD or z0 < geom.z_minus or z1 > geom.z_plus:
        raise ValueError(f"inclusion {inc.id} extends outside the period cell")
    if isinstance(inc.shape, Disk) and inc.shape.radius <= 0:
        raise ValueError(f"inclusion {inc.id} has nonpositive radius")
    if isinstance(inc.shape, Rect) and (x1 <= x0 or z1 <= z0):
        raise ValueError(f"inclusion {inc.id} is an empty rectangle")


def _overlap(a: Shape, b: Shape) -> bool:
    if isinstance(a, Rect) and isinstance(b, Rect):
        (ax0, az0), (ax1, az1) = a.corner_lo, a.corner_hi
        (bx0, bz0), (bx1, bz1) = b.corner_lo, b.corner_hi
        return min(ax1, bx1) > max(ax0, bx0) and min(az1, bz1) > max(az0, bz0)
    if isinstance(a, Disk) and isinstance(b, Disk):
        d = math.dist(a.center, b.center)
        return d < a.radius + b.radius
    disk, rect = (a, b) if isinstance(a, Disk) else (b, a)
    (x0, z0), (x1, z1) = rect.corner_lo, rect.corner_hi
    px = min(max(disk.center[0], x0), x1)
    pz = min(max(disk.center[1], z0), z1)
    return math.dist(disk.center, (px, pz)) < disk.radius


def validate_inclusions(geom: CellGeometry, inclusions: Sequence[Inclusion]) -> None:
    for inc in inclusions:
        _check_inside(geom, inc)
        if inc.eps <= 0 or inc.tau <= 0:
            raise ValueError(f"inclusion {inc.id} has nonpositive coefficients")
    for i, a in enumerate(inclusions):
        for b in inclusions[i + 1 :]:
            if _overlap(a.shape, b.shape):
                raise ValueError(f"inclusions {a.id} and {b.id} overlap")


def inclusion_mask(geom: CellGeometry, inc: Inclusion) -> np.ndarray:
    """Cells whose center lies in the inclusion."""
    x, z = geom.cell_centers()
    return np.asarray(inc.shape.contains(x, z), dtype=bool)


def _area_fractions(geom: CellGeometry, shape: Shape, segments: int) -> np.ndarray:
    from shapely.geometry import Point, box

    if isinstance(shape, Disk):
        poly = Point(shape.center).buffer(shape.radius, quad_segs=segments // 4)
    else:
        poly = box(*shape.bounds())
    frac = np.zeros(geom.shape)
    x0, z0, x1, z1 = poly.bounds
    i_lo = max(int(math.floor(x0 / geom.h1)), 0)
    i_hi = min(int(math.ceil(x1 / geom.h1)), geom.nx)
    j_lo = max(int(math.floor((z0 - geom.z_minus) / geom.h3)), 0)
    j_hi = min(int(math.ceil((z1 - geom.z_minus) / geom.h3)), geom.nz)
    for j in range(j_lo, j_hi):
        zc = geom.z_minus + j * geom.h3
        for i in range(i_lo, i_hi):
            cell = box(i * geom.h1, zc, (i + 1) * geom.h1, zc + geom.h3)
            frac[j, i] = poly.intersection(cell).area / geom.cell_area
    return frac


def rasterize(
    geom: CellGeometry,
    background: tuple[float, float],
    inclusions: Sequence[Inclusion] = (),
    mode: str = "center",
    segments: int = 1024,
) -> CoefficientField:
    """Sample ``eps`` and ``tau`` on the cell grid.

    ``mode="center"`` assigns each cell the value of the inclusion containing its
    center.  ``mode="fraction"`` blends background and inclusion values by the
    exact covered area (disks as ``segments``-gons), which makes the raster a
    smooth function of the inclusion geometry.
    """
    if mode not in ("center", "fraction"):
        raise ValueError(f"unknown rasterization mode {mode!r}")
    validate_inclusions(geom, inclusions)
    eps_b, tau_b = background
    eps = np.full(geom.shape, float(eps_b))
    tau = np.full(geom.shape, float(tau_b))
    for inc in inclusions:
        if mode == "center":
            mask = inclusion_mask(geom, inc)
            eps[mask] = inc.eps
            tau[mask] = inc.tau
        else:
            frac = _area_fractions(geom, inc.shape, segments)
            eps += frac * (inc.eps - eps_b)
            tau += frac * (inc.tau - tau_b)
    return CoefficientField(eps, tau)


# -- admissibility and perturbations -----------------------------------------------------


@dataclass
class Violation:
    row: int
    col: int
    coefficient: str
    value: float
    lo: float
    hi: float


@dataclass
class AdmissibilityReport:
    ok: bool
    violations: list[Violation]

    def __bool__(self) -> bool:
        return self.ok


def check_admissible(field: CoefficientField, env: AdmissibleEnvelope) -> AdmissibilityReport:
    if field.shape != env.shape:
        raise ValueError(f"grid mismatch: field {field.shape} vs envelope {env.shape}")
    violations = []
    for name, arr, lo, hi in (
        ("eps", field.eps, env.eps_lo, env.eps_hi),
        ("tau", field.tau, env.tau_lo, env.tau_hi),
    ):
        bad = (arr < lo) | (arr > hi)
        for j, i in zip(*np.nonzero(bad)):
            violations.append(Violation(int(j), int(i), name, float(arr[j, i]), float(lo[j, i]), float(hi[j, i])))
    return AdmissibilityReport(not violations, violations)


def perturb(field: CoefficientField, d_eps, d_tau, t: float) -> CoefficientField:
    d_eps = np.zeros(field.shape) if d_eps is None else np.asarray(d_eps, dtype=float)
    d_tau = np.zeros(field.shape) if d_tau is None else np.asarray(d_tau, dtype=float)
    if d_eps.shape != field.shape or d_tau.shape != field.shape:
        raise ValueError("perturbation grid does not match the field")
    return CoefficientField(field.eps + t * d_eps, field.tau + t * d_tau)


def lp_norm(geom: CellGeometry, d_eps, d_tau, p: float = 2.0) -> float:
    """Midpoint-rule ``(integral |d_eps|^p + |d_tau|^p)^(1/p)`` over the cell."""
    if not p >= 1 or not np.isfinite(p):
        raise ValueError(f"p must be finite and >= 1, got {p}")
    d_eps = np.zeros(geom.shape) if d_eps is None else np.abs(np.asarray(d_eps, dtype=float))
    d_tau = np.zeros(geom.shape) if d_tau is None else np.abs(np.asarray(d_tau, dtype=float))
    total = np.sum(d_eps**p + d_tau**p) * geom.cell_area
    return float(total ** (1.0 / p))


# -- raster CSV --------------------------------------------------------------------------

_HEADER_RE = re.compile(rf"#\s*{RASTER_TAG}\s+nx=(\d+)\s+nz=(\d+)\s+field=(eps|tau)\s*$")


def write_raster(path, values: np.ndarray, field_name: str) -> None:
    values = np.asarray(values, dtype=float)
    if field_name not in ("eps", "tau"):
        raise ValueError("field_name must be 'eps' or 'tau'")
    nz, nx = values.shape
    lines = [f"# {RASTER_TAG} nx={nx} nz={nz} field={field_name}"]
    lines += [",".join(f"{v:.17g}" for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_raster(path, expect: str | None = None) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError(f"{path}: empty raster file")
    m = _HEADER_RE.match(text[0].strip())
    if not m:
        raise ValueError(f"{path}: missing or malformed '# {RASTER_TAG}' header")
    nx, nz, name = int(m.group(1)), int(m.group(2)), m.group(3)
    if expect is not None and name != expect:
        raise ValueError(f"{path}: raster holds field={name}, expected {expect}")
    rows = [line for line in text[1:] if line.strip()]
    if len(rows) != nz:
        raise ValueError(f"{path}: expected {nz} rows, found {len(rows)}")
    values = np.array([[float(v) for v in row.split(",")] for row in rows])
    if values.shape != (nz, nx):
        raise ValueError(f"{path}: expected {nz}x{nx} values, found {values.shape}")
    return values
