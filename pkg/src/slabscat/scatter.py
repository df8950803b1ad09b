"""Scattering solves, diffraction-order amplitudes and energy bookkeeping."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import (
    DiscreteSystem,
    Mesh,
    assemble,
    build_mesh,
    incident_rhs,
    trace_coefficients,
    volume_source_rhs,
)
from .harmonics import BlochContext, Side, TraceVector, outgoing_residual
from .structure import CellGeometry, CoefficientField, SourceTerm

log = logging.getLogger(__name__)

NEAR_RESONANCE_CONDITION = 1e12


class ResonanceError(RuntimeError):
    """The system is singular: (omega, kappa) is an eigenvalue of the structure."""


class NearResonanceWarning(UserWarning):
    """Condition estimate above threshold; the non-resonance condition is close to failing."""


class ResidualError(RuntimeError):
    pass


@dataclass
class Incidence:
    """Incident amplitudes on propagating orders, from the left (``a``) and right (``b``)."""

    a_inc: dict = field(default_factory=lambda: {0: 1.0})
    b_inc: dict = field(default_factory=dict)

    def vectors(self, ctx: BlochContext) -> tuple[np.ndarray, np.ndarray]:
        a = np.zeros(ctx.n_orders, complex)
        b = np.zeros(ctx.n_orders, complex)
        for m, c in self.a_inc.items():
            a[ctx.index(int(m))] = c
        for m, c in self.b_inc.items():
            b[ctx.index(int(m))] = c
        return a, b

    @classmethod
    def none(cls) -> "Incidence":
        return cls({}, {})


@dataclass
class ScatteringSolution:
    mesh: Mesh
    ctx: BlochContext
    u: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    a_inc: np.ndarray = field(repr=False)
    b_inc: np.ndarray = field(repr=False)
    energy_transmitted: float
    energy_reflected: float
    incident_flux: float
    residual: float
    condition: float | None = None

    @property
    def balance_defect(self) -> float:
        return self.energy_reflected + self.energy_transmitted - self.incident_flux

    @property
    def transmittance(self) -> float:
        return self.energy_transmitted / self.incident_flux

    @property
    def reflectance(self) -> float:
        return self.energy_reflected / self.incident_flux

    def efficiencies(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-order reflected and transmitted flux fractions (zero off propagating orders)."""
        eta = np.where(self.ctx.propagating_mask(), self.ctx.etas().real, 0.0)
        scale = self.ctx.tau0 / self.incident_flux if self.incident_flux > 0 else np.nan
        return scale * eta * np.abs(self.a) ** 2, scale * eta * np.abs(self.b) ** 2

    def b_order(self, m: int) -> complex:
        return complex(self.b[self.ctx.index(m)])

    def a_order(self, m: int) -> complex:
        return complex(self.a[self.ctx.index(m)])


class Factorization:
    """Sparse LU of the system matrix; reused for several right-hand sides."""

    def __init__(self, sys: DiscreteSystem):
        self.sys = sys
        try:
            self.lu = spla.splu(sys.matrix.tocsc())
        except RuntimeError as exc:
            raise ResonanceError(
                f"singular system at omega={sys.ctx.omega}, kappa={sys.ctx.kappa}: "
                "the structure supports a guided mode here"
            ) from exc

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        return self.lu.solve(np.asarray(rhs, complex), trans="T" if transpose else "N")

    def condition_estimate(self) -> float:
        n = self.sys.matrix.shape[0]
        inv = spla.LinearOperator(
            (n, n),
            matvec=lambda x: self.lu.solve(np.asarray(x, complex).ravel()),
            rmatvec=lambda x: self.lu.solve(np.asarray(x, complex).ravel(), trans="H"),
            dtype=complex,
        )
        return float(spla.onenormest(self.sys.matrix) * spla.onenormest(inv))


def transmitted_energy(sol: ScatteringSolution, ctx: BlochContext | None = None) -> float:
    """``tau0 * sum_{propagating m} eta_m |b_m|**2``."""
    ctx = ctx or sol.ctx
    prop = ctx.propagating_mask()
    return float(ctx.tau0 * np.sum(ctx.etas().real[prop] * np.abs(sol.b[prop]) ** 2))


def energy_balance(sol: ScatteringSolution, ctx: BlochContext | None = None) -> float:
    """Signed defect ``reflected + transmitted - incident`` of the flux."""
    return sol.energy_reflected + sol.energy_transmitted - sol.incident_flux


def _flux(ctx: BlochContext, coeffs: np.ndarray) -> float:
    prop = ctx.propagating_mask()
    return float(ctx.tau0 * np.sum(ctx.etas().real[prop] * np.abs(coeffs[prop]) ** 2))


def extract(sys: DiscreteSystem, u: np.ndarray, a_inc: np.ndarray, b_inc: np.ndarray, residual: float) -> ScatteringSolution:
    """Order amplitudes from the boundary traces of the total field ``u``."""
    mesh, ctx = sys.mesh, sys.ctx
    g = mesh.geom
    eta = ctx.etas()
    left = trace_coefficients(mesh, ctx, u[mesh.left_dofs])
    right = trace_coefficients(mesh, ctx, u[mesh.right_dofs])
    a = (left - a_inc * np.exp(1j * eta * g.z_minus)) * np.exp(1j * eta * g.z_minus)
    b = (right - b_inc * np.exp(-1j * eta * g.z_plus)) * np.exp(-1j * eta * g.z_plus)
    incident = _flux(ctx, a_inc) + _flux(ctx, b_inc)
    return ScatteringSolution(
        mesh, ctx, u, a, b, a_inc, b_inc,
        energy_transmitted=_flux(ctx, b),
        energy_reflected=_flux(ctx, a),
        incident_flux=incident,
        residual=residual,
    )


def _solve_rhs(
    sys: DiscreteSystem,
    rhs: np.ndarray,
    a_vec: np.ndarray,
    b_vec: np.ndarray,
    lu: Factorization | None,
    tol: float,
    condition: bool,
) -> ScatteringSolution:
    lu = lu or Factorization(sys)
    u = lu.solve(rhs)
    norm = np.linalg.norm(rhs)
    residual = float(np.linalg.norm(sys.matrix @ u - rhs) / norm) if norm > 0 else float(np.linalg.norm(sys.matrix @ u))
    if residual > tol:
        raise ResidualError(f"linear-solve residual {residual:.3e} exceeds tolerance {tol:.1e}")
    sol = extract(sys, u, a_vec, b_vec, residual)
    if condition:
        sol.condition = lu.condition_estimate()
        if sol.condition > NEAR_RESONANCE_CONDITION:
            warnings.warn(
                f"condition estimate {sol.condition:.3e} at omega={sys.ctx.omega}, kappa={sys.ctx.kappa}: "
                "parameters are close to violating the non-resonance condition",
                NearResonanceWarning,
                stacklevel=3,
            )
    return sol


def solve_scattering(
    sys: DiscreteSystem,
    incidence: Incidence | None = None,
    *,
    lu: Factorization | None = None,
    tol: float = 1e-8,
    condition: bool = False,
) -> ScatteringSolution:
    """Solve for the total field under plane-wave incidence and extract ``a_m``, ``b_m``."""
    incidence = incidence if incidence is not None else Incidence()
    rhs = incident_rhs(sys.mesh, sys.ctx, incidence.a_inc, incidence.b_inc)
    a_vec, b_vec = incidence.vectors(sys.ctx)
    return _solve_rhs(sys, rhs, a_vec, b_vec, lu, tol, condition)


def solve_general(
    sys: DiscreteSystem,
    incidence: Incidence | None = None,
    src: SourceTerm | None = None,
    *,
    extra_rhs: np.ndarray | None = None,
    lu: Factorization | None = None,
    tol: float = 1e-8,
    condition: bool = False,
) -> ScatteringSolution:
    """Plane-wave incidence plus interior volume sources (and an optional raw load vector)."""
    incidence = incidence if incidence is not None else Incidence.none()
    rhs = incident_rhs(sys.mesh, sys.ctx, incidence.a_inc, incidence.b_inc)
    if src is not None:
        rhs = rhs + volume_source_rhs(sys.mesh, src)
    if extra_rhs is not None:
        rhs = rhs + extra_rhs
    a_vec, b_vec = incidence.vectors(sys.ctx)
    return _solve_rhs(sys, rhs, a_vec, b_vec, lu, tol, condition)


def discrete_normal_derivative(sys: DiscreteSystem, u: np.ndarray, volume_rhs: np.ndarray | None = None) -> tuple[TraceVector, TraceVector]:
    """Fourier coefficients of the discrete outward flux ``d_n u`` on both boundaries.

    Read off the volume part of the weak form on boundary test functions:
    ``tau0 * w * d_n u = (K - omega**2 B) u - volume loads`` with ``w = h1``.
    """
    mesh, ctx = sys.mesh, sys.ctx
    vol = (sys.K - ctx.omega**2 * sys.B) @ u
    if volume_rhs is not None:
        vol = vol - volume_rhs
    w = ctx.tau0 * mesh.geom.h1
    left = TraceVector(Side.LEFT, trace_coefficients(mesh, ctx, vol[mesh.left_dofs] / w))
    right = TraceVector(Side.RIGHT, trace_coefficients(mesh, ctx, vol[mesh.right_dofs] / w))
    return left, right


def scattered_outgoing_residual(sys: DiscreteSystem, sol: ScatteringSolution, volume_rhs: np.ndarray | None = None) -> float:
    """Largest outgoing residual of ``u - u_inc`` over the two boundaries."""
    ctx, g = sol.ctx, sol.mesh.geom
    eta = ctx.etas()
    flux_left, flux_right = discrete_normal_derivative(sys, sol.u, volume_rhs)
    inc_left = sol.a_inc * np.exp(1j * eta * g.z_minus)
    inc_right = sol.b_inc * np.exp(-1j * eta * g.z_plus)
    out = []
    for side, dofs, flux, inc, dinc in (
        (Side.LEFT, sol.mesh.left_dofs, flux_left, inc_left, -1j * eta * inc_left),
        (Side.RIGHT, sol.mesh.right_dofs, flux_right, inc_right, -1j * eta * inc_right),
    ):
        trace = trace_coefficients(sol.mesh, ctx, sol.u[dofs]) - inc
        out.append(outgoing_residual(ctx, TraceVector(side, trace), TraceVector(side, flux.coeffs - dinc)))
    return max(out)


# -- convenience drivers -------------------------------------------------------------


def solve(
    geom: CellGeometry,
    field_: CoefficientField,
    ctx: BlochContext,
    incidence: Incidence | None = None,
    **kwargs,
) -> ScatteringSolution:
    """Mesh, assemble and solve in one call."""
    sys = assemble(build_mesh(geom, ctx.kappa), field_, ctx)
    return solve_scattering(sys, incidence, **kwargs)


@dataclass
class SweepRow:
    omega: float
    kappa: float
    solution: ScatteringSolution | None = None
    error: str | None = None


def sweep(
    geom: CellGeometry,
    field_: CoefficientField,
    base: BlochContext,
    omegas: Sequence[float],
    kappas: Sequence[float],
    incidence: Incidence | None = None,
    threads: int = 1,
    tol: float = 1e-8,
) -> list[SweepRow]:
    """Independent solves over the ``omegas x kappas`` grid, sorted by ``(omega, kappa)``.

    A failing point is recorded in its row and does not abort the sweep.
    """
    points = sorted({(float(w), BlochContext(float(w), float(k), base.eps0, base.tau0, base.m_max).kappa)
                     for w in omegas for k in kappas})

    def run(point):
        w, k = point
        ctx = base.replace(omega=w, kappa=k)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                return SweepRow(w, ctx.kappa, solve(geom, field_, ctx, incidence, tol=tol))
        except Exception as exc:  # recorded per point
            log.warning("sweep point omega=%g kappa=%g failed: %s", w, k, exc)
            return SweepRow(w, ctx.kappa, None, f"{type(exc).__name__}: {exc}")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run, points))
    else:
        rows = [run(p) for p in points]
    return sorted(rows, key=lambda r: (r.omega, r.kappa))
