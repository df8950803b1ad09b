"""Adjoint gradients of the transmitted energy and order amplitudes, and their checks.

Two gradient routes are provided:

* ``"discrete"`` differentiates the assembled system (transpose solve); it is
  exact for the discrete energy and is what the optimizer uses.
* ``"continuum"`` solves the physical adjoint scattering problem at ``-kappa``
  with the conjugated transmitted field sent back from the right, and pairs it
  with the primal field through the volume integral
  ``Im int (d_tau grad u . grad u_ad - omega**2 d_eps u u_ad)``.

Energies follow ``E = tau0 * sum eta_m |b_m|**2`` (no boundary measure), so the
continuum pairing is divided by the period ``2*pi``.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assembly import (
    DiscreteSystem,
    Mesh,
    assemble,
    boundary_fourier,
    build_mesh,
    element_matrices,
    mass_matrix,
    midpoint_gradients,
    perturbation_matrix,
    stiffness_matrix,
)
from .harmonics import BlochContext, HarmonicClass, eta_of
from .scatter import (
    Factorization,
    Incidence,
    ScatteringSolution,
    scattered_outgoing_residual,
    solve_general,
    solve_scattering,
)
from .structure import (
    CellGeometry,
    CoefficientField,
    Disk,
    Inclusion,
    inclusion_mask,
    lp_norm,
    perturb,
)

TWO_PI = 2.0 * math.pi


@dataclass
class SensitivityResult:
    """Per-cell gradient densities: ``dE ~ sum (g_eps*d_eps + g_tau*d_tau) * cell_area``."""

    g_eps: np.ndarray
    g_tau: np.ndarray
    cell_area: float
    method: str
    energy: float
    per_inclusion: list[tuple[int, float, float]] = field(default_factory=list)
    per_order: dict[int, "OrderGradient"] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def directional(self, d_eps=None, d_tau=None) -> float:
        total = 0.0
        if d_eps is not None:
            total += np.sum(self.g_eps * np.asarray(d_eps))
        if d_tau is not None:
            total += np.sum(self.g_tau * np.asarray(d_tau))
        return float(total * self.cell_area)


@dataclass
class OrderGradient:
    """Complex densities of ``b_m``: ``db_m ~ sum (g_eps*d_eps + g_tau*d_tau) * cell_area``."""

    m: int
    g_eps: np.ndarray
    g_tau: np.ndarray
    cell_area: float
    c_norm: complex

    def directional(self, d_eps=None, d_tau=None) -> complex:
        total = 0j
        if d_eps is not None:
            total += np.sum(self.g_eps * np.asarray(d_eps))
        if d_tau is not None:
            total += np.sum(self.g_tau * np.asarray(d_tau))
        return complex(total * self.cell_area)


@dataclass
class AdjointField:
    u_ad: np.ndarray = field(repr=False)
    sys: DiscreteSystem = field(repr=False)
    solution: ScatteringSolution = field(repr=False)


# -- element pairings ---------------------------------------------------------------------


def _pairings(mesh: Mesh, u: np.ndarray, w: np.ndarray, quadrature: str, w_reversed: bool = True):
    """Per-element ``int grad u . grad w`` and ``int u w`` (no conjugation)."""
    g = mesh.geom
    ue = mesh.local_values(u)
    we = mesh.local_values(w, conjugate_phase=w_reversed)
    if quadrature == "exact":
        K1, M1 = element_matrices(g.h1, g.h3)
        return np.einsum("ea,ab,eb->e", we, K1, ue), np.einsum("ea,ab,eb->e", we, M1, ue)
    if quadrature == "midpoint":
        G = midpoint_gradients(g.h1, g.h3)
        grad_u = ue @ G.T
        grad_w = we @ G.T
        return (np.sum(grad_u * grad_w, axis=1) * g.cell_area,
                ue.mean(axis=1) * we.mean(axis=1) * g.cell_area)
    raise ValueError(f"unknown quadrature {quadrature!r}")


# -- adjoint solves ------------------------------------------------------------------------


def _reversed_system(sys: DiscreteSystem) -> tuple[DiscreteSystem, int]:
    rev, shift = sys.ctx.reversed()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rsys = assemble(build_mesh(sys.mesh.geom, rev.kappa), sys.field, rev)
    return rsys, shift


def solve_adjoint(sys: DiscreteSystem, sol: ScatteringSolution, *, orders: dict[int, complex] | None = None,
                  tol: float = 1e-8) -> AdjointField:
    """Scattering solve at ``-kappa`` with incident field sent back from the right.

    By default the incident amplitudes are the conjugated transmitted
    propagating amplitudes ``conj(b_m)`` placed on order ``-m``; ``orders`` maps a
    primal order ``m`` to an explicit amplitude instead.
    """
    rsys, shift = _reversed_system(sys)
    ctx = sys.ctx
    if orders is None:
        orders = {m: np.conj(sol.b_order(m)) for m in ctx.propagating_orders()}
    b_inc = {}
    for m, c in orders.items():
        mr = -int(m) - shift
        if abs(mr) <= rsys.ctx.m_max:
            b_inc[mr] = complex(c)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        asol = solve_scattering(rsys, Incidence({}, b_inc), tol=tol)
    return AdjointField(asol.u, rsys, asol)


def energy_sensitivity_vector(sys: DiscreteSystem, sol: ScatteringSolution) -> np.ndarray:
    """``w`` with ``dE = 2 Re(w^T du)`` for the transmitted energy."""
    mesh, ctx = sys.mesh, sys.ctx
    eta = ctx.etas()
    prop = ctx.propagating_mask()
    coef = np.where(prop, ctx.tau0 * eta.real * np.conj(sol.b) * np.exp(-1j * eta * mesh.geom.z_plus), 0.0)
    E = boundary_fourier(mesh, ctx)
    w = np.zeros(mesh.n_dofs, complex)
    w[mesh.right_dofs] = np.conj(E) @ coef / mesh.geom.nx
    return w


def order_sensitivity_vector(sys: DiscreteSystem, m: int) -> np.ndarray:
    """``c`` with ``db_m = c^T du``."""
    mesh, ctx = sys.mesh, sys.ctx
    eta = eta_of(ctx, m).eta
    E = boundary_fourier(mesh, ctx)
    c = np.zeros(mesh.n_dofs, complex)
    c[mesh.right_dofs] = np.conj(E[:, ctx.index(m)]) * np.exp(-1j * eta * mesh.geom.z_plus) / mesh.geom.nx
    return c


def gradient_energy(
    sys: DiscreteSystem,
    sol: ScatteringSolution,
    method: str = "discrete",
    quadrature: str | None = None,
    lu: Factorization | None = None,
    adjoint: AdjointField | None = None,
) -> SensitivityResult:
    """Gradient densities of the transmitted energy with respect to ``eps`` and ``tau``.

    ``method="discrete"`` uses the transpose solve with exact element integrals.
    ``method="continuum"`` uses the ``-kappa`` adjoint scattering field with
    midpoint quadrature unless ``quadrature="exact"`` is requested.
    """
    mesh, ctx = sys.mesh, sys.ctx
    g = mesh.geom
    area = g.cell_area
    if method == "discrete":
        lu = lu or Factorization(sys)
        lam = lu.solve(energy_sensitivity_vector(sys, sol), transpose=True)
        k_pair, m_pair = _pairings(mesh, sol.u, lam, quadrature or "exact")
        g_tau = -2.0 * k_pair.real
        g_eps = 2.0 * ctx.omega**2 * m_pair.real
        meta = {"quadrature": quadrature or "exact"}
    elif method == "continuum":
        adjoint = adjoint or solve_adjoint(sys, sol)
        k_pair, m_pair = _pairings(mesh, sol.u, adjoint.u_ad, quadrature or "midpoint")
        g_tau = k_pair.imag / TWO_PI
        g_eps = -(ctx.omega**2) * m_pair.imag / TWO_PI
        meta = {"quadrature": quadrature or "midpoint", "adjoint_kappa": adjoint.sys.ctx.kappa}
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return SensitivityResult(
        g_eps=(g_eps / area).reshape(g.shape),
        g_tau=(g_tau / area).reshape(g.shape),
        cell_area=area,
        method=method,
        energy=sol.energy_transmitted,
        metadata=meta,
    )


def gradient_via_adjoint_field(sys: DiscreteSystem, sol: ScatteringSolution, adjoint: AdjointField) -> SensitivityResult:
    """Continuum-adjoint pairing evaluated with the exact element integrals of the solve."""
    return gradient_energy(sys, sol, method="continuum", quadrature="exact", adjoint=adjoint)


# -- per-order gradients ------------------------------------------------------------------


def order_pairing(sys: DiscreteSystem, sol: ScatteringSolution, m: int, quadrature: str = "exact"):
    """Raw single-harmonic adjoint pairing densities ``(P_eps, P_tau)`` for order ``m``.

    ``P_tau = grad u . grad u_ad^m`` and ``P_eps = -omega**2 u u_ad^m`` per unit area,
    with ``u_ad^m`` driven by ``exp(-i eta_m x3) exp(-i (m + kappa) x1)``.
    """
    h = eta_of(sys.ctx, m)
    if h.cls is not HarmonicClass.PROPAGATING:
        raise ValueError(f"order {m} is not propagating")
    adj = solve_adjoint(sys, sol, orders={m: 1.0})
    k_pair, m_pair = _pairings(sys.mesh, sol.u, adj.u_ad, quadrature)
    area = sys.mesh.geom.cell_area
    shape = sys.mesh.geom.shape
    return (-(sys.ctx.omega**2) * m_pair / area).reshape(shape), (k_pair / area).reshape(shape)


def gradient_order(
    sys: DiscreteSystem,
    sol: ScatteringSolution,
    m: int,
    quadrature: str = "exact",
    c_norm: complex | None = None,
) -> OrderGradient:
    """Complex gradient densities of ``b_m``: ``C_norm / (eta_m tau0)`` times the pairing."""
    c_norm = calibrated_c_norm() if c_norm is None else c_norm
    p_eps, p_tau = order_pairing(sys, sol, m, quadrature)
    scale = c_norm / (eta_of(sys.ctx, m).eta.real * sys.ctx.tau0)
    return OrderGradient(m, scale * p_eps, scale * p_tau, sys.mesh.geom.cell_area, c_norm)


def energy_from_orders(sol: ScatteringSolution, grads: dict[int, OrderGradient], d_eps=None, d_tau=None) -> float:
    """Chain rule ``dE = tau0 * sum eta_m * 2 Re(conj(b_m) db_m)`` over propagating orders."""
    ctx = sol.ctx
    total = 0.0
    for m in ctx.propagating_orders():
        db = grads[m].directional(d_eps, d_tau)
        total += eta_of(ctx, m).eta.real * 2.0 * (np.conj(sol.b_order(m)) * db).real
    return float(ctx.tau0 * total)


def calibrate_c_norm(
    geom: CellGeometry,
    field_: CoefficientField,
    ctx: BlochContext,
    m: int = 0,
    n_directions: int = 3,
    seed: int = 0,
    steps: Sequence[float] = (1e-3, 1e-4),
) -> tuple[complex, np.ndarray]:
    """Least-squares fit of ``C`` in ``db_m = C/(eta_m tau0) * pairing`` against central FD.

    Returns the fitted constant and the per-direction ratios.
    """
    rng = np.random.default_rng(seed)
    mesh = build_mesh(geom, ctx.kappa)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sys = assemble(mesh, field_, ctx)
        sol = solve_scattering(sys)
        p_eps, p_tau = order_pairing(sys, sol, m)
    eta = eta_of(ctx, m).eta.real
    raw, fd = [], []
    for _ in range(n_directions):
        d_eps = rng.uniform(-1, 1, geom.shape)
        d_tau = rng.uniform(-0.5, 0.5, geom.shape)
        raw.append(np.sum(p_eps * d_eps + p_tau * d_tau) * geom.cell_area / (eta * ctx.tau0))

        def b_of(t, d_eps=d_eps, d_tau=d_tau):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                s = solve_scattering(assemble(mesh, perturb(field_, d_eps, d_tau, t), ctx))
            return s.b_order(m)

        fd.append(richardson(list(steps), [central_difference(b_of, s) for s in steps]))
    raw, fd = np.array(raw), np.array(fd)
    c = complex(np.vdot(raw, fd) / np.vdot(raw, raw))
    return c, fd / raw


def c_norm_benchmark() -> tuple[CellGeometry, CoefficientField, BlochContext]:
    """Uniform quarter-wave slab used to fix the per-order normalization."""
    geom = CellGeometry(0.0, math.pi / 4, 16, 16)
    return geom, CoefficientField.uniform(geom, 4.0, 1.0), BlochContext(1.0, 0.0, 1.0, 1.0, geom.default_m_max())


@functools.lru_cache(maxsize=1)
def calibrated_c_norm() -> complex:
    c, _ = calibrate_c_norm(*c_norm_benchmark())
    return c


# -- homogeneous components ---------------------------------------------------------------


def gradient_homogeneous(result: SensitivityResult, geom: CellGeometry, inclusions: Sequence[Inclusion]) -> list[tuple[int, float, float]]:
    """``(id, dE/d eps_j, dE/d tau_j)`` by summing densities over each inclusion's cells."""
    out = []
    for inc in inclusions:
        mask = inclusion_mask(geom, inc)
        if not mask.any():
            raise ValueError(f"inclusion {inc.id} covers no cell centers on this mesh")
        out.append((inc.id, float(result.g_eps[mask].sum() * result.cell_area),
                    float(result.g_tau[mask].sum() * result.cell_area)))
    result.per_inclusion = out
    return out


# -- boundary variation -------------------------------------------------------------------


class FieldSampler:
    """Bilinear evaluation of a pseudoperiodic Q1 field and its gradient at arbitrary points."""

    def __init__(self, mesh: Mesh, u: np.ndarray, reversed_kappa: bool = False):
        self.mesh = mesh
        self.local = mesh.local_values(u, conjugate_phase=reversed_kappa)
        self.kappa = -mesh.kappa if reversed_kappa else mesh.kappa

    def __call__(self, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = self.mesh.geom
        x = np.asarray(x, float)
        z = np.asarray(z, float)
        wraps = np.floor(x / g.period)
        xr = x - wraps * g.period
        i = np.clip((xr / g.h1).astype(int), 0, g.nx - 1)
        j = np.clip(((z - g.z_minus) / g.h3).astype(int), 0, g.nz - 1)
        s = xr / g.h1 - i
        t = (z - g.z_minus) / g.h3 - j
        loc = self.local[j * g.nx + i]
        w = np.stack([(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t], axis=-1)
        ds = np.stack([-(1 - t), 1 - t, t, -t], axis=-1) / g.h1
        dt = np.stack([-(1 - s), -s, s, 1 - s], axis=-1) / g.h3
        phase = np.exp(2j * math.pi * self.kappa * wraps)
        val = phase * np.sum(w * loc, axis=-1)
        grad = phase[..., None] * np.stack([np.sum(ds * loc, -1), np.sum(dt * loc, -1)], axis=-1)
        return val, grad


@dataclass
class BoundaryGradient:
    value: float  # recombined with the geometric-mean flux weight (exact for tau jumps)
    inside: float
    outside: float
    n_samples: int


def gradient_boundary(
    sys: DiscreteSystem,
    sol: ScatteringSolution,
    adjoint: AdjointField,
    inclusion: Inclusion,
    background: tuple[float, float],
    velocity: float | np.ndarray | Callable = 1.0,
    n_samples: int = 256,
    offset: float = 1.0,
) -> BoundaryGradient:
    """Rate of change of the transmitted energy when the disk boundary flows by ``velocity . n``.

    ``velocity`` is the normal speed per sample (scalar, array, or a function of the
    sample angle).  ``grad u . grad u_ad`` is rebuilt from the continuous tangential
    derivative and normal flux ``tau d_n u``; the flux is divided by ``tau_in**2``
    (``inside``), ``tau_out**2`` (``outside``) or ``tau_in*tau_out`` (``value``).
    """
    shape = inclusion.shape
    if not isinstance(shape, Disk):
        raise TypeError("boundary gradients are implemented for disk inclusions")
    if n_samples < 16:
        raise ValueError("need at least 16 boundary samples")
    g = sys.mesh.geom
    cx, cz = shape.center
    r = shape.radius
    s = offset * max(g.h1, g.h3)
    if cx - r - s <= 0 or cx + r + s >= g.period or cz - r - s <= g.z_minus or cz + r + s >= g.z_plus:
        raise ValueError("disk boundary (plus sampling offset) must stay inside the cell")
    theta = TWO_PI * np.arange(n_samples) / n_samples
    n = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    tvec = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    if callable(velocity):
        vn = np.asarray(velocity(theta), float)
    else:
        vn = np.broadcast_to(np.asarray(velocity, float), theta.shape)
    px, pz = cx + r * n[:, 0], cz + r * n[:, 1]
    fu = FieldSampler(sys.mesh, sol.u)
    fa = FieldSampler(sys.mesh, adjoint.u_ad, reversed_kappa=True)
    tau_in, tau_out = inclusion.tau, background[1]
    eps_in, eps_out = inclusion.eps, background[0]

    def one_sided(sampler, sign):
        _, grad = sampler(px + sign * s * n[:, 0], pz + sign * s * n[:, 1])
        return np.sum(grad * tvec, -1), np.sum(grad * n, -1)

    def recombine(sampler):
        val, _ = sampler(px, pz)
        t_in, n_in = one_sided(sampler, -1.0)
        t_out, n_out = one_sided(sampler, 1.0)
        return val, 0.5 * (t_in + t_out), 0.5 * (tau_in * n_in + tau_out * n_out)

    u, ut, uf = recombine(fu)
    a, at, af = recombine(fa)
    ds = r * TWO_PI / n_samples

    def integral(tau_sq):
        dot = ut * at + uf * af / tau_sq
        integrand = (tau_in - tau_out) * dot - sys.ctx.omega**2 * (eps_in - eps_out) * u * a
        return float(np.imag(np.sum(integrand * vn) * ds) / TWO_PI)

    return BoundaryGradient(
        value=integral(tau_in * tau_out),
        inside=integral(tau_in**2),
        outside=integral(tau_out**2),
        n_samples=n_samples,
    )


# -- linearized field ---------------------------------------------------------------------


@dataclass
class LinearizedField:
    u0: np.ndarray = field(repr=False)
    d_eps: np.ndarray = field(repr=False)
    d_tau: np.ndarray = field(repr=False)
    outgoing_residual: float = 0.0


def _direction(geom: CellGeometry, d):
    return np.zeros(geom.shape) if d is None else np.asarray(d, dtype=float)


def solve_linearized(
    sys: DiscreteSystem,
    sol: ScatteringSolution,
    d_eps=None,
    d_tau=None,
    lu: Factorization | None = None,
    quadrature: str = "exact",
) -> LinearizedField:
    """First-order field change for the coefficient direction ``(d_eps, d_tau)``.

    Solves the scattering problem with no incident field and volume sources
    ``xi = -d_tau grad u``, ``h = omega**2 d_eps u``.  ``quadrature="exact"`` integrates
    the sources exactly against the Q1 basis (the exact derivative of the discrete
    field); ``"midpoint"`` uses the generic midpoint source quadrature.
    """
    from .structure import SourceTerm

    g = sys.mesh.geom
    d_eps = _direction(g, d_eps)
    d_tau = _direction(g, d_tau)
    lu = lu or Factorization(sys)
    if quadrature == "exact":
        load = -(perturbation_matrix(sys.mesh, d_eps, d_tau, sys.ctx.omega) @ sol.u)
        lin = solve_general(sys, None, None, extra_rhs=load, lu=lu)
    elif quadrature == "midpoint":
        ue = sys.mesh.local_values(sol.u)
        G = midpoint_gradients(g.h1, g.h3)
        grad_u = (ue @ G.T).reshape(g.shape + (2,))
        u_mid = ue.mean(axis=1).reshape(g.shape)
        src = SourceTerm(-d_tau[..., None] * grad_u, sys.ctx.omega**2 * d_eps * u_mid)
        from .assembly import volume_source_rhs

        load = volume_source_rhs(sys.mesh, src)
        lin = solve_general(sys, None, src, lu=lu)
    else:
        raise ValueError(f"unknown quadrature {quadrature!r}")
    res = scattered_outgoing_residual(sys, lin, volume_rhs=load)
    return LinearizedField(lin.u, d_eps, d_tau, res)


def h1_norm(mesh: Mesh, u: np.ndarray) -> float:
    """Discrete ``(int |grad u|^2 + |u|^2)^(1/2)`` on the period cell."""
    ones = np.ones(mesh.geom.shape)
    S = stiffness_matrix(mesh, ones) + mass_matrix(mesh, ones)
    return float(math.sqrt(max(np.vdot(u, S @ u).real, 0.0)))


# -- finite-difference harness -------------------------------------------------------------


def central_difference(fun: Callable[[float], complex], step: float) -> complex:
    return (fun(step) - fun(-step)) / (2.0 * step)


def richardson(steps: Sequence[float], values: Sequence[complex]) -> complex:
    """Extrapolate central differences (error series in ``step**2``) to zero step.

    Builds the full Neville table over decreasing steps and returns the entry
    whose estimated error (change from the previous column) is smallest.
    """
    order = np.argsort(steps)[::-1]
    s = [float(steps[i]) for i in order]
    v = [values[i] for i in order]
    n = len(s)
    if n == 1:
        return v[0]
    table = [[v[i]] for i in range(n)]
    best, best_err = v[-1], math.inf
    for i in range(1, n):
        for k in range(1, i + 1):
            ratio = (s[i - k] / s[i]) ** 2
            table[i].append(table[i][k - 1] + (table[i][k - 1] - table[i - 1][k - 1]) / (ratio - 1.0))
            err = abs(table[i][k] - table[i][k - 1])
            if err < best_err:
                best, best_err = table[i][k], err
    return best


def fitted_order(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx = np.log(np.asarray(xs, float))
    ly = np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass
class FDReport:
    functional: str
    steps: list[float]
    fd_values: list
    extrapolated: complex | float | None
    adjoint_value: complex | float
    rel_error: float
    fitted_order: float

    def to_json(self) -> dict:
        def enc(v):
            if v is None:
                return None
            if isinstance(v, complex) or np.iscomplexobj(v):
                return [float(np.real(v)), float(np.imag(v))]
            return float(v)

        return {
            "functional": self.functional,
            "steps": [float(s) for s in self.steps],
            "fd_values": [enc(v) for v in self.fd_values],
            "extrapolated": enc(self.extrapolated),
            "adjoint_value": enc(self.adjoint_value),
            "rel_error": float(self.rel_error),
            "fitted_order": float(self.fitted_order),
        }


def fd_check(
    geom: CellGeometry,
    field_: CoefficientField,
    ctx: BlochContext,
    direction: tuple,
    functional: str | tuple = "energy",
    steps: Sequence[float] = (1e-3, 1e-4, 1e-5),
    incidence: Incidence | None = None,
    envelope=None,
    method: str = "discrete",
) -> FDReport:
    """Compare adjoint/linearized predictions with finite differences of re-solved problems.

    ``functional`` is ``"energy"``, ``("order", m)`` or ``"field"``.
    """
    from .structure import check_admissible

    d_eps, d_tau = (_direction(geom, d) for d in direction)
    incidence = incidence if incidence is not None else Incidence()
    mesh = build_mesh(geom, ctx.kappa)
    steps = [float(s) for s in steps]

    def solved(t):
        f = perturb(field_, d_eps, d_tau, t)
        if envelope is not None and not check_admissible(f, envelope):
            raise ValueError(f"perturbed structure at t={t} leaves the admissible envelope")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = assemble(mesh, f, ctx)
            return s, solve_scattering(s, incidence)

    sys, sol = solved(0.0)
    name = functional if isinstance(functional, str) else f"order({functional[1]})"
    if functional == "energy":
        grad = gradient_energy(sys, sol, method=method)
        predicted = grad.directional(d_eps, d_tau)
        vals = [central_difference(lambda t: solved(t)[1].energy_transmitted, s) for s in steps]
    elif isinstance(functional, tuple) and functional[0] == "order":
        m = int(functional[1])
        predicted = gradient_order(sys, sol, m).directional(d_eps, d_tau)
        vals = [central_difference(lambda t: solved(t)[1].b_order(m), s) for s in steps]
    elif functional == "field":
        lin = solve_linearized(sys, sol, d_eps, d_tau)
        predicted = h1_norm(mesh, lin.u0)
        vals = [h1_norm(mesh, (solved(s)[1].u - sol.u) / s - lin.u0) for s in steps]
        return FDReport(name, steps, vals, None, predicted, vals[-1] / predicted, fitted_order(steps, vals))
    else:
        raise ValueError(f"unknown functional {functional!r}")
    extrap = richardson(steps, vals)
    errs = [abs(v - extrap) for v in vals]
    big = sorted(range(len(steps)), key=lambda i: -steps[i])[:2]
    order = fitted_order([steps[i] for i in big], [max(errs[i], 1e-300) for i in big]) if len(steps) > 1 else float("nan")
    rel = abs(extrap - predicted) / abs(extrap) if abs(extrap) > 0 else abs(predicted)
    return FDReport(name, steps, vals, extrap, predicted, float(rel), order)


# -- remainder and Lipschitz probes -----------------------------------------------------------


@dataclass
class RemainderStudy:
    ts: list[float]
    field_remainders: list[float]
    energy_remainders: list[float]
    field_exponent: float
    energy_exponent: float


def remainder_study(
    geom: CellGeometry,
    field_: CoefficientField,
    ctx: BlochContext,
    d_eps=None,
    d_tau=None,
    ts: Sequence[float] = (1e-1, 5e-2, 2.5e-2, 1.25e-2),
    incidence: Incidence | None = None,
) -> RemainderStudy:
    """Fit the decay of ``||u(t) - u - t*u0||`` and ``|E(t) - E - t*E0|`` in ``t``."""
    d_eps, d_tau = _direction(geom, d_eps), _direction(geom, d_tau)
    mesh = build_mesh(geom, ctx.kappa)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sys = assemble(mesh, field_, ctx)
        sol = solve_scattering(sys, incidence)
        lu = Factorization(sys)
        lin = solve_linearized(sys, sol, d_eps, d_tau, lu=lu)
        e0 = gradient_energy(sys, sol, lu=lu).directional(d_eps, d_tau)
        fr, er = [], []
        for t in ts:
            st = solve_scattering(assemble(mesh, perturb(field_, d_eps, d_tau, t), ctx), incidence)
            fr.append(h1_norm(mesh, st.u - sol.u - t * lin.u0))
            er.append(abs(st.energy_transmitted - sol.energy_transmitted - t * e0))
    return RemainderStudy(list(ts), fr, er, fitted_order(ts, fr), fitted_order(ts, er))


@dataclass
class LipschitzReport:
    distances: list[float]
    numerators: list[float]
    ratios: list[float]
    max_ratio: float
    p: float


def linearized_field(geom, field_, ctx, d_eps, d_tau, incidence=None) -> np.ndarray:
    mesh = build_mesh(geom, ctx.kappa)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sys = assemble(mesh, field_, ctx)
        sol = solve_scattering(sys, incidence)
        return solve_linearized(sys, sol, d_eps, d_tau).u0


def lipschitz_probe(
    geom: CellGeometry,
    ctx: BlochContext,
    base: CoefficientField,
    delta: tuple,
    direction: tuple,
    distances: Sequence[float] = (0.4, 0.2, 0.1, 0.05),
    p: float = 4.0,
    incidence: Incidence | None = None,
    other: CoefficientField | None = None,
) -> LipschitzReport:
    """Empirical Lipschitz constant of the field derivative in the base structure.

    Compares the linearized field for ``direction`` at ``base`` and at
    ``base + s*delta`` for each ``s`` in ``distances`` (or at ``other`` if given),
    normalized by the ``L^p`` sizes of the base difference and of the direction.
    """
    mesh = build_mesh(geom, ctx.kappa)
    d_eps, d_tau = (_direction(geom, d) for d in direction)
    dn = lp_norm(geom, d_eps, d_tau, p)
    u1 = linearized_field(geom, base, ctx, d_eps, d_tau, incidence)
    nums, ratios, dists = [], [], []
    pairs = [(1.0, other)] if other is not None else [(s, perturb(base, *delta, s)) for s in distances]
    for s, f2 in pairs:
        u2 = linearized_field(geom, f2, ctx, d_eps, d_tau, incidence)
        num = h1_norm(mesh, u1 - u2)
        den = lp_norm(geom, f2.eps - base.eps, f2.tau - base.tau, p) * dn
        nums.append(num)
        dists.append(float(s))
        ratios.append(num / den if den > 0 else 0.0)
    return LipschitzReport(dists, nums, ratios, max(ratios), p)
