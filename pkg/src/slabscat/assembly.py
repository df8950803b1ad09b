"""Q1 finite-element discretization of the pseudoperiodic scattering problem.

Nodes sit on a structured grid, ``nx`` per row (the node at ``x1 = 2*pi`` is
identified with ``x1 = 0`` up to the Bloch phase ``exp(2*pi*i*kappa)``) and
``nz + 1`` rows from ``z_minus`` to ``z_plus``.  DOF ``j*nx + i`` is the node at
``(i*h1, z_minus + j*h3)``; element ``j*nx + i`` matches raster entry ``[j, i]``.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from dataclasses import field as dc_field

import numpy as np
import scipy.sparse as sp

from .harmonics import BlochContext, DtnVariant, classify_orders, dtn_multipliers
from .structure import CellGeometry, CoefficientField, SourceTerm


@dataclass(frozen=True)
class Mesh:
    geom: CellGeometry
    kappa: float
    conn: np.ndarray = dc_field(repr=False)  # (n_elem, 4) DOF indices, counterclockwise
    phase: np.ndarray = dc_field(repr=False)  # (n_elem, 4) local value = phase * global value

    @property
    def n_dofs(self) -> int:
        return self.geom.nx * (self.geom.nz + 1)

    @property
    def bloch_phase(self) -> complex:
        return cmath.exp(2j * math.pi * self.kappa)

    @property
    def left_dofs(self) -> np.ndarray:
        return np.arange(self.geom.nx)

    @property
    def right_dofs(self) -> np.ndarray:
        return self.geom.nz * self.geom.nx + np.arange(self.geom.nx)

    def boundary_x(self) -> np.ndarray:
        return np.arange(self.geom.nx) * self.geom.h1

    def node_coords(self) -> tuple[np.ndarray, np.ndarray]:
        g = self.geom
        x = np.tile(np.arange(g.nx) * g.h1, g.nz + 1)
        z = np.repeat(g.z_minus + np.arange(g.nz + 1) * g.h3, g.nx)
        return x, z

    def local_values(self, u: np.ndarray, conjugate_phase: bool = False) -> np.ndarray:
        """Element-local nodal values ``(n_elem, 4)``.

        ``conjugate_phase`` treats ``u`` as ``-kappa``-pseudoperiodic (adjoint fields).
        """
        ph = np.conj(self.phase) if conjugate_phase else self.phase
        return ph * np.asarray(u)[self.conn]


def build_mesh(geom: CellGeometry, kappa: float) -> Mesh:
    nx, nz = geom.nx, geom.nz
    i, j = np.meshgrid(np.arange(nx), np.arange(nz))
    i, j = i.ravel(), j.ravel()
    ip = (i + 1) % nx
    conn = np.stack([j * nx + i, j * nx + ip, (j + 1) * nx + ip, (j + 1) * nx + i], axis=1)
    phase = np.ones(conn.shape, dtype=complex)
    wrapped = i == nx - 1
    p = cmath.exp(2j * math.pi * kappa)
    phase[wrapped, 1] = p
    phase[wrapped, 2] = p
    return Mesh(geom, float(kappa), conn, phase)


_KX = np.array([[2, -2, -1, 1], [-2, 2, 1, -1], [-1, 1, 2, -2], [1, -1, -2, 2]], dtype=float)
_KZ = np.array([[2, 1, -1, -2], [1, 2, -2, -1], [-1, -2, 2, 1], [-2, -1, 1, 2]], dtype=float)
_M = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]], dtype=float)


def element_matrices(h1: float, h3: float, eps_c: float = 1.0, tau_c: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Exact Q1 stiffness ``tau_c * int grad(phi_a).grad(phi_b)`` and mass ``eps_c * int phi_a phi_b``."""
    if h1 <= 0 or h3 <= 0:
        raise ValueError("element sides must be positive")
    K = tau_c * (h3 / (6 * h1) * _KX + h1 / (6 * h3) * _KZ)
    M = eps_c * (h1 * h3 / 36) * _M
    return K, M


def midpoint_gradients(h1: float, h3: float) -> np.ndarray:
    """``(2, 4)`` array: gradients of the four Q1 shape functions at the element center."""
    return np.array([[-1, 1, 1, -1], [-1, -1, 1, 1]], dtype=float) * np.array([[0.5 / h1], [0.5 / h3]])


def _assemble_cellwise(mesh: Mesh, local: np.ndarray, coeff: np.ndarray) -> sp.csr_matrix:
    """Sum ``coeff[e] * conj(P_a) * local[a, b] * P_b`` into a global sparse matrix."""
    c = np.asarray(coeff, dtype=float).ravel()
    ph = mesh.phase
    vals = c[:, None, None] * np.conj(ph)[:, :, None] * local[None, :, :] * ph[:, None, :]
    rows = np.broadcast_to(mesh.conn[:, :, None], vals.shape)
    cols = np.broadcast_to(mesh.conn[:, None, :], vals.shape)
    n = mesh.n_dofs
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def stiffness_matrix(mesh: Mesh, tau: np.ndarray) -> sp.csr_matrix:
    K1, _ = element_matrices(mesh.geom.h1, mesh.geom.h3)
    return _assemble_cellwise(mesh, K1, tau)


def mass_matrix(mesh: Mesh, eps: np.ndarray) -> sp.csr_matrix:
    _, M1 = element_matrices(mesh.geom.h1, mesh.geom.h3)
    return _assemble_cellwise(mesh, M1, eps)


def boundary_fourier(mesh: Mesh, ctx: BlochContext) -> np.ndarray:
    """``E[k, m] = exp(i (m + kappa) x_k)`` on the equispaced boundary nodes."""
    x = mesh.boundary_x()
    return np.exp(1j * np.outer(x, ctx.orders + ctx.kappa))


def trace_coefficients(mesh: Mesh, ctx: BlochContext, trace: np.ndarray) -> np.ndarray:
    """Pseudoperiodic Fourier coefficients of boundary nodal values (DFT)."""
    E = boundary_fourier(mesh, ctx)
    return E.conj().T @ np.asarray(trace) / mesh.geom.nx


def _dtn_block(mesh: Mesh, ctx: BlochContext, multipliers: np.ndarray) -> sp.csr_matrix:
    E = boundary_fourier(mesh, ctx)
    w = mesh.geom.h1 / mesh.geom.nx
    block = ctx.tau0 * w * (E * multipliers[None, :]) @ E.conj().T
    n = mesh.n_dofs
    out = sp.lil_matrix((n, n), dtype=complex)
    for dofs in (mesh.left_dofs, mesh.right_dofs):
        out[np.ix_(dofs, dofs)] = block
    return out.tocsr()


def dtn_matrix(mesh: Mesh, ctx: BlochContext, variant: DtnVariant = DtnVariant.FULL) -> sp.csr_matrix:
    """``tau0 * int_Gamma (T u) conj(v)`` with lumped boundary quadrature, both boundaries."""
    return _dtn_block(mesh, ctx, dtn_multipliers(ctx, variant))


@dataclass
class DiscreteSystem:
    """Assembled forms for one ``(omega, kappa, eps, tau)``.

    ``matrix = K - omega**2 * B + D`` with ``D = D_r + 1j * D_i``; ``A_r = K + D_r``
    is the Hermitian part used by the eigenvalue machinery.
    """

    mesh: Mesh
    ctx: BlochContext
    field: CoefficientField
    K: sp.csr_matrix = dc_field(repr=False)
    B: sp.csr_matrix = dc_field(repr=False)
    D_r: sp.csr_matrix = dc_field(repr=False)
    D_i: sp.csr_matrix = dc_field(repr=False)
    matrix: sp.csc_matrix = dc_field(repr=False)

    @property
    def A_r(self) -> sp.csr_matrix:
        return (self.K + self.D_r).tocsr()

    @property
    def A_dtn(self) -> sp.csr_matrix:
        return (self.D_r + 1j * self.D_i).tocsr()


def assemble(mesh: Mesh, field: CoefficientField, ctx: BlochContext) -> DiscreteSystem:
    geom = mesh.geom
    if field.shape != geom.shape:
        raise ValueError(f"grid mismatch: field {field.shape} vs mesh {geom.shape}")
    if ctx.m_max >= geom.nx // 2:
        raise ValueError(f"m_max={ctx.m_max} aliases on nx={geom.nx}; need m_max < nx/2")
    if abs(mesh.kappa - ctx.kappa) > 1e-15:
        raise ValueError("mesh and context carry different Bloch wavenumbers")
    classify_orders(ctx)  # warn on cutoff orders
    K = stiffness_matrix(mesh, field.tau)
    B = mass_matrix(mesh, field.eps)
    D_r = dtn_matrix(mesh, ctx, DtnVariant.REAL_PART)
    D_i = dtn_matrix(mesh, ctx, DtnVariant.IMAG_PART)
    A = (K - ctx.omega**2 * B + D_r + 1j * D_i).tocsc()
    return DiscreteSystem(mesh, ctx, field, K, B, D_r, D_i, A)


def perturbation_matrix(mesh: Mesh, d_eps, d_tau, omega: float) -> sp.csr_matrix:
    """Derivative of the system matrix along a coefficient direction ``(d_eps, d_tau)``."""
    shape = mesh.geom.shape
    d_eps = np.zeros(shape) if d_eps is None else np.asarray(d_eps, dtype=float)
    d_tau = np.zeros(shape) if d_tau is None else np.asarray(d_tau, dtype=float)
    return (stiffness_matrix(mesh, d_tau) - omega**2 * mass_matrix(mesh, d_eps)).tocsr()


def _coeff_vector(ctx: BlochContext, coeffs: dict | None, label: str) -> np.ndarray:
    out = np.zeros(ctx.n_orders, dtype=complex)
    if not coeffs:
        return out
    prop = set(ctx.propagating_orders())
    for m, c in coeffs.items():
        m = int(m)
        if c == 0:
            continue
        if m not in prop:
            raise ValueError(f"{label}: order {m} is not propagating at omega={ctx.omega}, kappa={ctx.kappa}")
        out[ctx.index(m)] = complex(c)
    return out


def incident_rhs(mesh: Mesh, ctx: BlochContext, a_inc: dict | None = None, b_inc: dict | None = None) -> np.ndarray:
    """Load vector of ``tau0 * int_Gamma ((d_n + T) u_inc) conj(v)``.

    ``a_inc`` (from the left) and ``b_inc`` (from the right) map propagating
    order -> complex amplitude.
    """
    g = mesh.geom
    eta = ctx.etas()
    a = _coeff_vector(ctx, a_inc, "a_inc")
    b = _coeff_vector(ctx, b_inc, "b_inc")
    E = boundary_fourier(mesh, ctx)
    rhs = np.zeros(mesh.n_dofs, dtype=complex)
    w = ctx.tau0 * g.h1
    rhs[mesh.left_dofs] = w * E @ (-2j * eta * a * np.exp(1j * eta * g.z_minus))
    rhs[mesh.right_dofs] = w * E @ (-2j * eta * b * np.exp(-1j * eta * g.z_plus))
    return rhs


def volume_source_rhs(mesh: Mesh, src: SourceTerm) -> np.ndarray:
    """Midpoint quadrature of ``int (xi . grad conj(v) + h conj(v))``."""
    g = mesh.geom
    if src.h.shape != g.shape:
        raise ValueError(f"grid mismatch: source {src.h.shape} vs mesh {g.shape}")
    G = midpoint_gradients(g.h1, g.h3)
    xi = src.xi.reshape(-1, 2)
    local = (xi @ G + 0.25 * src.h.reshape(-1, 1)) * g.cell_area
    local = np.conj(mesh.phase) * local
    return np.bincount(mesh.conn.ravel(), weights=local.real.ravel(), minlength=mesh.n_dofs) + 1j * np.bincount(
        mesh.conn.ravel(), weights=local.imag.ravel(), minlength=mesh.n_dofs
    )
