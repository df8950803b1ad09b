"""Real eigenvalue sequences of the Hermitian pencil, guided modes and non-resonance certificates.

For a trial frequency ``omega`` the pencil is ``(A_r(omega), B)`` with
``A_r = K + D_r`` (stiffness plus the evanescent part of the DtN block) and
``B`` the ``eps``-weighted mass matrix.  ``lambda_j(omega)`` is its ``j``-th smallest
eigenvalue (1-based); ``omega_j`` solves ``lambda_j(omega) = omega**2``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import Mesh, build_mesh, dtn_matrix, mass_matrix, stiffness_matrix, trace_coefficients
from .harmonics import BlochContext, DtnVariant
from .structure import AdmissibleEnvelope, CellGeometry, CoefficientField

DENSE_MAX_DOFS = 1500
GUIDED_TOL = 1e-8
# Shift used by the iterative solver; A_r is only semidefinite (kappa = 0 has a constant null vector).
_SHIFT = -1e-2


class EigenError(RuntimeError):
    """Eigensolver failure or a bracket without sign change."""


class Refusal(RuntimeError):
    """No certified non-resonant interval for the requested window."""

    def __init__(self, message: str, lower: float, upper: float):
        super().__init__(message)
        self.lower = lower
        self.upper = upper


class ModeProblem:
    """Pencil data for one structure and Bloch wavenumber; only ``D_r`` depends on ``omega``."""

    def __init__(self, geom: CellGeometry, field_: CoefficientField, kappa: float,
                 eps0: float = 1.0, tau0: float = 1.0, m_max: int | None = None,
                 dense_max_dofs: int = DENSE_MAX_DOFS):
        if field_.shape != geom.shape:
            raise ValueError(f"grid mismatch: field {field_.shape} vs geometry {geom.shape}")
        self.geom = geom
        self.field = field_
        self.eps0 = float(eps0)
        self.tau0 = float(tau0)
        self.m_max = geom.default_m_max() if m_max is None else int(m_max)
        self.base = BlochContext(1.0, kappa, eps0, tau0, self.m_max)
        self.mesh: Mesh = build_mesh(geom, self.base.kappa)
        self.K = stiffness_matrix(self.mesh, field_.tau)
        self.B = mass_matrix(self.mesh, field_.eps)
        self.dense_max_dofs = dense_max_dofs

    @property
    def kappa(self) -> float:
        return self.base.kappa

    def ctx(self, omega: float) -> BlochContext:
        return self.base.replace(omega=float(omega))

    def A_r(self, omega: float) -> sp.csr_matrix:
        return (self.K + dtn_matrix(self.mesh, self.ctx(omega), DtnVariant.REAL_PART)).tocsr()

    def pencil(self, omega: float, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Lowest ``k`` eigenpairs of ``A_r(omega) v = lambda B v``; vectors are B-orthonormal."""
        n = self.mesh.n_dofs
        if not 1 <= k <= n:
            raise ValueError(f"requested {k} eigenpairs of a {n}-dimensional pencil")
        A = self.A_r(omega)
        if n <= self.dense_max_dofs or k >= n - 1:
            vals, vecs = la.eigh(A.toarray(), self.B.toarray(), subset_by_index=[0, k - 1])
        else:
            try:
                vals, vecs = spla.eigsh(A.tocsc(), k=k, M=self.B.tocsc(), sigma=_SHIFT, which="LM", tol=1e-13)
            except spla.ArpackError as exc:  # pragma: no cover - solver failure path
                raise EigenError(f"iterative eigensolver failed at omega={omega}: {exc}") from exc
            order = np.argsort(vals)
            vals, vecs = vals[order], vecs[:, order]
            # Re-normalize against B (ARPACK returns B-orthonormal vectors up to its tolerance).
            norms = np.sqrt(np.real(np.einsum("ij,ij->j", vecs.conj(), self.B @ vecs)))
            vecs = vecs / norms
        return np.asarray(vals, float), vecs

    def lambda_j(self, omega: float, j: int) -> float:
        if j < 1:
            raise ValueError("eigenvalue indices are 1-based")
        return float(self.pencil(omega, j)[0][j - 1])


def lambda_j(problem: ModeProblem, omega: float, j: int) -> float:
    return problem.lambda_j(omega, j)


def omega_j(problem: ModeProblem, j: int, bracket: tuple[float, float] | None = None, rtol: float = 1e-10) -> float:
    """Root of ``g(omega) = lambda_j(omega) - omega**2`` by bisection.

    The default bracket is ``(omega_min, sqrt(lambda_j(omega_min)))`` with a tiny
    ``omega_min``; since ``lambda_j`` is nonincreasing this always brackets the root.
    Returns ``0.0`` when ``lambda_j`` vanishes identically at low frequency (the
    constant mode at ``kappa = 0``).
    """
    g = lambda w: problem.lambda_j(w, j) - w * w  # noqa: E731
    if bracket is None:
        lo = 1e-8
        lam0 = problem.lambda_j(lo, j)
        # null branch up to roundoff on the Rayleigh-quotient scale tau/eps
        null_tol = 1e-10 * problem.field.tau.max() / problem.field.eps.min()
        if lam0 <= max(lo * lo, null_tol):
            return 0.0
        hi = math.sqrt(lam0)
        g_lo, g_hi = lam0 - lo * lo, g(hi)
    else:
        lo, hi = map(float, bracket)
        if not 0 < lo < hi:
            raise ValueError(f"invalid bracket {bracket!r}")
        g_lo, g_hi = g(lo), g(hi)
    if g_lo == 0:
        return lo
    if g_hi == 0:
        return hi
    if g_lo * g_hi > 0:
        raise EigenError(f"g_{j} has no sign change on [{lo}, {hi}] (g = {g_lo:.3e}, {g_hi:.3e})")
    tol = rtol * hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        g_mid = g(mid)
        if g_mid == 0:
            return mid
        if (g_mid > 0) == (g_lo > 0):
            lo, g_lo = mid, g_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def propagating_trace(problem: ModeProblem, vec: np.ndarray, ctx: BlochContext) -> float:
    """Largest propagating Fourier coefficient of the B-normalized trace on either boundary."""
    prop = ctx.propagating_mask()
    if not prop.any():
        return 0.0
    v = np.asarray(vec)
    norm = math.sqrt(max(np.vdot(v, problem.B @ v).real, 0.0))
    if norm == 0:
        raise ValueError("zero eigenvector")
    v = v / norm
    mesh = problem.mesh
    out = 0.0
    for dofs in (mesh.left_dofs, mesh.right_dofs):
        coeffs = trace_coefficients(mesh, ctx, v[dofs])
        out = max(out, float(np.max(np.abs(coeffs[prop]))))
    return out


def is_guided(problem: ModeProblem, vec: np.ndarray, ctx: BlochContext, tol: float = GUIDED_TOL) -> bool:
    """True when the mode has no propagating trace content (vacuous below cutoff)."""
    return propagating_trace(problem, vec, ctx) <= tol


@dataclass
class EigenSequence:
    indices: list[int]
    omegas: list[float]
    eigvecs: list[np.ndarray] = field(repr=False)
    guided_flags: list[bool] = field(default_factory=list)
    max_prop_trace: list[float] = field(default_factory=list)
    kappa: float = 0.0


def compute_modes(
    problem: ModeProblem,
    n_modes: int,
    omega_cap: float | None = None,
    guided_tol: float = GUIDED_TOL,
    threads: int = 1,
) -> EigenSequence:
    """``omega_1 .. omega_n`` (positive entries only), their eigenvectors and guided flags."""
    if n_modes < 1:
        raise ValueError("n_modes must be >= 1")
    js = list(range(1, n_modes + 1))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            roots = list(pool.map(lambda j: omega_j(problem, j), js))
    else:
        roots = [omega_j(problem, j) for j in js]
    seq = EigenSequence([], [], [], [], [], problem.kappa)
    for j, w in zip(js, roots):
        if w <= 0 or (omega_cap is not None and w > omega_cap):
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ctx = problem.ctx(w)
        vec = problem.pencil(w, j)[1][:, j - 1]
        trace = propagating_trace(problem, vec, ctx)
        seq.indices.append(j)
        seq.omegas.append(w)
        seq.eigvecs.append(vec)
        seq.max_prop_trace.append(trace)
        seq.guided_flags.append(trace <= guided_tol)
    return seq


@dataclass(frozen=True)
class Certificate:
    """``omega`` in ``(lower, upper)`` is not an eigenvalue for any field in the envelope."""

    j: int
    omega_j_soft: float  # omega_j at (eps_lo, tau_hi)
    omega_next_stiff: float  # omega_{j+1} at (eps_hi, tau_lo)
    lower: float
    upper: float

    def contains(self, omega: float) -> bool:
        return self.lower < omega < self.upper


def _endpoint_problem(geom, field_, kappa, eps0, tau0, m_max):
    return ModeProblem(geom, field_, kappa, eps0, tau0, m_max)


def certified_window(geom: CellGeometry, envelope: AdmissibleEnvelope, kappa: float, j: int,
                     eps0: float = 1.0, tau0: float = 1.0, m_max: int | None = None) -> tuple[float, float]:
    """``(omega_j(eps_lo, tau_hi), omega_{j+1}(eps_hi, tau_lo))`` for the envelope."""
    soft = _endpoint_problem(geom, envelope.softest(), kappa, eps0, tau0, m_max)
    stiff = _endpoint_problem(geom, envelope.stiffest(), kappa, eps0, tau0, m_max)
    return omega_j(soft, j), omega_j(stiff, j + 1)


def check_nonresonance(
    geom: CellGeometry,
    envelope: AdmissibleEnvelope,
    omega_range: tuple[float, float],
    j: int,
    kappa: float,
    eps0: float = 1.0,
    tau0: float = 1.0,
    m_max: int | None = None,
) -> Certificate:
    """Certify the part of ``omega_range`` strictly between the sandwich bounds, or refuse."""
    w_lo, w_hi = map(float, omega_range)
    if not 0 < w_lo <= w_hi:
        raise ValueError(f"invalid omega range {omega_range!r}")
    if envelope.shape != geom.shape:
        raise ValueError("envelope and geometry grids differ")
    soft, stiff = certified_window(geom, envelope, kappa, j, eps0, tau0, m_max)
    lower, upper = max(soft, w_lo), min(stiff, w_hi)
    if not soft < stiff:
        raise Refusal(f"empty certified interval for j={j}: omega_j(soft)={soft!r} >= omega_j+1(stiff)={stiff!r}", soft, stiff)
    if not (lower < upper or (w_lo == w_hi and soft < w_lo < stiff)):
        raise Refusal(
            f"omega range [{w_lo}, {w_hi}] misses the certified interval ({soft!r}, {stiff!r}) for j={j}", soft, stiff
        )
    return Certificate(j, soft, stiff, lower, upper)


def find_certificate(
    geom: CellGeometry,
    envelope: AdmissibleEnvelope,
    omega_range: tuple[float, float],
    kappa: float,
    eps0: float = 1.0,
    tau0: float = 1.0,
    m_max: int | None = None,
    j_max: int = 20,
    require_cover: bool = True,
) -> Certificate:
    """First ``j`` whose certified interval covers (or, if not ``require_cover``, meets) the range."""
    w_lo, w_hi = omega_range
    soft_problem = _endpoint_problem(geom, envelope.softest(), kappa, eps0, tau0, m_max)
    stiff_problem = _endpoint_problem(geom, envelope.stiffest(), kappa, eps0, tau0, m_max)
    last = None
    soft = omega_j(soft_problem, 1)
    for j in range(1, j_max + 1):
        if soft >= w_hi:
            break
        stiff = omega_j(stiff_problem, j + 1)
        lower, upper = max(soft, w_lo), min(stiff, w_hi)
        covers = soft < w_lo and stiff > w_hi
        if covers or (not require_cover and soft < stiff and lower < upper):
            return Certificate(j, soft, stiff, lower, upper)
        last = Refusal(f"certified interval ({soft!r}, {stiff!r}) for j={j} does not cover [{w_lo}, {w_hi}]", soft, stiff)
        soft = omega_j(soft_problem, j + 1)
    if last is None:
        last = Refusal(f"no certified interval below omega={w_hi}", math.nan, math.nan)
    raise last
