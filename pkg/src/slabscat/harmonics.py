"""Diffraction-order bookkeeping and Fourier Dirichlet-to-Neumann operators.

Fields outside the slab are expanded in pseudoperiodic harmonics
``exp(i (m + kappa) x1)`` of period ``2*pi``.  Each order ``m`` carries a
transverse exponent ``eta_m`` with ``eta_m**2 + (m + kappa)**2 = omega**2 eps0 / tau0``
and is propagating, linear (at cutoff) or evanescent.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

# Relative tolerance (against omega**2 eps0/tau0) for classifying an order as linear.
CUTOFF_RTOL = 1e-12


class CutoffWarning(UserWarning):
    """An order sits exactly at cutoff, where the outgoing condition degenerates."""


class HarmonicClass(enum.Enum):
    PROPAGATING = "propagating"
    LINEAR = "linear"
    EVANESCENT = "evanescent"


class Side(enum.Enum):
    LEFT = "left"  # x3 = z_minus
    RIGHT = "right"  # x3 = z_plus


class DtnVariant(enum.Enum):
    FULL = "full"
    REAL_PART = "real"
    IMAG_PART = "imag"
    ADJOINT = "adjoint"


def reduce_kappa(kappa: float) -> float:
    """Shift ``kappa`` by an integer into ``[-1/2, 1/2)``."""
    reduced = kappa - math.floor(kappa + 0.5)
    if reduced >= 0.5:
        reduced -= 1.0
    return float(reduced)


@dataclass(frozen=True)
class BlochContext:
    """Frequency, Bloch wavenumber, exterior medium and harmonic truncation.

    ``kappa`` is reduced into the first Brillouin zone on construction.
    """

    omega: float
    kappa: float
    eps0: float = 1.0
    tau0: float = 1.0
    m_max: int = 8

    def __post_init__(self):
        for name in ("omega", "eps0", "tau0"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and strictly positive, got {value!r}")
        if not np.isfinite(self.kappa):
            raise ValueError(f"kappa must be finite, got {self.kappa!r}")
        if int(self.m_max) != self.m_max or self.m_max < 1:
            raise ValueError(f"m_max must be an integer >= 1, got {self.m_max!r}")
        object.__setattr__(self, "kappa", reduce_kappa(float(self.kappa)))
        object.__setattr__(self, "m_max", int(self.m_max))

    @property
    def k2(self) -> float:
        """Exterior squared wavenumber ``omega**2 eps0 / tau0``."""
        return self.omega**2 * self.eps0 / self.tau0

    @property
    def orders(self) -> np.ndarray:
        return np.arange(-self.m_max, self.m_max + 1)

    @property
    def n_orders(self) -> int:
        return 2 * self.m_max + 1

    def index(self, m: int) -> int:
        """Position of order ``m`` in arrays indexed by :attr:`orders`."""
        if abs(m) > self.m_max:
            raise IndexError(f"order {m} outside truncation |m| <= {self.m_max}")
        return int(m) + self.m_max

    def etas(self) -> np.ndarray:
        return np.array([_eta(self, m)[0] for m in self.orders])

    def classes(self) -> list[HarmonicClass]:
        return [_eta(self, m)[1] for m in self.orders]

    def propagating_mask(self) -> np.ndarray:
        return np.array([c is HarmonicClass.PROPAGATING for c in self.classes()])

    def propagating_orders(self) -> list[int]:
        return [int(m) for m, p in zip(self.orders, self.propagating_mask()) if p]

    def replace(self, **changes) -> "BlochContext":
        values = dict(omega=self.omega, kappa=self.kappa, eps0=self.eps0, tau0=self.tau0, m_max=self.m_max)
        values.update(changes)
        return BlochContext(**values)

    def reversed(self) -> tuple["BlochContext", int]:
        """Context at ``-kappa`` and the integer shift ``s`` of the order labels.

        Order ``m`` at ``kappa`` corresponds to order ``-m - s`` at the reversed
        context; ``s`` is nonzero only for ``kappa = -1/2``.
        """
        rev = self.replace(kappa=-self.kappa)
        shift = int(round(self.kappa + rev.kappa))
        return rev, shift


@dataclass(frozen=True)
class Harmonic:
    m: int
    eta: complex
    cls: HarmonicClass


def _eta(ctx: BlochContext, m: int) -> tuple[complex, HarmonicClass]:
    k2 = ctx.k2
    q2 = k2 - (m + ctx.kappa) ** 2
    if abs(q2) <= CUTOFF_RTOL * k2:
        return 0j, HarmonicClass.LINEAR
    if q2 > 0:
        return complex(math.sqrt(q2), 0.0), HarmonicClass.PROPAGATING
    return complex(0.0, math.sqrt(-q2)), HarmonicClass.EVANESCENT


def eta_of(ctx: BlochContext, m: int) -> Harmonic:
    """Transverse exponent of order ``m`` with the outgoing branch.

    Real positive for propagating orders, zero at cutoff and ``i*sqrt(...)``
    (so that ``-i*eta > 0``) for evanescent orders.
    """
    eta, cls = _eta(ctx, int(m))
    return Harmonic(int(m), eta, cls)


def classify_orders(ctx: BlochContext, warn: bool = True) -> list[Harmonic]:
    """All harmonics ``|m| <= m_max``; warns if any order is exactly at cutoff."""
    harmonics = [eta_of(ctx, m) for m in ctx.orders]
    linear = [h.m for h in harmonics if h.cls is HarmonicClass.LINEAR]
    if warn and linear:
        warnings.warn(
            f"orders {linear} are at cutoff (eta = 0) for omega={ctx.omega}, kappa={ctx.kappa}; "
            "the outgoing condition is degenerate there",
            CutoffWarning,
            stacklevel=2,
        )
    return harmonics


def partition_orders(ctx: BlochContext) -> dict[HarmonicClass, list[int]]:
    out: dict[HarmonicClass, list[int]] = {c: [] for c in HarmonicClass}
    for h in classify_orders(ctx, warn=False):
        out[h.cls].append(h.m)
    return out


@dataclass
class TraceVector:
    """Fourier coefficients of a boundary trace, orders ``-m_max..m_max``."""

    side: Side
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.ndim != 1 or self.coeffs.size % 2 != 1:
            raise ValueError("trace coefficients must be a 1-D array of odd length 2*m_max+1")

    @property
    def m_max(self) -> int:
        return (self.coeffs.size - 1) // 2


def dtn_multipliers(ctx: BlochContext, variant: DtnVariant = DtnVariant.FULL) -> np.ndarray:
    """Diagonal Fourier multipliers of the DtN operator ``T`` or its parts.

    ``FULL = REAL_PART + 1j * IMAG_PART`` holds entrywise.
    """
    eta = ctx.etas()
    full = -1j * eta
    if variant is DtnVariant.FULL:
        return full
    if variant is DtnVariant.ADJOINT:
        return 1j * np.conj(eta)
    classes = ctx.classes()
    if variant is DtnVariant.REAL_PART:
        mask = np.array([c is HarmonicClass.EVANESCENT for c in classes])
        return np.where(mask, full, 0.0).real.astype(complex)
    mask = np.array([c is HarmonicClass.PROPAGATING for c in classes])
    return np.where(mask, -eta.real, 0.0).astype(complex)


def apply_dtn(ctx: BlochContext, f: TraceVector, variant: DtnVariant = DtnVariant.FULL) -> TraceVector:
    if f.coeffs.size != ctx.n_orders:
        raise ValueError(f"trace has {f.coeffs.size} coefficients, context expects {ctx.n_orders}")
    return TraceVector(f.side, dtn_multipliers(ctx, variant) * f.coeffs)


def outgoing_residual(ctx: BlochContext, trace: TraceVector, normal_deriv: TraceVector) -> float:
    """l2 norm of ``d_n u + T u`` over the truncated orders (zero iff outgoing).

    ``normal_deriv`` is the outward normal derivative: ``-d/dx3`` on the left
    boundary and ``+d/dx3`` on the right one.
    """
    if trace.side is not normal_deriv.side:
        raise ValueError("trace and normal derivative are on different boundaries")
    if trace.coeffs.size != ctx.n_orders or normal_deriv.coeffs.size != ctx.n_orders:
        raise ValueError("trace length does not match the context truncation")
    return float(np.linalg.norm(normal_deriv.coeffs + dtn_multipliers(ctx) * trace.coeffs))


def conjugate_trace(f: TraceVector) -> TraceVector:
    """Coefficients of ``conj(f)`` as a ``-kappa`` trace (index reflection)."""
    return TraceVector(f.side, np.conj(f.coeffs[::-1]))
