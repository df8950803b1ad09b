"""Projected-gradient design of the coefficient field inside a box envelope.

The ascent direction is the L2 gradient density of the objective (so steps are
mesh independent); each trial iterate is clamped into the envelope and a step
is accepted only if the objective improves, halving otherwise.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assembly import assemble, build_mesh
from .harmonics import BlochContext
from .modes import Certificate, Refusal, find_certificate
from .scatter import Factorization, Incidence, ResonanceError, solve_scattering
from .sensitivity import gradient_energy
from .structure import AdmissibleEnvelope, CellGeometry, CoefficientField, check_admissible

MIN_STEP = 1e-12


@dataclass(frozen=True)
class Maximize:
    """Mean transmittance over the design frequencies, maximized."""


@dataclass(frozen=True)
class Minimize:
    """Mean transmittance over the design frequencies, minimized."""


@dataclass(frozen=True)
class MatchSpectrum:
    """Weighted least squares ``sum w_k (T(omega_k) - target_k)**2``, minimized."""

    targets: tuple[float, ...]
    weights: tuple[float, ...] | None = None


Objective = Maximize | Minimize | MatchSpectrum


@dataclass
class DesignProblem:
    objective: Objective
    design_region: np.ndarray  # boolean (nz, nx)
    envelope: AdmissibleEnvelope
    omegas: Sequence[float]
    kappa: float = 0.0
    eps0: float = 1.0
    tau0: float = 1.0
    m_max: int | None = None
    incidence: Incidence = field(default_factory=Incidence)
    step: float = 10.0
    max_iters: int = 200
    tolerance: float = 1e-8
    optimize_tau: bool = False
    certify: bool = True
    threads: int = 1

    def __post_init__(self):
        self.design_region = np.asarray(self.design_region, dtype=bool)
        if self.design_region.shape != self.envelope.shape:
            raise ValueError("design region and envelope grids differ")
        if not self.design_region.any():
            raise ValueError("design region is empty")
        self.omegas = tuple(float(w) for w in self.omegas)
        if not self.omegas:
            raise ValueError("at least one design frequency is required")
        if isinstance(self.objective, MatchSpectrum):
            if len(self.objective.targets) != len(self.omegas):
                raise ValueError("MatchSpectrum needs one target per frequency")
            if self.objective.weights is not None and len(self.objective.weights) != len(self.omegas):
                raise ValueError("MatchSpectrum needs one weight per frequency")
        if self.step <= 0 or self.max_iters < 0 or self.tolerance < 0:
            raise ValueError("step must be positive; max_iters and tolerance nonnegative")

    @property
    def sense(self) -> float:
        """+1 for ascent, -1 for descent."""
        return 1.0 if isinstance(self.objective, Maximize) else -1.0


def project(field_: CoefficientField, envelope: AdmissibleEnvelope) -> CoefficientField:
    """Cellwise clamp into the envelope."""
    return _clamped(field_.eps, field_.tau, envelope)


def _clamped(eps: np.ndarray, tau: np.ndarray, envelope: AdmissibleEnvelope) -> CoefficientField:
    return CoefficientField(np.clip(eps, envelope.eps_lo, envelope.eps_hi), np.clip(tau, envelope.tau_lo, envelope.tau_hi))


class OptimizationAborted(RuntimeError):
    def __init__(self, message: str, iterate: CoefficientField):
        super().__init__(message)
        self.iterate = iterate


@dataclass
class HistoryRow:
    iter: int
    objective: float
    step: float
    grad_norm: float
    balance_defect_max: float


@dataclass
class OptimizationResult:
    history: list[HistoryRow]
    final: CoefficientField
    certificate: Certificate | None
    reason: str


@dataclass
class _Evaluation:
    objective: float
    g_eps: np.ndarray
    g_tau: np.ndarray
    balance_defect_max: float
    transmittances: list[float]


def _objective(problem: DesignProblem, ts: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective value and its derivative with respect to each transmittance."""
    n = len(ts)
    obj = problem.objective
    if isinstance(obj, MatchSpectrum):
        w = np.ones(n) if obj.weights is None else np.asarray(obj.weights, float)
        r = ts - np.asarray(obj.targets, float)
        return float(np.sum(w * r * r)), 2.0 * w * r
    return float(np.mean(ts)), np.full(n, 1.0 / n)


class _Evaluator:
    def __init__(self, problem: DesignProblem, geom: CellGeometry):
        self.problem = problem
        self.geom = geom
        m_max = geom.default_m_max() if problem.m_max is None else problem.m_max
        self.ctxs = [BlochContext(w, problem.kappa, problem.eps0, problem.tau0, m_max) for w in problem.omegas]
        self.mesh = build_mesh(geom, self.ctxs[0].kappa)

    def _one(self, ctx, field_, with_grad):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            sys = assemble(self.mesh, field_, ctx)
            lu = Factorization(sys)
            sol = solve_scattering(sys, self.problem.incidence, lu=lu)
            grad = gradient_energy(sys, sol, lu=lu) if with_grad else None
        return sol, grad

    def __call__(self, field_: CoefficientField, with_grad: bool = True) -> _Evaluation:
        p = self.problem
        if p.threads > 1 and len(self.ctxs) > 1:
            with ThreadPoolExecutor(max_workers=p.threads) as pool:
                out = list(pool.map(lambda c: self._one(c, field_, with_grad), self.ctxs))
        else:
            out = [self._one(c, field_, with_grad) for c in self.ctxs]
        ts = np.array([s.energy_transmitted / s.incident_flux for s, _ in out])
        value, dvalue = _objective(p, ts)
        g_eps = np.zeros(self.geom.shape)
        g_tau = np.zeros(self.geom.shape)
        if with_grad:
            for (s, g), d in zip(out, dvalue):
                g_eps += d * g.g_eps / s.incident_flux
                g_tau += d * g.g_tau / s.incident_flux
        defect = max(abs(s.balance_defect) / s.incident_flux for s, _ in out)
        return _Evaluation(value, g_eps, g_tau, defect, ts.tolist())


def _direction(problem: DesignProblem, ev: _Evaluation) -> tuple[np.ndarray, np.ndarray]:
    mask = problem.design_region
    d_eps = np.where(mask, problem.sense * ev.g_eps, 0.0)
    d_tau = np.where(mask, problem.sense * ev.g_tau, 0.0) if problem.optimize_tau else np.zeros_like(d_eps)
    return d_eps, d_tau


def _l2(geom: CellGeometry, *arrays) -> float:
    return math.sqrt(sum(float(np.sum(a * a)) for a in arrays) * geom.cell_area)


def _improves(problem: DesignProblem, new: float, old: float) -> bool:
    return new > old if problem.sense > 0 else new < old


def certify_problem(problem: DesignProblem, geom: CellGeometry) -> Certificate:
    """Non-resonance certificate covering every design frequency, or :class:`Refusal`."""
    m_max = geom.default_m_max() if problem.m_max is None else problem.m_max
    return find_certificate(geom, problem.envelope, (min(problem.omegas), max(problem.omegas)),
                            problem.kappa, problem.eps0, problem.tau0, m_max)


def run(problem: DesignProblem, geom: CellGeometry, initial: CoefficientField) -> OptimizationResult:
    """Projected gradient ascent/descent with backtracking.

    Raises :class:`Refusal` if the envelope cannot be certified non-resonant at the
    design frequencies and :class:`OptimizationAborted` if a solve fails mid-run.
    """
    report = check_admissible(initial, problem.envelope)
    if not report:
        raise ValueError(f"initial design is not admissible: {report.violations[:3]}")
    cert = certify_problem(problem, geom) if problem.certify else None
    evaluate = _Evaluator(problem, geom)
    x = initial
    ev = evaluate(x)
    d_eps, d_tau = _direction(problem, ev)
    history = [HistoryRow(0, ev.objective, 0.0, _l2(geom, d_eps, d_tau), ev.balance_defect_max)]
    step = problem.step
    reason = "max_iters"
    for it in range(1, problem.max_iters + 1):
        probe = _clamped(x.eps + d_eps, x.tau + d_tau, problem.envelope)
        projected_norm = _l2(geom, probe.eps - x.eps, probe.tau - x.tau)
        if projected_norm <= problem.tolerance:
            reason = "stationary"
            break
        while True:
            trial = _clamped(x.eps + step * d_eps, x.tau + step * d_tau, problem.envelope)
            try:
                tev = evaluate(trial)
            except ResonanceError as exc:
                raise OptimizationAborted(f"solve failed at iteration {it}: {exc}", trial) from exc
            if _improves(problem, tev.objective, ev.objective):
                break
            step *= 0.5
            if step < MIN_STEP:
                break
        if step < MIN_STEP:
            reason = "step_underflow"
            break
        if not check_admissible(trial, problem.envelope):
            raise OptimizationAborted(f"iterate {it} left the admissible envelope", trial)
        gain = abs(tev.objective - ev.objective)
        x, ev = trial, tev
        d_eps, d_tau = _direction(problem, ev)
        history.append(HistoryRow(it, ev.objective, step, _l2(geom, d_eps, d_tau), ev.balance_defect_max))
        if gain <= problem.tolerance * max(1.0, abs(ev.objective)):
            reason = "converged"
            break
        step *= 2.0
    return OptimizationResult(history, x, cert, reason)


def predicted_improvement(problem: DesignProblem, geom: CellGeometry, field_: CoefficientField, step: float) -> tuple[float, float]:
    """First-order predicted and actual objective change for one unprojected step."""
    evaluate = _Evaluator(problem, geom)
    ev = evaluate(field_)
    d_eps, d_tau = _direction(problem, ev)
    predicted = problem.sense * step * _l2(geom, d_eps, d_tau) ** 2
    moved = evaluate(CoefficientField(field_.eps + step * d_eps, field_.tau + step * d_tau), with_grad=False)
    return predicted, moved.objective - ev.objective
