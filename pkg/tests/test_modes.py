import math

import numpy as np
import pytest
from conftest import random_field
from oracles import dense_eigenvalues, even_guided_mode, scan_root

from slabscat.modes import (
    Certificate,
    EigenError,
    ModeProblem,
    Refusal,
    check_nonresonance,
    compute_modes,
    find_certificate,
    is_guided,
    lambda_j,
    omega_j,
    propagating_trace,
)
from slabscat.structure import AdmissibleEnvelope, CellGeometry, CoefficientField


def _guided_slab(n=16, eps=12.0):
    g = CellGeometry(-0.5, 0.5, n, n)
    return g, CoefficientField.uniform(g, eps, 1.0)


def _nested_pair(g, rng):
    """Two fields with eps_plus >= eps_minus and tau_minus <= tau_plus cellwise."""
    base = random_field(g, rng, eps=(1.0, 3.0), tau=(0.8, 2.0))
    plus = CoefficientField(base.eps + rng.uniform(0, 1.0, g.shape), base.tau - rng.uniform(0, 0.3, g.shape))
    return plus, base


# -- oracle agreement ----------------------------------------------------------------------


@pytest.mark.parametrize("kappa", [0.0, 0.3, -0.5])
@pytest.mark.parametrize("dense_max", [10**6, 0])
def test_eigenvalues_match_dense_oracle(kappa, dense_max, rng):
    g = CellGeometry(-0.3, 0.7, 8, 4)
    f = random_field(g, rng)
    problem = ModeProblem(g, f, kappa, m_max=3, dense_max_dofs=dense_max)
    for omega in (0.4, 1.2):
        vals, _ = problem.pencil(omega, 10)
        ref = dense_eigenvalues(f.eps, f.tau, g.z_minus, g.z_plus, problem.kappa, omega, 10, m_max=3)
        assert np.abs(vals - ref).max() <= 1e-10 * max(1.0, np.abs(ref).max())


@pytest.mark.parametrize("dense_max", [10**6, 0])
def test_eigenvectors_b_orthonormal(dense_max, rng):
    g = CellGeometry(0.0, 1.0, 8, 6)
    problem = ModeProblem(g, random_field(g, rng), 0.2, dense_max_dofs=dense_max)
    _, vecs = problem.pencil(0.9, 6)
    gram = vecs.conj().T @ (problem.B @ vecs)
    assert np.abs(gram - np.eye(6)).max() <= 1e-8


def test_pencil_index_errors(rng):
    g = CellGeometry(0.0, 1.0, 8, 4)
    problem = ModeProblem(g, random_field(g, rng), 0.2)
    with pytest.raises(ValueError):
        problem.pencil(1.0, 0)
    with pytest.raises(ValueError):
        problem.lambda_j(1.0, 0)
    with pytest.raises(ValueError, match="grid"):
        ModeProblem(g, CoefficientField.uniform(CellGeometry(0, 1, 8, 6)), 0.2)


# -- eigenvalue curves ---------------------------------------------------------------------


def test_lambda_one_positive_off_zero_kappa(rng):
    g = CellGeometry(0.0, 1.0, 8, 6)
    f = random_field(g, rng)
    for kappa in (0.1, -0.3, -0.5):
        problem = ModeProblem(g, f, kappa)
        for omega in (0.05, 0.7, 2.0):
            assert lambda_j(problem, omega, 1) > 0
    # at kappa = 0 the constant mode has zero Rayleigh quotient while order 0 propagates
    assert abs(lambda_j(ModeProblem(g, f, 0.0), 0.7, 1)) <= 1e-12
    assert omega_j(ModeProblem(g, f, 0.0), 1) == 0.0


def test_lambda_nonincreasing_in_omega(rng):
    g = CellGeometry(-0.5, 0.5, 8, 8)
    problem = ModeProblem(g, random_field(g, rng), 0.27)
    omegas = np.linspace(0.05, 3.0, 40)
    table = np.array([problem.pencil(w, 5)[0] for w in omegas])
    steps = np.diff(table, axis=0)
    assert steps.max() <= 1e-10 * np.abs(table).max()


def test_omega_j_matches_scan(rng):
    g = CellGeometry(-0.5, 0.5, 8, 8)
    problem = ModeProblem(g, random_field(g, rng), 0.27)
    for j in (1, 2, 4):
        w = omega_j(problem, j, rtol=1e-12)
        assert lambda_j(problem, w, j) == pytest.approx(w * w, rel=1e-9)
        # fine local scan: lambda_j has a square-root kink where an order crosses the light line
        ref = scan_root(lambda x: problem.lambda_j(x, j) - x * x, 0.9 * w, 1.1 * w)
        assert w == pytest.approx(ref, rel=1e-5)


def test_omega_j_bracket_errors(rng):
    g = CellGeometry(-0.5, 0.5, 8, 8)
    problem = ModeProblem(g, random_field(g, rng), 0.27)
    w = omega_j(problem, 1)
    with pytest.raises(EigenError):
        omega_j(problem, 1, bracket=(1.5 * w, 2 * w))
    with pytest.raises(ValueError):
        omega_j(problem, 1, bracket=(2 * w, w))
    assert omega_j(problem, 1, bracket=(0.5 * w, 1.5 * w)) == pytest.approx(w, rel=1e-9)


def test_nested_pair_monotonicity(rng):
    g = CellGeometry(-0.5, 0.5, 8, 8)
    for _ in range(5):
        plus, minus = _nested_pair(g, rng)
        for j in (1, 2, 3):
            assert omega_j(ModeProblem(g, plus, 0.3), j) <= omega_j(ModeProblem(g, minus, 0.3), j) * (1 + 1e-9)


# -- guided modes --------------------------------------------------------------------------


def test_guided_mode_matches_waveguide_oracle():
    g, f = _guided_slab(16)
    problem = ModeProblem(g, f, 0.4)
    seq = compute_modes(problem, 1)
    w1 = seq.omegas[0]
    assert w1 < 0.4
    assert abs(w1 - even_guided_mode(12.0, 1.0, 0.4)) <= 1e-3
    # below the light line every order is evanescent, so the flag holds vacuously
    assert seq.guided_flags == [True] and seq.max_prop_trace == [0.0]


def test_propagating_trace_flags(rng):
    g = CellGeometry(0.0, 1.0, 16, 8)
    problem = ModeProblem(g, CoefficientField.uniform(g, 2.0, 1.0), 0.1)
    seq = compute_modes(problem, 6)
    assert seq.indices and all(seq.omegas[i] <= seq.omegas[i + 1] for i in range(len(seq.omegas) - 1))
    assert seq.guided_flags == [t <= 1e-8 for t in seq.max_prop_trace]
    assert not all(seq.guided_flags)
    j = seq.guided_flags.index(False)
    ctx = problem.ctx(seq.omegas[j])
    assert propagating_trace(problem, seq.eigvecs[j], ctx) > 1e-3
    assert not is_guided(problem, seq.eigvecs[j], ctx)
    with pytest.raises(ValueError):
        propagating_trace(problem, np.zeros(problem.mesh.n_dofs), ctx)


def test_compute_modes_cap_and_threads(rng):
    g = CellGeometry(-0.5, 0.5, 8, 8)
    problem = ModeProblem(g, random_field(g, rng), 0.27)
    full = compute_modes(problem, 4)
    capped = compute_modes(problem, 4, omega_cap=full.omegas[1])
    assert capped.omegas == full.omegas[:2]
    assert compute_modes(problem, 4, threads=2).omegas == full.omegas
    with pytest.raises(ValueError):
        compute_modes(problem, 0)


# -- certification -------------------------------------------------------------------------


def _benchmark_envelope():
    g, _ = _guided_slab(16)
    return g, AdmissibleEnvelope.uniform(g, (11.0, 13.0), (1.0, 1.0))


def test_certificate_benchmark():
    g, env = _benchmark_envelope()
    cert = check_nonresonance(g, env, (0.05, 0.6), 1, 0.4)
    assert isinstance(cert, Certificate) and cert.j == 1
    assert cert.omega_j_soft < cert.omega_next_stiff
    assert cert.lower == cert.omega_j_soft and cert.upper == cert.omega_next_stiff
    # the flagged guided frequency of the eps = 12 member lies below the interval
    w1 = omega_j(ModeProblem(g, CoefficientField.uniform(g, 12.0, 1.0), 0.4), 1)
    assert w1 < cert.lower and not cert.contains(w1)
    assert cert.contains(0.5 * (cert.lower + cert.upper))


def test_certificate_degenerate_envelope():
    g, f = _guided_slab(8)
    env = AdmissibleEnvelope.around(f)
    problem = ModeProblem(g, f, 0.4)
    w1, w2 = omega_j(problem, 1), omega_j(problem, 2)
    cert = check_nonresonance(g, env, (0.01, 5.0), 1, 0.4)
    assert cert.omega_j_soft == pytest.approx(w1, rel=1e-9)
    assert cert.omega_next_stiff == pytest.approx(w2, rel=1e-9)


def test_certificate_widening_shrinks():
    g, f = _guided_slab(8)
    narrow = check_nonresonance(g, AdmissibleEnvelope.around(f, eps_delta=0.5), (0.01, 5.0), 1, 0.4)
    wide = check_nonresonance(g, AdmissibleEnvelope.around(f, eps_delta=1.0), (0.01, 5.0), 1, 0.4)
    assert wide.lower >= narrow.lower and wide.upper <= narrow.upper
    assert wide.upper - wide.lower < narrow.upper - narrow.lower


def test_certificate_refusals():
    g, env = _benchmark_envelope()
    with pytest.raises(Refusal) as info:
        check_nonresonance(g, env, (0.7, 0.8), 1, 0.4)
    assert info.value.lower < info.value.upper < 0.7
    wide = AdmissibleEnvelope.uniform(g, (1.0, 13.0), (1.0, 1.0))
    with pytest.raises(Refusal, match="empty"):
        check_nonresonance(g, wide, (0.05, 0.6), 1, 0.4)
    with pytest.raises(ValueError):
        check_nonresonance(g, env, (0.6, 0.05), 1, 0.4)


def test_find_certificate():
    g, env = _benchmark_envelope()
    cert = find_certificate(g, env, (0.27, 0.3), 0.4)
    assert cert.j == 1 and cert.lower == 0.27 and cert.upper == 0.3
    with pytest.raises(Refusal):
        find_certificate(g, env, (0.2, 0.3), 0.4)
    assert math.isfinite(find_certificate(g, env, (0.2, 0.3), 0.4, require_cover=False).upper)
