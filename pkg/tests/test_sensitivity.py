import math

import numpy as np
import pytest
from conftest import random_field, relative_direction, smooth_direction

from slabscat.assembly import assemble, build_mesh
from slabscat.harmonics import BlochContext
from slabscat.scatter import Factorization, Incidence, solve_general, solve_scattering
from slabscat.sensitivity import (
    calibrated_c_norm,
    central_difference,
    energy_from_orders,
    fd_check,
    fitted_order,
    gradient_boundary,
    gradient_energy,
    gradient_homogeneous,
    gradient_order,
    gradient_via_adjoint_field,
    h1_norm,
    lipschitz_probe,
    remainder_study,
    richardson,
    solve_adjoint,
    solve_linearized,
)
from slabscat.structure import (
    AdmissibleEnvelope,
    CellGeometry,
    CoefficientField,
    Disk,
    Inclusion,
    Rect,
    SourceTerm,
    inclusion_mask,
    perturb,
    rasterize,
)


def _setup(geom, field, omega, kappa, incidence=None):
    ctx = BlochContext(omega, kappa, m_max=min(geom.default_m_max(), 12))
    sys = assemble(build_mesh(geom, ctx.kappa), field, ctx)
    return sys, solve_scattering(sys, incidence)


def _energy(geom, field, ctx):
    return solve_scattering(assemble(build_mesh(geom, ctx.kappa), field, ctx)).energy_transmitted


def _inclusion_slab(n=64):
    g = CellGeometry(0.0, 1.0, n, n)
    inc = Inclusion(Disk((math.pi, 0.5), 0.3), 4.0, 1.0, 1)
    return g, rasterize(g, (1.0, 1.0), [inc]), inc


# -- adjoint field -------------------------------------------------------------------------


def test_adjoint_empty_slab_is_left_traveling_wave():
    g = CellGeometry(0.0, 1.0, 64, 64)
    sys, sol = _setup(g, CoefficientField.uniform(g), 1.0, 0.0)
    adj = solve_adjoint(sys, sol)
    _, z = sys.mesh.node_coords()
    assert np.abs(adj.u_ad - np.conj(sol.b_order(0)) * np.exp(-1j * z)).max() <= 1e-3
    assert adj.sys.ctx.kappa == 0.0


def test_adjoint_vanishes_without_propagating_orders():
    g = CellGeometry(0.0, 1.0, 16, 8)
    ctx = BlochContext(0.3, 0.4, m_max=7)
    sys = assemble(build_mesh(g, ctx.kappa), CoefficientField.uniform(g, 2.0), ctx)
    h = np.zeros(g.shape)
    h[3, 5] = 1.0
    sol = solve_general(sys, None, SourceTerm(np.zeros(g.shape + (2,)), h))
    adj = solve_adjoint(sys, sol)
    assert not np.any(adj.u_ad)
    assert not np.any(gradient_energy(sys, sol, method="continuum").g_eps)


@pytest.mark.parametrize("kappa", [0.0, 0.17, -0.31])
def test_adjoint_field_matches_transpose_solve(kappa, rng):
    g = CellGeometry(-0.5, 0.5, 16, 16)
    sys, sol = _setup(g, random_field(g, rng), 2.3, kappa)
    disc = gradient_energy(sys, sol)
    via = gradient_via_adjoint_field(sys, sol, solve_adjoint(sys, sol))
    scale = max(np.abs(disc.g_eps).max(), np.abs(disc.g_tau).max())
    assert np.abs(via.g_eps - disc.g_eps).max() <= 1e-10 * scale
    assert np.abs(via.g_tau - disc.g_tau).max() <= 1e-10 * scale


# -- energy gradient -----------------------------------------------------------------------


def test_gradient_pairing_linearity(rng):
    g = CellGeometry(0.0, 1.0, 16, 8)
    sys, sol = _setup(g, random_field(g, rng), 1.4, 0.2)
    grad = gradient_energy(sys, sol)
    z = np.zeros(g.shape)
    assert grad.directional(z, z) == 0
    de, dt = rng.normal(size=g.shape), rng.normal(size=g.shape)
    assert grad.directional(2 * de, 2 * dt) == pytest.approx(2 * grad.directional(de, dt), rel=1e-14)
    assert grad.g_eps.shape == g.shape and grad.g_tau.shape == g.shape
    with pytest.raises(ValueError):
        gradient_energy(sys, sol, method="bogus")


def test_single_cell_fd():
    g, f, _ = _inclusion_slab(64)
    ctx = BlochContext(1.0, 0.0, m_max=g.default_m_max())
    sys, sol = _setup(g, f, 1.0, 0.0)
    j, i = 40, 20
    d = np.zeros(g.shape)
    d[j, i] = 1.0
    # the cell derivative is ~1e-7 against E ~ 1, so small steps are roundoff-limited
    fd = central_difference(lambda t: _energy(g, perturb(f, d, None, t), ctx), 1e-2)
    disc = gradient_energy(sys, sol).directional(d)
    cont = gradient_energy(sys, sol, method="continuum").directional(d)
    assert abs(disc - fd) <= 1e-6 * abs(fd)
    # the continuum rule differs from the discrete one by a quadrature error on a single cell
    assert abs(cont - disc) <= 1e-2 * abs(disc)


def test_fd_check_energy(rng):
    g = CellGeometry(-0.5, 0.5, 16, 16)
    f = random_field(g, rng)
    rep = fd_check(g, f, BlochContext(1.7, 0.11, m_max=7), smooth_direction(g, rng))
    assert rep.rel_error <= 1e-6
    assert rep.fitted_order == pytest.approx(2.0, abs=0.2)
    js = rep.to_json()
    assert set(js) >= {"steps", "fd_values", "extrapolated", "adjoint_value", "rel_error", "fitted_order"}


def test_fd_check_envelope_violation(rng):
    g = CellGeometry(0.0, 1.0, 8, 4)
    f = CoefficientField.uniform(g, 2.0, 1.0)
    env = AdmissibleEnvelope.around(f, eps_delta=1e-6)
    with pytest.raises(ValueError, match="envelope"):
        fd_check(g, f, BlochContext(1.0, 0.1, m_max=3), (np.ones(g.shape), None), envelope=env)


# -- per-order gradients -------------------------------------------------------------------


def test_c_norm_value():
    c = calibrated_c_norm()
    assert abs(c - (-1j / (4 * math.pi))) <= 1e-8


def test_order_gradient_zero_and_errors(rng):
    g = CellGeometry(0.0, 1.0, 16, 8)
    sys, sol = _setup(g, random_field(g, rng), 1.4, 0.2)
    og = gradient_order(sys, sol, 0)
    z = np.zeros(g.shape)
    assert og.directional(z, z) == 0
    with pytest.raises(ValueError, match="not propagating"):
        gradient_order(sys, sol, 5)


def test_order_chain_rule(rng):
    g = CellGeometry(-0.5, 0.5, 16, 16)
    sys, sol = _setup(g, random_field(g, rng), 2.6, 0.13)
    prop = sys.ctx.propagating_orders()
    assert len(prop) >= 3
    grads = {m: gradient_order(sys, sol, m) for m in prop}
    e = gradient_energy(sys, sol)
    for _ in range(3):
        de, dt = smooth_direction(g, rng)
        assert energy_from_orders(sol, grads, de, dt) == pytest.approx(e.directional(de, dt), rel=1e-6)


def test_order_single_cell_fd():
    g, f, _ = _inclusion_slab(64)
    d = np.zeros(g.shape)
    d[22, 37] = 1.0
    rep = fd_check(g, f, BlochContext(1.9, 0.2, m_max=g.default_m_max()), (d, None), ("order", -1))
    assert rep.rel_error <= 1e-3


# -- homogeneous components ----------------------------------------------------------------


def test_homogeneous_additivity_and_independence(rng):
    g = CellGeometry(0.0, 1.0, 32, 16)
    whole = Inclusion(Rect((0.0, 0.0), (2 * math.pi, 1.0)), 2.0, 1.0, 0)
    sys, sol = _setup(g, rasterize(g, (1.0, 1.0), [whole]), 1.5, 0.1)
    grad = gradient_energy(sys, sol)
    (_, de, dt), = gradient_homogeneous(grad, g, [whole])
    assert de == pytest.approx(grad.g_eps.sum() * g.cell_area, rel=1e-14)
    assert dt == pytest.approx(grad.g_tau.sum() * g.cell_area, rel=1e-14)
    incs = [Inclusion(Disk((1.5, 0.5), 0.3), 3.0, 0.8, 1), Inclusion(Rect((3.5, 0.2), (5.5, 0.7)), 2.0, 1.5, 2)]
    sys, sol = _setup(g, rasterize(g, (1.0, 1.0), incs), 1.5, 0.1)
    grad = gradient_energy(sys, sol)
    pair = gradient_homogeneous(grad, g, incs)
    for inc, single in zip(incs, pair):
        assert gradient_homogeneous(grad, g, [inc])[0] == single
    assert grad.per_inclusion  # stored on the result
    with pytest.raises(ValueError, match="no cell"):
        gradient_homogeneous(grad, g, [Inclusion(Disk((3.0, 0.5), 1e-3), 2.0, 1.0, 9)])


def test_homogeneous_fd():
    g = CellGeometry(0.0, 1.0, 32, 16)
    incs = [Inclusion(Disk((1.5, 0.5), 0.3), 3.0, 0.8, 1), Inclusion(Rect((3.5, 0.2), (5.5, 0.7)), 2.0, 1.5, 2)]
    f = rasterize(g, (1.0, 1.0), incs)
    ctx = BlochContext(1.5, 0.1, m_max=g.default_m_max())
    sys, sol = _setup(g, f, 1.5, 0.1)
    per = gradient_homogeneous(gradient_energy(sys, sol), g, incs)
    for inc, (_, de, dt) in zip(incs, per):
        mask = inclusion_mask(g, inc).astype(float)
        fd_e = central_difference(lambda t: _energy(g, perturb(f, mask, None, t), ctx), 1e-5)
        fd_t = central_difference(lambda t: _energy(g, perturb(f, None, mask, t), ctx), 1e-5)
        assert de == pytest.approx(fd_e, rel=1e-3)
        assert dt == pytest.approx(fd_t, rel=1e-3)


# -- boundary flow -------------------------------------------------------------------------


def _disk_benchmark(r, eps=3.0, tau=1.0, n=64, mode="fraction"):
    g = CellGeometry(-1.5, 1.5, n, n)
    bg = (1.0, 1.0)
    inc = Inclusion(Disk((math.pi, 0.0), r), eps, tau, 1)
    ctx = BlochContext(1.3, 0.1, m_max=min(g.default_m_max(), 10))
    sys = assemble(build_mesh(g, ctx.kappa), rasterize(g, bg, [inc], mode=mode), ctx)
    return sys, solve_scattering(sys), inc, bg


def test_boundary_gradient_trivial_zeros():
    sys, sol, inc, bg = _disk_benchmark(0.9, n=32)
    adj = solve_adjoint(sys, sol)
    phantom = Inclusion(inc.shape, bg[0], bg[1], 1)
    out = gradient_boundary(sys, sol, adj, phantom, bg)
    assert out.value == 0 and out.inside == 0 and out.outside == 0
    out = gradient_boundary(sys, sol, adj, inc, bg, velocity=0.0)
    assert out.value == 0 and out.inside == 0 and out.outside == 0
    out = gradient_boundary(sys, sol, adj, inc, bg, velocity=lambda th: 0 * th)
    assert out.value == 0


def test_boundary_gradient_errors():
    sys, sol, inc, bg = _disk_benchmark(0.9, n=32)
    adj = solve_adjoint(sys, sol)
    with pytest.raises(ValueError, match="inside"):
        gradient_boundary(sys, sol, adj, Inclusion(Disk((math.pi, 0.0), 1.45), 3.0, 1.0), bg)
    with pytest.raises(ValueError, match="16"):
        gradient_boundary(sys, sol, adj, inc, bg, n_samples=8)
    with pytest.raises(TypeError):
        gradient_boundary(sys, sol, adj, Inclusion(Rect((1, -1), (2, 1)), 3.0, 1.0), bg)


def test_boundary_gradient_radius_fd():
    r0, delta = 0.9, 5e-3
    sys, sol, inc, bg = _disk_benchmark(r0)
    out = gradient_boundary(sys, sol, solve_adjoint(sys, sol), inc, bg, n_samples=512)
    fd = (_disk_benchmark(r0 + delta)[1].energy_transmitted - _disk_benchmark(r0 - delta)[1].energy_transmitted) / (2 * delta)
    assert out.value == pytest.approx(fd, rel=5e-2)
    # eps-only contrast: all recombinations coincide
    assert out.inside == pytest.approx(out.value, rel=1e-12)
    assert out.outside == pytest.approx(out.value, rel=1e-12)


def test_boundary_gradient_velocity_linearity():
    sys, sol, inc, bg = _disk_benchmark(0.9, n=32)
    adj = solve_adjoint(sys, sol)
    one = gradient_boundary(sys, sol, adj, inc, bg)
    two = gradient_boundary(sys, sol, adj, inc, bg, velocity=2.0)
    assert two.value == pytest.approx(2 * one.value, rel=1e-14)
    # a rigid translation along x1 moves E by the x1-shift derivative
    shifted = gradient_boundary(sys, sol, adj, inc, bg, velocity=np.cos)
    assert np.isfinite(shifted.value)


# -- linearized field ----------------------------------------------------------------------


def test_linearized_zero_and_homogeneity(rng):
    g = CellGeometry(0.0, 1.0, 16, 12)
    sys, sol = _setup(g, random_field(g, rng), 1.8, 0.25)
    z = np.zeros(g.shape)
    assert not np.any(solve_linearized(sys, sol, z, z).u0)
    de, dt = smooth_direction(g, rng)
    a = solve_linearized(sys, sol, de, dt)
    b = solve_linearized(sys, sol, 3 * de, 3 * dt)
    assert np.allclose(b.u0, 3 * a.u0, atol=1e-12 * np.abs(a.u0).max())
    assert a.outgoing_residual <= 1e-8
    m = solve_linearized(sys, sol, de, dt, quadrature="midpoint")
    assert m.outgoing_residual <= 1e-8
    with pytest.raises(ValueError):
        solve_linearized(sys, sol, de, dt, quadrature="bogus")


def test_linearized_matches_energy_gradient(rng):
    g = CellGeometry(0.0, 1.0, 16, 12)
    sys, sol = _setup(g, random_field(g, rng), 1.8, 0.25)
    de, dt = smooth_direction(g, rng)
    lin = solve_linearized(sys, sol, de, dt)
    # dE = 2 tau0 sum eta Re(conj(b) db), with db from the linearized trace
    mesh, ctx = sys.mesh, sys.ctx
    from slabscat.sensitivity import energy_sensitivity_vector

    w = energy_sensitivity_vector(sys, sol)
    de_lin = 2 * (w @ lin.u0).real
    assert de_lin == pytest.approx(gradient_energy(sys, sol).directional(de, dt), rel=1e-10)
    assert mesh is sys.mesh and ctx is sys.ctx


def test_remainder_quadratic(rng):
    g = CellGeometry(-0.5, 0.5, 16, 16)
    f = random_field(g, rng)
    direction = relative_direction(f, *smooth_direction(g, rng))
    study = remainder_study(g, f, BlochContext(1.6, 0.2, m_max=7), *direction)
    assert study.field_exponent == pytest.approx(2.0, abs=0.1)
    assert study.energy_exponent == pytest.approx(2.0, abs=0.1)


def test_fd_check_field_first_order(rng):
    g = CellGeometry(-0.5, 0.5, 16, 16)
    rep = fd_check(g, random_field(g, rng), BlochContext(1.6, 0.2, m_max=7), smooth_direction(g, rng),
                   functional="field", steps=(1e-2, 5e-3, 2.5e-3))
    assert rep.fitted_order == pytest.approx(1.0, abs=0.1)


def test_h1_norm_constant():
    g = CellGeometry(0.0, 2.0, 8, 4)
    mesh = build_mesh(g, 0.0)
    assert h1_norm(mesh, np.ones(mesh.n_dofs)) == pytest.approx(math.sqrt(g.area), rel=1e-14)


# -- Lipschitz probe -----------------------------------------------------------------------


def test_lipschitz_probe(rng):
    g = CellGeometry(-0.5, 0.5, 16, 16)
    ctx = BlochContext(1.6, 0.2, m_max=7)
    base = random_field(g, rng, eps=(2.0, 3.0), tau=(1.0, 1.5))
    direction = smooth_direction(g, rng)
    delta = (rng.uniform(-1, 1, g.shape), rng.uniform(-0.5, 0.5, g.shape))
    same = lipschitz_probe(g, ctx, base, delta, direction, other=base)
    assert same.numerators == [0.0]
    rep = lipschitz_probe(g, ctx, base, delta, direction, distances=(0.4, 0.2, 0.1, 0.05, 0.025))
    assert max(rep.ratios) <= 2 * min(rep.ratios)
    assert rep.ratios[-1] <= 1.05 * rep.ratios[-2]
    other = perturb(base, *delta, 0.2)
    ab = lipschitz_probe(g, ctx, base, delta, direction, other=other)
    ba = lipschitz_probe(g, ctx, other, delta, direction, other=base)
    assert ab.numerators[0] == pytest.approx(ba.numerators[0], rel=1e-12)


# -- finite-difference helpers -------------------------------------------------------------


def test_richardson_polynomial():
    def f(h):
        return 1.5 + 0.7 * h * h - 2.0 * h**4

    steps = [0.1, 0.05, 0.025]
    assert richardson(steps, [f(h) for h in steps]) == pytest.approx(1.5, abs=1e-13)
    assert richardson([0.1], [f(0.1)]) == f(0.1)


def test_central_difference_and_order():
    assert central_difference(lambda t: t**3 + 2 * t, 1e-3) == pytest.approx(2.0, abs=1e-5)
    hs = [0.1, 0.05, 0.025]
    assert fitted_order(hs, [3 * h**2 for h in hs]) == pytest.approx(2.0, abs=1e-12)


def test_discrete_gradient_reuses_factorization(rng):
    g = CellGeometry(0.0, 1.0, 16, 8)
    sys, sol = _setup(g, random_field(g, rng), 1.4, 0.2, Incidence({0: 1.0, -1: 0.5}))
    a = gradient_energy(sys, sol, lu=Factorization(sys))
    b = gradient_energy(sys, sol)
    assert np.array_equal(a.g_eps, b.g_eps)
