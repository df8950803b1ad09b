"""Batch command-line front end: ``slabscat <subcommand> --config run.json``.

Exit status is 0 on success, 2 when a solve or certificate is refused
(resonance, empty non-resonant interval) and 1 on any other error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .assembly import assemble, build_mesh
from .config import ConfigError, RunConfig, parse_config
from .modes import ModeProblem, Refusal, check_nonresonance, compute_modes, find_certificate
from .optimize import DesignProblem, Maximize, MatchSpectrum, Minimize, OptimizationAborted, run as run_design
from .scatter import Factorization, ResonanceError, solve_scattering, sweep
from .sensitivity import (
    fd_check,
    gradient_energy,
    gradient_homogeneous,
    gradient_order,
    h1_norm,
    solve_linearized,
)
from .structure import write_raster

EXIT_OK, EXIT_ERROR, EXIT_REFUSED = 0, 1, 2
SCHEMA = 1
SWEEP_COLUMNS = ["omega", "kappa", "incident_flux", "reflected_flux", "transmitted_flux", "balance_defect", "residual"]


def fmt(x) -> str:
    """Fixed 17-significant-digit formatting (round-trips doubles, byte-stable)."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path: Path, header: str, columns: list[str] | None, rows) -> None:
    lines = [header]
    if columns:
        lines.append(",".join(columns))
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _tag(kind: str) -> str:
    return f"# slabscat-{kind} schema={SCHEMA}"


class Run:
    """Shared state for one invocation: config, output directory, provenance."""

    def __init__(self, args, config: RunConfig, config_path: Path):
        self.args = args
        self.config = config
        self.base_dir = config_path.parent
        self.out = Path(args.out or config.output.directory)
        if not self.out.is_absolute() and args.out is None:
            self.out = self.base_dir / self.out
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = args.seed if args.seed is not None else config.seed
        env = os.environ.get("SLABSCAT_THREADS")
        self.threads = args.threads or (int(env) if env else config.solver.threads)
        if self.threads < 1:
            raise ConfigError([f"threads must be >= 1, got {self.threads}"])
        self.per_order = args.orders or config.output.per_order
        self.geom = config.cell()
        self.field = config.coefficient_field(self.base_dir)
        self.incidence = config.incidence.build()
        self.balance_defects: list[float] = []
        self.extra: dict = {}
        self.config_hash = hashlib.sha256(config_path.read_bytes()).hexdigest()

    def single_point(self) -> tuple[float, float]:
        b = self.config.bloch
        omegas, kappas = b.omegas(), b.kappas()
        if len(omegas) != 1 or len(kappas) != 1:
            raise ConfigError([f"{self.args.command}: needs a single (omega, kappa), not a sweep"])
        return omegas[0], kappas[0]

    def system(self, omega: float, kappa: float, field_=None):
        ctx = self.config.context(omega, kappa)
        sys_ = assemble(build_mesh(self.geom, ctx.kappa), field_ or self.field, ctx)
        lu = Factorization(sys_)
        sol = solve_scattering(sys_, self.incidence, lu=lu, tol=self.config.solver.residual_tol,
                               condition=self.config.solver.condition)
        self.balance_defects.append(sol.balance_defect)
        return sys_, sol, lu

    def direction(self):
        s = self.config.sensitivity
        rng = np.random.default_rng(self.seed)
        shape = self.geom.shape
        if s.direction == "random":
            d_eps, d_tau = rng.uniform(-1.0, 1.0, shape), rng.uniform(-1.0, 1.0, shape)
        else:
            d_eps, d_tau = np.ones(shape), np.ones(shape)
        return (d_eps if "eps" in s.components else np.zeros(shape),
                d_tau if "tau" in s.components else np.zeros(shape))

    def provenance(self, status: int, wall: float, error: str | None) -> dict:
        versions = {"slabscat": __version__, "python": platform.python_version(), "numpy": np.__version__,
                    "scipy": scipy.__version__}
        for pkg in ("shapely", "pydantic"):
            try:
                versions[pkg] = metadata.version(pkg)
            except metadata.PackageNotFoundError:  # pragma: no cover
                pass
        d = self.balance_defects
        return {
            "tool": "slabscat",
            "schema": SCHEMA,
            "subcommand": self.args.command,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "threads": self.threads,
            "versions": versions,
            "wall_time_s": wall,
            "exit_status": status,
            "error": error,
            "balance_defects": {"count": len(d), "max_abs": max((abs(x) for x in d), default=0.0)},
            **self.extra,
        }


# -- subcommands ---------------------------------------------------------------------------


def _sweep_rows(run: Run, points):
    m_max = run.config.m_max()
    cols = list(SWEEP_COLUMNS)
    if run.per_order:
        for m in range(-m_max, m_max + 1):
            cols += [f"a_{m}_re", f"a_{m}_im", f"b_{m}_re", f"b_{m}_im"]
    rows = []
    for omega, kappa, sol in points:
        run.balance_defects.append(sol.balance_defect)
        row = [omega, kappa, sol.incident_flux, sol.energy_reflected, sol.energy_transmitted, sol.balance_defect,
               sol.residual]
        if run.per_order:
            for a, b in zip(sol.a, sol.b):
                row += [a.real, a.imag, b.real, b.imag]
        rows.append(row)
    return cols, rows


def cmd_solve(run: Run) -> int:
    omega, kappa = run.single_point()
    _, sol, _ = run.system(omega, kappa)
    run.balance_defects.clear()
    cols, rows = _sweep_rows(run, [(omega, sol.ctx.kappa, sol)])
    write_csv(run.out / "solve.csv", _tag("sweep"), cols, rows)
    run.extra["transmittance"] = sol.transmittance
    if sol.condition is not None:
        run.extra["condition_estimate"] = sol.condition
    return EXIT_OK


def cmd_sweep(run: Run) -> int:
    b = run.config.bloch
    base = run.config.context(b.omegas()[0], b.kappas()[0])
    rows = sweep(run.geom, run.field, base, b.omegas(), b.kappas(), run.incidence, threads=run.threads,
                 tol=run.config.solver.residual_tol)
    failed = [r for r in rows if r.error is not None]
    cols, out = _sweep_rows(run, [(r.omega, r.kappa, r.solution) for r in rows if r.error is None])
    write_csv(run.out / "sweep.csv", _tag("sweep"), cols, out)
    if failed:
        run.extra["failed_points"] = [{"omega": r.omega, "kappa": r.kappa, "error": r.error} for r in failed]
        return EXIT_REFUSED
    return EXIT_OK


def cmd_grad(run: Run) -> int:
    omega, kappa = run.single_point()
    sys_, sol, lu = run.system(omega, kappa)
    res = gradient_energy(sys_, sol, method=run.config.sensitivity.method, lu=lu)
    g = run.geom
    rows = [(i, j, res.g_eps[j, i], res.g_tau[j, i]) for j in range(g.nz) for i in range(g.nx)]
    write_csv(run.out / "grad.csv", f"# slabscat-grad nx={g.nx} nz={g.nz}", None, rows)
    inclusions = [i.build() for i in run.config.structure.inclusions]
    if inclusions:
        per = gradient_homogeneous(res, g, inclusions)
        write_csv(run.out / "grad_inclusions.csv", _tag("grad-inclusions"), ["id", "dE_deps", "dE_dtau"], per)
    if run.config.sensitivity.per_order:
        rows = []
        for m in run.config.sensitivity.per_order:
            og = gradient_order(sys_, sol, m)
            rows += [(m, i, j, og.g_eps[j, i].real, og.g_eps[j, i].imag, og.g_tau[j, i].real, og.g_tau[j, i].imag)
                     for j in range(g.nz) for i in range(g.nx)]
        write_csv(run.out / "grad_orders.csv", _tag("grad-orders"),
                  ["m", "i", "j", "g_eps_re", "g_eps_im", "g_tau_re", "g_tau_im"], rows)
    run.extra["energy"] = res.energy
    return EXIT_OK


def cmd_linearize(run: Run) -> int:
    omega, kappa = run.single_point()
    sys_, sol, lu = run.system(omega, kappa)
    d_eps, d_tau = run.direction()
    lin = solve_linearized(sys_, sol, d_eps, d_tau, lu=lu)
    g = run.geom
    rows = [(i, j, lin.u0[j * g.nx + i].real, lin.u0[j * g.nx + i].imag) for j in range(g.nz + 1) for i in range(g.nx)]
    write_csv(run.out / "linearize.csv", _tag("linearize"), ["i", "j", "u0_re", "u0_im"], rows)
    run.extra["linearized"] = {"h1_norm": h1_norm(sys_.mesh, lin.u0), "outgoing_residual": lin.outgoing_residual}
    return EXIT_OK


def cmd_modes(run: Run) -> int:
    b, mc = run.config.bloch, run.config.modes
    kappas = b.kappas()
    dispersion = run.config.bloch.kappa_sweep is not None
    rows = []
    for kappa in kappas:
        problem = ModeProblem(run.geom, run.field, kappa, run.config.exterior.eps0, run.config.exterior.tau0,
                              run.config.m_max())
        seq = compute_modes(problem, mc.n_modes, mc.omega_cap, mc.guided_tol, threads=run.threads)
        for j, w, guided, trace in zip(seq.indices, seq.omegas, seq.guided_flags, seq.max_prop_trace):
            rows.append(([seq.kappa] if dispersion else []) + [j, w, guided, trace])
    cols = (["kappa"] if dispersion else []) + ["j", "omega_j", "guided", "max_prop_trace"]
    write_csv(run.out / "modes.csv", _tag("modes"), cols, rows)
    return EXIT_OK


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_certify(run: Run) -> int:
    c = run.config.certify
    if c is None:
        raise ConfigError(["certify: missing 'certify' block"])
    omegas = run.config.bloch.omegas()
    rng = c.omega_range or (min(omegas), max(omegas))
    env = c.envelope.build(run.geom)
    kappa = run.config.bloch.kappas()[0]
    ext = run.config.exterior
    try:
        if c.j is not None:
            cert = check_nonresonance(run.geom, env, rng, c.j, kappa, ext.eps0, ext.tau0, run.config.m_max())
        else:
            cert = find_certificate(run.geom, env, rng, kappa, ext.eps0, ext.tau0, run.config.m_max())
    except Refusal as exc:
        _write_json(run.out / "certificate.json",
                    {"certified": False, "reason": str(exc), "lower": exc.lower, "upper": exc.upper})
        print(f"refused: {exc} (endpoints {exc.lower!r}, {exc.upper!r})", file=sys.stderr)
        return EXIT_REFUSED
    _write_json(run.out / "certificate.json", {
        "certified": True, "j": cert.j, "omega_j_soft": cert.omega_j_soft, "omega_next_stiff": cert.omega_next_stiff,
        "lower": cert.lower, "upper": cert.upper, "kappa": kappa})
    return EXIT_OK


def cmd_optimize(run: Run) -> int:
    d = run.config.design
    if d is None:
        raise ConfigError(["optimize: missing 'design' block"])
    g = run.geom
    if d.region is None:
        region = np.ones(g.shape, bool)
    else:
        x, z = g.cell_centers()
        region = (x >= d.region.lo[0]) & (x <= d.region.hi[0]) & (z >= d.region.lo[1]) & (z <= d.region.hi[1])
    objective = {"maximize": Maximize(), "minimize": Minimize()}.get(d.objective)
    if objective is None:
        objective = MatchSpectrum(tuple(d.targets), tuple(d.weights) if d.weights else None)
    ext = run.config.exterior
    problem = DesignProblem(
        objective, region, d.envelope.build(g), run.config.bloch.omegas(), run.config.bloch.kappas()[0],
        ext.eps0, ext.tau0, run.config.m_max(), run.incidence, d.step, d.max_iters, d.tolerance, d.optimize_tau,
        d.certify, run.threads,
    )
    try:
        result = run_design(problem, g, run.field)
    except OptimizationAborted as exc:
        write_raster(run.out / "aborted_eps.csv", exc.iterate.eps, "eps")
        write_raster(run.out / "aborted_tau.csv", exc.iterate.tau, "tau")
        raise
    rows = [(h.iter, h.objective, h.step, h.grad_norm, h.balance_defect_max) for h in result.history]
    run.balance_defects.extend(h.balance_defect_max for h in result.history)
    write_csv(run.out / "history.csv", _tag("history"), ["iter", "objective", "step", "grad_norm", "balance_defect_max"],
              rows)
    write_raster(run.out / "design_eps.csv", result.final.eps, "eps")
    write_raster(run.out / "design_tau.csv", result.final.tau, "tau")
    run.extra["optimize"] = {"reason": result.reason, "iterations": len(result.history) - 1}
    return EXIT_OK


def cmd_fdcheck(run: Run) -> int:
    omega, kappa = run.single_point()
    s = run.config.sensitivity
    ctx = run.config.context(omega, kappa)
    functional = ("order", s.order) if s.functional == "order" else s.functional
    report = fd_check(run.geom, run.field, ctx, run.direction(), functional, s.steps, run.incidence, method=s.method)
    _write_json(run.out / "fdcheck.json", report.to_json())
    run.extra["fd_rel_error"] = report.rel_error
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "grad": cmd_grad,
    "linearize": cmd_linearize,
    "modes": cmd_modes,
    "certify": cmd_certify,
    "optimize": cmd_optimize,
    "fdcheck": cmd_fdcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slabscat", description="Periodic slab scattering, sensitivities and modes.")
    parser.add_argument("--version", action="version", version=f"slabscat {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--orders", action="store_true", help="add per-order amplitude columns")
        p.add_argument("--threads", type=int, default=None, help="worker threads (fallback: SLABSCAT_THREADS)")
        p.add_argument("--seed", type=int, default=None, help="seed for random directions (overrides config)")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    config_path = Path(args.config)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            config = parse_config(config_path)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        run = Run(args, config, config_path)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    status, error = EXIT_OK, None
    try:
        status = COMMANDS[args.command](run)
    except (ResonanceError, Refusal) as exc:
        status, error = EXIT_REFUSED, str(exc)
        print(f"refused: {exc}", file=sys.stderr)
    except Exception as exc:  # noqa: BLE001 - report and map to exit status 1
        status, error = EXIT_ERROR, f"{type(exc).__name__}: {exc}"
        print(f"error: {error}", file=sys.stderr)
    _write_json(run.out / "run.json", run.provenance(status, time.perf_counter() - start, error))
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
