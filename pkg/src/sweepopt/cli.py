"""Command-line front end: problem files in, CSV/JSON artifacts out.

Subcommands
-----------
simulate     integrate the catching-up scheme under given controls
optimize     transcribe and solve an instance near a reference arc
check-kkt    audit a solution against the discrete or continuous
             stationarity system and report per-condition residuals
benchmark    the closed-form RLC benchmark: per-mode optima, analytic
             arcs, cost curves and certificate residuals
reconstruct  discrete feasible quintuple tracking a reference arc
convergence  cost / distance table over a mesh ladder

Problem files are JSON; only linear fields, polyhedral (or registered)
moving sets and quadratic costs are declarable in files — smoother data
requires host-code registration via :func:`register_field` and
:func:`sweepopt.geometry.register_set`.  All numeric CSV output uses
``repr`` formatting, so files round-trip bitwise.  Runs are
deterministic for a fixed config; ``--seed`` is reserved for randomized
diagnostics and recorded in every report.

Exit codes: 0 success, 1 numerical failure, 2 usage error or unreadable
input.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import circuits
from .dynamics import (
    Controls,
    LinearField,
    LipschitzConstants,
    Mesh,
    ProblemSpec,
    QuadraticForm,
    QuadraticStageCost,
    QuadraticTerminal,
    ReferenceArc,
    Trajectory,
    controls_from_reference,
    feasibility_violation,
    reconstruct_discrete_feasible,
    simulate,
)
from .geometry import GeometryError, set_from_config
from .optimality import (
    CertificateError,
    assemble_discrete_certificate,
    benchmark_certificate,
)
from .transcribe import (
    BuildError,
    DiscreteProblem,
    SolveOptions,
    build,
    convergence_study,
    solve,
)

__all__ = [
    "RunConfig",
    "UsageError",
    "load_problem",
    "main",
    "parse_args",
    "register_field",
    "run",
]


class UsageError(ValueError):
    """Malformed input that argparse cannot catch (bad file content, names)."""


# ---------------------------------------------------------------------------
# Problem-file ingestion
# ---------------------------------------------------------------------------

_FIELD_REGISTRY: dict[str, Callable[[dict], object]] = {}


def register_field(name: str, factory: Callable[[dict], object]) -> None:
    """Register a host-code field factory usable from problem files.

    The factory receives the raw JSON mapping and must return an object
    with the field protocol (``value``, ``jac_state``, ``jac_ctrl``).
    """
    _FIELD_REGISTRY[name] = factory


def _form_from_config(cfg: dict) -> QuadraticForm:
    if "Q" not in cfg:
        raise UsageError("quadratic form needs a 'Q' matrix")
    Q = np.asarray(cfg["Q"], dtype=float)
    r = np.asarray(cfg["r"], dtype=float) if cfg.get("r") is not None else None
    return QuadraticForm(Q=Q, r=r, const=float(cfg.get("const", 0.0)))


def _field_from_config(cfg: dict, n: int):
    kind = cfg.get("kind", "linear")
    if kind in ("linear", "affine"):
        state = np.asarray(cfg.get("state", np.zeros((n, n))), dtype=float)
        ctrl = np.asarray(cfg["ctrl"], dtype=float) if "ctrl" in cfg else np.zeros((n, 0))
        if ctrl.ndim == 1:
            ctrl = ctrl.reshape(n, -1)
        offset = np.asarray(cfg["offset"], dtype=float) if "offset" in cfg else None
        return LinearField(A_ctrl=ctrl, A_state=state, offset=offset)
    if kind == "registered":
        name = cfg.get("name")
        if name not in _FIELD_REGISTRY:
            raise UsageError(f"no registered field named {name!r}")
        return _FIELD_REGISTRY[name](cfg)
    raise UsageError(f"unknown field kind {kind!r} (use linear, affine or registered)")


def _ctrl_dim(fld) -> int:
    if isinstance(fld, LinearField):
        return fld.A_ctrl.shape[1]
    return int(getattr(fld, "ctrl_dim"))


def load_problem(path: str) -> ProblemSpec:
    """Build a :class:`ProblemSpec` from its JSON description.

    Schema::

        {"set": {...}, "x0": [...], "T": 1.0,
         "f1": {"kind": "linear", "state": ..., "ctrl": ..., "offset": ...},
         "f2": {...},
         "costs": {"terminal": {"Q","r","const"},
                   "velocity": {"u"|"a"|"b": {"Q","r","const"}},
                   "stage": {"x"|"y"|"u"|"a"|"b"|"xdot": {...}}},
         "free_channels": ["u","a","b"], "lipschitz": {...}, "label": ...}
    """
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read problem file {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"problem file {path!r} is not valid JSON: {exc}") from exc
    try:
        x0 = np.asarray(data["x0"], dtype=float)
        n = x0.size
        mset = set_from_config(data["set"])
        f1 = _field_from_config(data.get("f1", {}), n)
        f2 = _field_from_config(data.get("f2", {}), n)
        costs = data.get("costs", {})
        terminal = (_terminal_from_config(costs["terminal"])
                    if "terminal" in costs else None)
        stage = None
        if "stage" in costs:
            stage = QuadraticStageCost(
                forms={ch: _form_from_config(c) for ch, c in costs["stage"].items()})
        velocity = costs.get("velocity", {})
        vel_forms = {ch: _form_from_config(velocity[ch]) if ch in velocity else None
                     for ch in ("u", "a", "b")}
        lip = LipschitzConstants(**data.get("lipschitz", {}))
        free = frozenset(data.get("free_channels", ["u", "a", "b"]))
        bad = free - {"u", "a", "b"}
        if bad:
            raise UsageError(f"free_channels contains unknown names {sorted(bad)}")
        return ProblemSpec(
            set=mset, n=n, m=_ctrl_dim(f1), d=_ctrl_dim(f2), f1=f1, f2=f2,
            horizon=float(data["T"]), x0=x0, lipschitz=lip,
            terminal_cost=terminal, stage_cost=stage,
            cost_u=vel_forms["u"], cost_a=vel_forms["a"], cost_b=vel_forms["b"],
            free_channels=free, label=str(data.get("label", "problem")))
    except KeyError as exc:
        raise UsageError(f"problem file {path!r} misses required key {exc}") from exc


def _terminal_from_config(cfg: dict) -> QuadraticTerminal:
    Q = np.asarray(cfg["Q"], dtype=float)
    r = np.asarray(cfg["r"], dtype=float) if cfg.get("r") is not None else None
    return QuadraticTerminal(Q=Q, r=r, const=float(cfg.get("const", 0.0)))


def _default_voltage_source() -> ProblemSpec:
    return circuits.voltage_source_instance(circuits.benchmark_params())


def _default_current_source() -> ProblemSpec:
    params = circuits.CircuitParams(resistances=(0.5, 0.25),
                                    inductances=(1.0, 2.0),
                                    capacitances=(1.0, 1.0))
    return circuits.current_source_instance(
        params, lambda t: np.ones_like(np.asarray(t, dtype=float)))


_BUILTIN_SPECS = {
    "builtin:benchmark": circuits.benchmark_instance,
    "builtin:voltage-source": _default_voltage_source,
    "builtin:current-source": _default_current_source,
}


def _resolve_spec(value: str) -> ProblemSpec:
    if value.startswith("builtin:"):
        if value not in _BUILTIN_SPECS:
            raise UsageError(f"unknown builtin problem {value!r}; "
                             f"choose from {sorted(_BUILTIN_SPECS)}")
        return _BUILTIN_SPECS[value]()
    return load_problem(value)


def _resolve_reference(value: str) -> ReferenceArc:
    """A reference arc: builtin:benchmark-mode-{i,ii,iii} or a trajectory CSV."""
    if value.startswith("builtin:"):
        name = value[len("builtin:"):]
        if not name.startswith("benchmark-mode-"):
            raise UsageError(f"unknown builtin reference {value!r}; expected "
                             "builtin:benchmark-mode-{i,ii,iii}")
        case = name[len("benchmark-mode-"):]
        if case not in circuits.MODES:
            raise UsageError(f"unknown benchmark mode {case!r}; choose from "
                             f"{list(circuits.MODES)}")
        v2, _ = circuits.benchmark_optimize_mode(case)
        return circuits.benchmark_candidate(case, v2).arc
    try:
        traj = Trajectory.from_csv(value)
    except OSError as exc:
        raise UsageError(f"cannot read reference CSV {value!r}: {exc}") from exc
    return ReferenceArc.from_trajectory(traj)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Validated invocation: subcommand plus the common and extra flags."""

    subcommand: str
    spec: str | None = None
    k: int | None = None
    epsilon: float | None = None
    tol: float = 1e-8
    out: str = "."
    seed: int = 0
    extras: dict = field(default_factory=dict)


def _add_common(sub: argparse.ArgumentParser, spec_required: bool = True) -> None:
    sub.add_argument("--spec", required=spec_required,
                     help="problem JSON file or builtin:{benchmark,voltage-source,"
                          "current-source}")
    sub.add_argument("--k", type=int, help="number of mesh intervals")
    sub.add_argument("--epsilon", type=float,
                     help="localization radius around the reference "
                          "(default: 10%% of the reference magnitude)")
    sub.add_argument("--tol", type=float, default=1e-8,
                     help="solver / certificate tolerance (default 1e-8)")
    sub.add_argument("--out", default=".", help="output directory (default: cwd)")
    sub.add_argument("--seed", type=int, default=0,
                     help="seed recorded in reports; reserved for randomized "
                          "diagnostics")


def parse_args(argv) -> RunConfig:
    """Parse and validate ``argv`` (no program name) into a RunConfig.

    Invalid usage terminates with exit code 2 via argparse.
    """
    parser = argparse.ArgumentParser(
        prog="sweepopt",
        description="Optimal control of state-constrained sweeping processes "
                    "with integral memory.")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("simulate", help="integrate the catching-up scheme")
    _add_common(p)
    p.add_argument("--reference",
                   help="controls source: trajectory CSV or builtin reference "
                        "(default: zero controls)")

    p = subs.add_parser("optimize", help="transcribe and solve near a reference")
    _add_common(p)
    p.add_argument("--reference", required=True,
                   help="trajectory CSV or builtin:benchmark-mode-{i,ii,iii}")
    p.add_argument("--gradient", choices=("forward", "central", "adjoint"),
                   default="adjoint")
    p.add_argument("--polish", choices=("none", "cg", "descent"), default="none")
    p.add_argument("--maxiter", type=int, default=1000)

    p = subs.add_parser("check-kkt", help="audit stationarity of a solution")
    _add_common(p, spec_required=False)
    p.add_argument("--mode", choices=("discrete", "continuous"), required=True)
    p.add_argument("--solution", help="trajectory CSV (required in discrete mode)")
    p.add_argument("--reference",
                   help="reference arc; discrete default: the solution itself. "
                        "Continuous mode requires builtin:benchmark-mode-{i,ii,iii}")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="cost multiplier of the certificate (default 1)")

    p = subs.add_parser("benchmark",
                        help="closed-form RLC benchmark: optima, arcs, cost curves")
    p.add_argument("--case", choices=(*circuits.MODES, "all"), default="all")
    p.add_argument("--grid-points", type=int, default=2001,
                   help="sampling nodes for the analytic arcs (default 2001)")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", default=".")
    p.add_argument("--seed", type=int, default=0)

    p = subs.add_parser("reconstruct",
                        help="discrete feasible quintuple tracking a reference")
    _add_common(p)
    p.add_argument("--reference", required=True)

    p = subs.add_parser("convergence", help="cost / distance table over a mesh ladder")
    _add_common(p)
    p.add_argument("--reference", required=True)
    p.add_argument("--ks", required=True,
                   help="comma-separated strictly increasing interval counts")
    p.add_argument("--gradient", choices=("forward", "central", "adjoint"),
                   default="adjoint")
    p.add_argument("--polish", choices=("none", "cg", "descent"), default="none")
    p.add_argument("--maxiter", type=int, default=1000)

    ns = parser.parse_args(argv)

    if ns.subcommand != "benchmark":
        if ns.k is not None and ns.k < 1:
            parser.error("--k must be at least 1")
        if ns.epsilon is not None and ns.epsilon <= 0:
            parser.error("--epsilon must be positive")
        spec = getattr(ns, "spec", None)
        if spec and not spec.startswith("builtin:") and not os.access(spec, os.R_OK):
            parser.error(f"cannot read problem file {spec!r}")
    if ns.tol <= 0:
        parser.error("--tol must be positive")
    if ns.seed < 0:
        parser.error("--seed must be nonnegative")
    try:
        os.makedirs(ns.out, exist_ok=True)
    except OSError as exc:
        parser.error(f"cannot create output directory {ns.out!r}: {exc}")
    if not os.access(ns.out, os.W_OK):
        parser.error(f"output directory {ns.out!r} is not writable")

    known = {"subcommand", "spec", "k", "epsilon", "tol", "out", "seed"}
    extras = {key: val for key, val in vars(ns).items() if key not in known}
    return RunConfig(subcommand=ns.subcommand, spec=getattr(ns, "spec", None),
                     k=ns.k if ns.subcommand != "benchmark" else None,
                     epsilon=getattr(ns, "epsilon", None), tol=ns.tol,
                     out=ns.out, seed=ns.seed, extras=extras)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _residual_table(residuals: dict, tol: float) -> dict:
    table = {}
    for name, value in residuals.items():
        ok = value > tol if name == "nontriviality" else value <= tol
        table[name] = {"residual": float(value), "pass": bool(ok)}
    return table


def _solve_options(cfg: RunConfig) -> SolveOptions:
    polish = cfg.extras.get("polish", "none")
    return SolveOptions(gradient=cfg.extras.get("gradient", "adjoint"),
                        gtol=cfg.tol, maxiter=cfg.extras.get("maxiter", 1000),
                        polish=None if polish == "none" else polish)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _run_simulate(cfg: RunConfig) -> int:
    spec = _resolve_spec(cfg.spec)
    if cfg.k is None:
        raise UsageError("simulate requires --k")
    mesh = Mesh.uniform(spec.horizon, cfg.k)
    ref_name = cfg.extras.get("reference")
    if ref_name:
        controls = controls_from_reference(spec, mesh, _resolve_reference(ref_name))
    else:
        kp1 = cfg.k + 1
        controls = Controls(mesh=mesh, u=np.zeros((kp1, spec.n)),
                            a=np.zeros((kp1, spec.m)), b=np.zeros((kp1, spec.d)))
    traj, bounds = simulate(spec, controls)
    traj.to_csv(os.path.join(cfg.out, "trajectory.csv"))
    report = {
        "subcommand": "simulate", "seed": cfg.seed, "k": cfg.k,
        "horizon": spec.horizon, "label": spec.label,
        "feasibility_violation": feasibility_violation(spec, traj),
        "terminal_state": [float(v) for v in traj.x[-1]],
        "bounds": bounds.to_dict(),
    }
    _write_json(os.path.join(cfg.out, "report.json"), report)
    print(f"simulate: k={cfg.k} wrote trajectory.csv, report.json to {cfg.out}")
    return 0


def _run_optimize(cfg: RunConfig) -> int:
    spec = _resolve_spec(cfg.spec)
    if cfg.k is None:
        raise UsageError("optimize requires --k")
    reference = _resolve_reference(cfg.extras["reference"])
    problem = build(spec, reference, cfg.k, cfg.epsilon)
    report = solve(problem, _solve_options(cfg))
    report.solution.to_csv(os.path.join(cfg.out, "solution.csv"))
    payload = report.to_dict()
    payload.update({"subcommand": "optimize", "seed": cfg.seed, "k": cfg.k,
                    "epsilon": cfg.epsilon, "gtol": cfg.tol, "label": spec.label})
    _write_json(os.path.join(cfg.out, "report.json"), payload)
    print(f"optimize: k={cfg.k} cost={report.cost:.12g} "
          f"|g|={report.gradient_norm:.3g} success={report.success}")
    return 0 if report.success else 1


def _run_check_kkt(cfg: RunConfig) -> int:
    mode = cfg.extras["mode"]
    tol = cfg.tol
    if mode == "discrete":
        if not cfg.extras.get("solution"):
            raise UsageError("check-kkt --mode discrete requires --solution")
        if not cfg.spec:
            raise UsageError("check-kkt --mode discrete requires --spec")
        spec = _resolve_spec(cfg.spec)
        try:
            traj = Trajectory.from_csv(cfg.extras["solution"])
        except OSError as exc:
            raise UsageError(f"cannot read solution CSV: {exc}") from exc
        ref_name = cfg.extras.get("reference")
        reference = (_resolve_reference(ref_name) if ref_name
                     else ReferenceArc.from_trajectory(traj))
        carrier = DiscreteProblem(spec, traj.mesh, reference, math.inf, {},
                                  {c: traj.channel(c) for c in ("u", "a", "b")})
        cert = assemble_discrete_certificate(carrier, traj, lam=cfg.extras["lam"])
        payload = {
            "subcommand": "check-kkt", "mode": "discrete", "seed": cfg.seed,
            "lambda": cert.lam, "tol": tol,
            "max_residual": cert.max_residual,
            "nontriviality": cert.nontriviality,
            "satisfied": cert.satisfied(tol),
            "sigma_ambiguous": cert.sigma_ambiguous,
            "infeasible_at_terminal": cert.infeasible_at_terminal,
            "residuals": _residual_table(cert.residuals, tol),
        }
        satisfied = cert.satisfied(tol)
    else:
        ref_name = cfg.extras.get("reference") or ""
        if "benchmark-mode-" not in ref_name:
            raise UsageError("check-kkt --mode continuous requires "
                             "--reference builtin:benchmark-mode-{i,ii,iii}")
        case = ref_name.rsplit("-", 1)[-1]
        num_nodes = (cfg.k + 1) if cfg.k else 2001
        cert, cand = benchmark_certificate(case, num_nodes=num_nodes)
        payload = {
            "subcommand": "check-kkt", "mode": "continuous", "seed": cfg.seed,
            "case": case, "lambda": cert.lam, "tol": tol,
            "grid_nodes": num_nodes,
            "v2": cand.v2, "cost": cand.cost,
            "max_residual": cert.max_residual,
            "nontriviality": cert.nontriviality,
            "satisfied": cert.satisfied(tol),
            "residuals": _residual_table(cert.residuals, tol),
        }
        solution = cfg.extras.get("solution")
        if solution:
            traj = Trajectory.from_csv(solution)
            sampled = cand.arc.sample(traj.mesh)
            gap = max(float(np.abs(traj.channel(c) - sampled.channel(c)).max(initial=0.0))
                      for c in ("x", "y", "u", "a", "b"))
            payload["solution_sup_gap"] = gap
        satisfied = cert.satisfied(tol)
    _write_json(os.path.join(cfg.out, "report.json"), payload)
    print(f"check-kkt[{mode}]: max residual {payload['max_residual']:.3e}, "
          f"satisfied={satisfied} (tol {tol:g})")
    return 0 if satisfied else 1


def _run_benchmark(cfg: RunConfig) -> int:
    cases = list(circuits.MODES) if cfg.extras["case"] == "all" else [cfg.extras["case"]]
    nodes = cfg.extras["grid_points"]
    if nodes < 2:
        raise UsageError("--grid-points must be at least 2")
    summary: dict = {"subcommand": "benchmark", "seed": cfg.seed, "tol": cfg.tol,
                     "cases": {}}
    mesh = Mesh.uniform(1.0, nodes - 1)
    v2_grid = np.linspace(-1.5, 3.5, 201)
    for case in cases:
        v2, cost = circuits.benchmark_optimize_mode(case)
        cert, cand = benchmark_certificate(case, v2=v2, num_nodes=nodes)
        cand.arc.sample(mesh).to_csv(os.path.join(cfg.out, f"analytic-{case}.csv"))
        curve_path = os.path.join(cfg.out, f"cost-curve-{case}.csv")
        with open(curve_path, "w") as fh:
            fh.write("v2,cost\n")
            for v in v2_grid:
                cost_v = circuits.benchmark_candidate(case, float(v)).cost
                fh.write(f"{float(v)!r},{float(cost_v)!r}\n")
        summary["cases"][case] = {
            "mode_constant": (circuits.mode_constant(case)
                              if case in ("i", "ii") else None),
            "v1": cand.v1, "v2": cand.v2, "cost": cand.cost,
            "certificate": {
                "max_residual": cert.max_residual,
                "nontriviality": cert.nontriviality,
                "satisfied": cert.satisfied(cfg.tol),
            },
        }
        print(f"benchmark[{case}]: v2={v2:.10f} cost={cost:.10f} "
              f"certificate residual {cert.max_residual:.3e}")
    best_case = circuits.benchmark_best_mode()
    best_v2, best_cost = circuits.benchmark_optimize_mode(best_case)
    summary["best"] = {"case": best_case, "v2": best_v2, "cost": best_cost}
    _write_json(os.path.join(cfg.out, "summary.json"), summary)
    return 0


def _run_reconstruct(cfg: RunConfig) -> int:
    spec = _resolve_spec(cfg.spec)
    if cfg.k is None:
        raise UsageError("reconstruct requires --k")
    reference = _resolve_reference(cfg.extras["reference"])
    recon = reconstruct_discrete_feasible(spec, reference, cfg.k)
    recon.trajectory.to_csv(os.path.join(cfg.out, "trajectory.csv"))
    dist = recon.distance_to_reference
    payload = {"subcommand": "reconstruct", "seed": cfg.seed, "k": cfg.k,
               "label": spec.label, "sup_norm": dist.sup_norm,
               "l2_derivative": dist.l2_derivative,
               "feasibility_violation": feasibility_violation(spec, recon.trajectory)}
    _write_json(os.path.join(cfg.out, "report.json"), payload)
    print(f"reconstruct: k={cfg.k} sup distance {dist.sup_norm:.3e}, "
          f"derivative distance {dist.l2_derivative:.3e}")
    return 0


def _run_convergence(cfg: RunConfig) -> int:
    spec = _resolve_spec(cfg.spec)
    reference = _resolve_reference(cfg.extras["reference"])
    try:
        ks = [int(part) for part in cfg.extras["ks"].split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"--ks must be comma-separated integers: {exc}") from exc
    if not ks:
        raise UsageError("--ks is empty")
    if any(k < 1 for k in ks):
        raise UsageError("--ks entries must be at least 1")
    study = convergence_study(spec, reference, ks, cfg.epsilon, _solve_options(cfg))
    study.to_csv(os.path.join(cfg.out, "convergence.csv"))
    statuses = [row["status"] for row in study.rows]
    for row in study.rows:
        print(f"convergence: k={row['k']:>5} cost={row['cost']:.12g} "
              f"sup={row['w12_sup']:.4e} status={row['status']}")
    return 0 if all(s == "ok" for s in statuses) else 1


_HANDLERS = {
    "simulate": _run_simulate,
    "optimize": _run_optimize,
    "check-kkt": _run_check_kkt,
    "benchmark": _run_benchmark,
    "reconstruct": _run_reconstruct,
    "convergence": _run_convergence,
}


def run(config: RunConfig) -> int:
    """Dispatch a validated config; returns the process exit code."""
    try:
        return _HANDLERS[config.subcommand](config)
    except UsageError as exc:
        print(f"sweepopt {config.subcommand}: {exc}", file=sys.stderr)
        return 2
    except (BuildError, CertificateError, GeometryError, FloatingPointError,
            ValueError) as exc:
        print(f"sweepopt {config.subcommand}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    return run(parse_args(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
