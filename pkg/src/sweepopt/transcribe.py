"""Reduced-space transcription of the discrete sweeping control problems.

The discrete problem over a k-interval mesh keeps only the slopes of the
free control channels as decision variables; states follow from the
catching-up recursion, so the discrete dynamics and the memory recursion
hold by construction.  The cost is the discretized objective plus the five
proximity integrals anchoring each channel's slopes to the reference
derivative; node localization and the energy budget are enforced by an
augmented Lagrangian outer loop with multiplier updates and a geometric
penalty schedule.

Gradients come in three flavours: forward differences (default), central
differences, and an adjoint sweep through the recursion that is exact up
to roundoff wherever the projection's active set is locally constant.
The adjoint mode is what makes tight certificate tolerances reachable.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .dynamics import (
    Mesh,
    ProblemSpec,
    ReferenceArc,
    Trajectory,
    reconstruct_discrete_feasible,
    w12_distance,
)
from .geometry import default_active_tol, project

__all__ = [
    "BuildError",
    "DiscreteProblem",
    "SolveOptions",
    "SolveReport",
    "build",
    "solve",
    "convergence_study",
    "ConvergenceStudy",
]

_CTRL = ("u", "a", "b")
_ZCH = ("x", "y", "u", "a", "b")

# Gauss-Legendre nodes/weights on [0, 1]; degree-9 exactness is far beyond
# what the smooth reference derivatives need.
_G5_X = 0.5 * (1.0 + np.array([-0.9061798459386640, -0.5384693101056831, 0.0,
                               0.5384693101056831, 0.9061798459386640]))
_G5_W = 0.5 * np.array([0.2369268850561891, 0.4786286704993665, 0.5688888888888889,
                        0.4786286704993665, 0.2369268850561891])


class BuildError(RuntimeError):
    """The discrete problem could not be assembled (bad data or infeasible start)."""


def _sq_norm_rows(v: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", v, v)


def _deriv_sq_moment(arc: ReferenceArc, channel: str, mesh: Mesh) -> np.ndarray:
    """Exact-enough per-interval integrals of the squared reference derivative."""
    k = mesh.k
    if arc.channel(channel)(np.array([0.0])).shape[-1] == 0:
        return np.zeros(k)
    try:
        dfn = arc.derivative(channel)
    except ValueError:
        # No derivative declared: fall back to the piecewise-linear reading
        # of the sampled values, keeping the energy consistent with m1.
        vals = arc.channel(channel)(mesh.nodes)
        return _sq_norm_rows(np.diff(vals, axis=0)) / mesh.h
    edges = mesh.nodes
    if arc.breaks is not None and len(arc.breaks):
        cuts = arc.breaks[(arc.breaks > edges[0]) & (arc.breaks < edges[-1])]
        edges = np.union1d(edges, cuts)
    out = np.zeros(k)
    lengths = np.diff(edges)
    mids = edges[:-1, None] + np.outer(lengths, _G5_X)
    vals = dfn(mids.ravel())
    sq = _sq_norm_rows(vals).reshape(len(lengths), len(_G5_X))
    piece = sq @ _G5_W * lengths
    owner = np.clip(np.searchsorted(mesh.nodes, edges[:-1], side="right") - 1, 0, k - 1)
    np.add.at(out, owner, piece)
    return out


@dataclass
class _Moments:
    """Per-interval reference moments: m1 = value increments, m2 = ∫||deriv||²."""

    m1: dict
    m2: dict

    def penalty(self, channel: str, slopes: np.ndarray, h: np.ndarray) -> float:
        """∑_j ∫_I_j ||s_j − ref'(t)||² dt, exact given the moments."""
        if slopes.shape[1] == 0:
            return 0.0
        m1 = self.m1[channel]
        return float(np.sum(self.m2[channel])
                     - 2.0 * np.sum(slopes * m1)
                     + np.sum(h * _sq_norm_rows(slopes)))


@dataclass
class SolveOptions:
    """Tolerances and strategy knobs for :func:`solve`.

    gradient: "forward" | "central" | "adjoint".  Finite differences are
    the default; the adjoint sweep is exact where the projection's active
    set is stable and is the right choice when certificate-grade
    stationarity is needed.
    polish: optional refinement after the L-BFGS phase (skipped while a
    localization multiplier is active), using Hessian–vector products from
    gradient differences, exact for the piecewise-quadratic instances.
    "cg" runs conjugate-gradient steps until ``gtol`` is met and typically
    lands orders of magnitude below it — best final accuracy.  "descent"
    takes plain steepest-descent steps with an exact parabola step length
    and stops at the first iterate whose max-norm gradient is below
    ``gtol``; since each step contracts the gradient by a bounded factor,
    the landing sits just under the tolerance instead of far beneath it,
    which is the right behaviour when the stationarity level itself is the
    controlled quantity (e.g. certificate-residual decay studies).  In
    "descent" mode the preceding L-BFGS phase stops early (its projected
    gradient test is loosened) so the landing is owned by the descent
    steps; quasi-Newton steps contract too aggressively to stop on a dime.
    """

    gradient: str = "forward"
    gtol: float = 1e-8
    ftol: float = 1e-14
    maxiter: int = 1000
    fd_step: float = 1e-6
    polish: str | None = None
    polish_maxiter: int | None = None
    max_outer: int = 8
    penalty_start: float = 1.0
    penalty_growth: float = 10.0
    penalty_cap: float = 1e8
    constraint_tol: float = 1e-8


@dataclass
class SolveReport:
    solution: Trajectory
    cost: float
    iterations: int
    gradient_norm: float
    constraint_violation: float
    localization_active: dict
    success: bool
    message: str
    outer_history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cost": self.cost,
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "constraint_violation": self.constraint_violation,
            "localization_active": dict(self.localization_active),
            "success": self.success,
            "message": self.message,
            "outer_history": self.outer_history,
        }


class DiscreteProblem:
    """One discretized instance: mesh, reference, moments, cost, constraints.

    The localization radius ``epsilon`` may be ``inf`` to disable the node
    and energy constraints.  ``reference`` is the sampled reference on the
    problem mesh; the originating arc is kept for the exact penalty
    moments.
    """

    def __init__(self, spec: ProblemSpec, mesh: Mesh, arc: ReferenceArc,
                 epsilon: float, initial_slopes: dict, data_nodes: dict):
        self.spec = spec
        self.mesh = mesh
        self.arc = arc
        self.reference = arc.sample(mesh)
        self.epsilon = float(epsilon)
        self.initial_slopes = initial_slopes
        self._data_nodes = data_nodes  # pinned node values for non-free channels
        self.moments = _Moments(
            m1={c: np.diff(self.reference.channel(c), axis=0) for c in _ZCH},
            m2={c: _deriv_sq_moment(arc, c, mesh) for c in _ZCH},
        )
        self._ref_stack = self.reference.stacked()
        self._free = [c for c in _CTRL if c in spec.free_channels]
        self._dims = {c: spec.channel_dim(c) for c in _CTRL}
        self._theta_dim = mesh.k * sum(self._dims[c] for c in self._free)

    # -- packing ------------------------------------------------------------

    def pack(self, slopes: dict) -> np.ndarray:
        parts = [np.asarray(slopes[c], dtype=float).reshape(-1) for c in self._free]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, theta: np.ndarray) -> dict:
        out = {}
        k = self.mesh.k
        ofs = 0
        for c in self._free:
            d = self._dims[c]
            out[c] = theta[ofs:ofs + k * d].reshape(k, d)
            ofs += k * d
        return out

    def control_nodes(self, theta: np.ndarray) -> dict:
        """Node values of all three control channels for packed slopes."""
        slopes = self.unpack(theta)
        h = self.mesh.h
        nodes = {}
        for c in _CTRL:
            if c in slopes:
                first = self._data_nodes[c][0]
                vals = np.concatenate([first[None, :],
                                       first[None, :] + np.cumsum(h[:, None] * slopes[c], axis=0)])
                nodes[c] = vals
            else:
                nodes[c] = self._data_nodes[c]
        return nodes

    def trajectory(self, theta: np.ndarray) -> Trajectory:
        nodes = self.control_nodes(theta)
        xs, ys, _ = _forward(self.spec, self.mesh, nodes["u"], nodes["a"], nodes["b"])
        return Trajectory(mesh=self.mesh, x=xs, y=ys,
                          u=nodes["u"], a=nodes["a"], b=nodes["b"])

    # -- evaluators ----------------------------------------------------------

    def cost(self, traj: Trajectory) -> float:
        """J_k on any candidate node vector (no feasibility assumed)."""
        parts = self.cost_parts(traj)
        return parts["terminal"] + parts["running"] + parts["slope_running"] + parts["proximity"]

    def cost_parts(self, traj: Trajectory) -> dict:
        spec, mesh = self.spec, self.mesh
        h = mesh.h
        terminal = float(spec.terminal_cost.value(traj.x[-1])) if spec.terminal_cost else 0.0
        running = 0.0
        if spec.stage_cost is not None:
            lvals = spec.stage_cost.value(traj.x[:-1], traj.y[:-1], traj.u[:-1],
                                          traj.a[:-1], traj.b[:-1], traj.slopes("x"))
            running = float(np.sum(h * np.asarray(lvals)))
        slope_running = 0.0
        for c, form in (("u", spec.cost_u), ("a", spec.cost_a), ("b", spec.cost_b)):
            if form is not None and self._dims[c]:
                slope_running += float(np.sum(h * form.value(traj.slopes(c))))
        prox = 0.5 * self.energy(traj)
        return {"terminal": terminal, "running": running,
                "slope_running": slope_running, "proximity": prox}

    def energy(self, traj: Trajectory) -> float:
        """Left side of the energy localization: sum of the five penalty integrals."""
        h = self.mesh.h
        return sum(self.moments.penalty(c, traj.slopes(c), h) for c in _ZCH)

    def node_distances(self, traj: Trajectory) -> np.ndarray:
        """||z_j − ref_j|| for the localized nodes j = 0..k−1."""
        diff = traj.stacked()[:-1] - self._ref_stack[:-1]
        return np.sqrt(_sq_norm_rows(diff))

    def localization_report(self, traj: Trajectory) -> dict:
        half = 0.5 * self.epsilon
        dists = self.node_distances(traj)
        energy = self.energy(traj)
        g_end = self.spec.set.values(traj.x[-1] - traj.u[-1])
        endpoint = float(max(0.0, -np.min(g_end, initial=0.0)))
        return {
            "epsilon": self.epsilon,
            "node_max": float(dists.max(initial=0.0)),
            "node_excess": float(max(0.0, dists.max(initial=0.0) - half)),
            "energy": energy,
            "energy_excess": float(max(0.0, energy - half)),
            "endpoint_violation": endpoint,
            "satisfied": bool(not math.isfinite(self.epsilon)
                              or (dists.max(initial=0.0) <= half + 1e-12
                                  and energy <= half + 1e-12)),
        }


# ---------------------------------------------------------------------------
# Forward simulation with projection derivative bookkeeping
# ---------------------------------------------------------------------------


def _proj_info(mset, shift, x_next, q):
    """Derivative of the projection at this step, as (kind, payload)."""
    if mset.kind == "orthant":
        return ("mask", q > 0.0)
    base = x_next - shift
    vals = mset.values(base)
    act = np.flatnonzero(vals <= default_active_tol(base))
    if mset.kind == "affine":
        if len(act) == 0:
            return ("mask", np.ones(len(base), dtype=bool))
        A = mset.A[act]
        # face projector I − Aᵀ(AAᵀ)⁻¹A on the active subspace
        G = A @ A.T
        P = np.eye(len(base)) - A.T @ np.linalg.lstsq(G, A, rcond=None)[0]
        return ("mat", P)
    # Smooth sets: differentiate the projection numerically (rare path).
    n = len(base)
    P = np.empty((n, n))
    step = 1e-7 * (1.0 + np.linalg.norm(q))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        P[:, i] = (project(mset, shift, shift + q + e) - x_next) / step
    return ("mat", P)


def _forward(spec: ProblemSpec, mesh: Mesh, u, a, b):
    """Catching-up rollout returning states and per-step projection info."""
    k = mesh.k
    h = mesh.h
    n = spec.n
    xs = np.empty((k + 1, n))
    ys = np.zeros((k + 1, n))
    xs[0] = spec.x0
    info = [None] * k
    f1, f2 = spec.f1, spec.f2
    orthant = spec.set.kind == "orthant"
    for j in range(k):
        hj = h[j]
        yn = ys[j] + hj * f2.value(b[j], xs[j])
        pred = xs[j] - hj * (f1.value(a[j], xs[j]) + yn)
        if orthant:
            q = pred - u[j + 1]
            xs[j + 1] = u[j + 1] + np.maximum(q, 0.0)
            info[j] = ("mask", q > 0.0)
        else:
            xs[j + 1] = project(spec.set, u[j + 1], pred)
            info[j] = _proj_info(spec.set, u[j + 1], xs[j + 1], pred - u[j + 1])
        ys[j + 1] = yn
    return xs, ys, info


def _apply_T(info, v):
    kind, payload = info
    if kind == "mask":
        return np.where(payload, v, 0.0)
    return payload.T @ v


def _apply_complement_T(info, v):
    kind, payload = info
    if kind == "mask":
        return np.where(payload, 0.0, v)
    return v - payload.T @ v


# ---------------------------------------------------------------------------
# Objective with optional adjoint gradient
# ---------------------------------------------------------------------------


@dataclass
class _ALState:
    alpha_nodes: np.ndarray
    alpha_energy: float
    mu: float


def _objective(problem: DiscreteProblem, theta: np.ndarray, al: _ALState | None,
               need_grad: bool):
    spec, mesh = problem.spec, problem.mesh
    k, h = mesh.k, mesh.h
    nodes = problem.control_nodes(theta)
    u, a, b = nodes["u"], nodes["a"], nodes["b"]
    xs, ys, pinfo = _forward(spec, mesh, u, a, b)
    mom = problem.moments

    sx = (xs[1:] - xs[:-1]) / h[:, None]
    sy = (ys[1:] - ys[:-1]) / h[:, None]
    ctrl_slopes = {}
    for c in _CTRL:
        ch = nodes[c]
        ctrl_slopes[c] = ((ch[1:] - ch[:-1]) / h[:, None]) if ch.shape[1] else np.zeros((k, 0))

    F = float(spec.terminal_cost.value(xs[-1])) if spec.terminal_cost else 0.0
    if spec.stage_cost is not None:
        lvals = spec.stage_cost.value(xs[:-1], ys[:-1], u[:-1], a[:-1], b[:-1], sx)
        F += float(np.sum(h * np.asarray(lvals)))
    for c, form in (("u", spec.cost_u), ("a", spec.cost_a), ("b", spec.cost_b)):
        if form is not None and ctrl_slopes[c].shape[1]:
            F += float(np.sum(h * form.value(ctrl_slopes[c])))

    # dprox[c][j] = s_j − m1_j/h_j, the per-interval penalty derivative seed.
    dprox = {}
    all_slopes = {"x": sx, "y": sy, **ctrl_slopes}
    energy = 0.0
    for c in _ZCH:
        s = all_slopes[c]
        if s.shape[1] == 0:
            dprox[c] = s
            continue
        m1 = mom.m1[c]
        dprox[c] = s - m1 / h[:, None]
        energy += float(np.sum(mom.m2[c]) - 2.0 * np.sum(s * m1)
                        + np.sum(h * _sq_norm_rows(s)))
    F += 0.5 * energy

    # augmented Lagrangian pieces
    chat_nodes = None
    chat_energy = 0.0
    zdiff = None
    if al is not None:
        half_sq = (0.5 * problem.epsilon) ** 2
        zdiff = np.concatenate([xs, ys, u, a, b], axis=1)[:-1] - problem._ref_stack[:-1]
        c_nodes = _sq_norm_rows(zdiff) - half_sq
        chat_nodes = np.maximum(0.0, al.alpha_nodes + al.mu * c_nodes)
        F += float(np.sum(chat_nodes ** 2 - al.alpha_nodes ** 2)) / (2.0 * al.mu)
        c_energy = energy - 0.5 * problem.epsilon
        chat_energy = max(0.0, al.alpha_energy + al.mu * c_energy)
        F += (chat_energy ** 2 - al.alpha_energy ** 2) / (2.0 * al.mu)

    if not need_grad:
        return F, None

    n = spec.n
    gx = np.zeros((k + 1, n))
    gy = np.zeros((k + 1, n))
    gc = {c: np.zeros((k + 1, self_dim)) for c, self_dim in
          (("u", n), ("a", spec.m), ("b", spec.d))}
    gs = {c: np.zeros((k, problem._dims[c])) for c in problem._free}

    if spec.terminal_cost is not None:
        gx[k] += spec.terminal_cost.grad(xs[-1])
    if spec.stage_cost is not None:
        args = (xs[:-1], ys[:-1], u[:-1], a[:-1], b[:-1], sx)
        gx[:-1] += h[:, None] * spec.stage_cost.grad("x", *args)
        gy[:-1] += h[:, None] * spec.stage_cost.grad("y", *args)
        gc["u"][:-1] += h[:, None] * spec.stage_cost.grad("u", *args)
        if spec.m:
            gc["a"][:-1] += h[:, None] * spec.stage_cost.grad("a", *args)
        if spec.d:
            gc["b"][:-1] += h[:, None] * spec.stage_cost.grad("b", *args)

    prox_scale = 1.0 + 2.0 * chat_energy
    # interval terms on the state/memory slopes enter through the nodes
    int_x = prox_scale * dprox["x"]
    int_y = prox_scale * dprox["y"]
    if spec.stage_cost is not None and "xdot" in getattr(spec.stage_cost, "forms", {}):
        int_x = int_x + spec.stage_cost.forms["xdot"].grad(sx)
    gx[1:k + 1] += int_x
    gx[0:k] -= int_x
    gy[1:k + 1] += int_y
    gy[0:k] -= int_y

    for c in problem._free:
        if problem._dims[c] == 0:
            continue
        gs[c] += prox_scale * h[:, None] * dprox[c]
        form = {"u": spec.cost_u, "a": spec.cost_a, "b": spec.cost_b}[c]
        if form is not None:
            gs[c] += h[:, None] * form.grad(ctrl_slopes[c])
    # non-free control channels keep their penalty terms out of the gradient
    # (their slopes are data), so nothing to add there.

    if al is not None:
        w = 2.0 * chat_nodes[:, None] * zdiff
        gx[:-1] += w[:, 0:n]
        gy[:-1] += w[:, n:2 * n]
        gc["u"][:-1] += w[:, 2 * n:3 * n]
        if spec.m:
            gc["a"][:-1] += w[:, 3 * n:3 * n + spec.m]
        if spec.d:
            gc["b"][:-1] += w[:, 3 * n + spec.m:]

    f1, f2 = spec.f1, spec.f2
    for j in range(k - 1, -1, -1):
        hj = h[j]
        gxt = _apply_T(pinfo[j], gx[j + 1])
        gc["u"][j + 1] += _apply_complement_T(pinfo[j], gx[j + 1])
        gyn = gy[j + 1] - hj * gxt
        gx[j] += gxt - hj * (f1.jac_state(a[j], xs[j]).T @ gxt)
        if spec.m:
            gc["a"][j] += -hj * (f1.jac_ctrl(a[j], xs[j]).T @ gxt)
        gy[j] += gyn
        gx[j] += hj * (f2.jac_state(b[j], xs[j]).T @ gyn)
        if spec.d:
            gc["b"][j] += hj * (f2.jac_ctrl(b[j], xs[j]).T @ gyn)

    grad_parts = []
    for c in problem._free:
        tail = np.cumsum(gc[c][::-1], axis=0)[::-1]
        grad_parts.append((gs[c] + h[:, None] * tail[1:]).reshape(-1))
    grad = np.concatenate(grad_parts) if grad_parts else np.zeros(0)
    return F, grad


def _fd_gradient(fun, theta, step, central):
    f0 = fun(theta)
    g = np.empty_like(theta)
    for i in range(len(theta)):
        d = step * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tp[i] += d
        if central:
            tm = theta.copy()
            tm[i] -= d
            g[i] = (fun(tp) - fun(tm)) / (2.0 * d)
        else:
            g[i] = (fun(tp) - f0) / d
    return f0, g


# ---------------------------------------------------------------------------
# build / solve / convergence study
# ---------------------------------------------------------------------------


def build(spec: ProblemSpec, reference, k: int, epsilon: float | None = None) -> DiscreteProblem:
    """Assemble the k-interval discrete problem around a reference arc.

    ``reference`` may be a ReferenceArc or a Trajectory (interpolated).
    ``epsilon`` defaults to 10% of the sup-norm of the stacked reference;
    pass ``math.inf`` to disable localization.  The initial guess is the
    feasible reconstruction of the reference; if that reconstruction
    violates the localization budget the build fails.
    """
    if isinstance(reference, Trajectory):
        arc = ReferenceArc.from_trajectory(reference)
    else:
        arc = reference
    if abs(arc.T - spec.horizon) > 1e-12 * max(1.0, spec.horizon):
        raise BuildError(f"reference horizon {arc.T} != problem horizon {spec.horizon}")
    x_ref0 = arc.x(np.array([0.0]))[0]
    if np.linalg.norm(x_ref0 - spec.x0) > 1e-8 * (1.0 + np.linalg.norm(spec.x0)):
        raise BuildError("reference does not start at the problem's initial state")

    mesh = Mesh.uniform(spec.horizon, k)
    recon = reconstruct_discrete_feasible(spec, arc, k)
    t = mesh.nodes
    ref_nodes = {"u": arc.u(t), "a": arc.a(t), "b": arc.b(t)}

    if epsilon is None:
        ref_traj = arc.sample(mesh)
        epsilon = 0.1 * float(np.sqrt(_sq_norm_rows(ref_traj.stacked())).max())
        if epsilon <= 0.0:
            epsilon = 0.1
    if not epsilon > 0.0:
        raise BuildError("localization radius must be positive")

    initial = {}
    for c in _CTRL:
        if c in spec.free_channels and spec.channel_dim(c):
            initial[c] = recon.trajectory.slopes(c)

    problem = DiscreteProblem(spec, mesh, arc, epsilon, initial, ref_nodes)

    if math.isfinite(epsilon):
        report = problem.localization_report(recon.trajectory)
        if report["node_max"] >= 0.5 * epsilon or report["energy"] >= 0.5 * epsilon:
            raise BuildError(
                "reconstruction violates the localization budget "
                f"(node sup {report['node_max']:.3g}, energy {report['energy']:.3g}, "
                f"eps/2 {0.5 * epsilon:.3g}); refine k or enlarge epsilon")
    return problem


def _make_fun(problem, al, options):
    if options.gradient == "adjoint":
        def fun(theta):
            return _objective(problem, theta, al, True)
    else:
        central = options.gradient == "central"

        def value_only(theta):
            return _objective(problem, theta, al, False)[0]

        def fun(theta):
            return _fd_gradient(value_only, theta, options.fd_step, central)
    return fun


def _cg_polish(fun, theta, gtol, maxiter):
    """Conjugate-gradient refinement with gradient-difference Hessian products.

    Exact for locally quadratic objectives; each product costs one gradient
    evaluation.  Falls back to the incoming iterate if no improvement.
    """
    f0, g0 = fun(theta)
    best_theta, best_g = theta, g0
    evals = 0
    for _ in range(4):
        gnorm = np.abs(best_g).max(initial=0.0)
        if gnorm <= gtol:
            break
        d = np.zeros_like(best_theta)
        r = -best_g
        p = r.copy()
        rs = float(r @ r)
        for _ in range(maxiter):
            Hp = fun(best_theta + p)[1] - best_g
            evals += 1
            pHp = float(p @ Hp)
            if pHp <= 1e-300:
                break
            alpha = rs / pHp
            d += alpha * p
            r -= alpha * Hp
            rs_new = float(r @ r)
            if np.abs(r).max() <= 0.25 * gtol:
                break
            p = r + (rs_new / rs) * p
            rs = rs_new
        cand = best_theta + d
        fc, gc_ = fun(cand)
        evals += 1
        if np.abs(gc_).max(initial=0.0) < gnorm:
            best_theta, best_g = cand, gc_
        else:
            break
    return best_theta, best_g, evals


def _descent_polish(fun, theta, gtol, maxiter):
    """Steepest descent with exact parabola steps; stops just under ``gtol``.

    The per-step gradient contraction is bounded away from zero, so the
    first iterate below the tolerance cannot sit far beneath it — unlike
    quasi-Newton or CG steps, whose terminal superlinear plunge makes the
    stopping level essentially uncontrollable.  Armijo backtracking guards
    the parabola step outside the locally quadratic regime.
    """
    f, g = fun(theta)
    evals = 1
    for _ in range(maxiter):
        gnorm = np.abs(g).max(initial=0.0)
        if gnorm <= gtol:
            break
        d = -g
        gd = float(g @ d)
        Hd = fun(theta + d)[1] - g
        evals += 1
        dHd = float(d @ Hd)
        alpha = -gd / dHd if dHd > 1e-300 else 1.0
        f_new, g_new = f, g
        for _ in range(60):
            f_new, g_new = fun(theta + alpha * d)
            evals += 1
            if f_new <= f + 1e-4 * alpha * gd or alpha <= 1e-18:
                break
            alpha *= 0.5
        if f_new > f:
            break
        theta = theta + alpha * d
        f, g = f_new, g_new
    return theta, g, evals


def solve(problem: DiscreteProblem, options: SolveOptions | None = None) -> SolveReport:
    """Minimize J_k over the free control slopes (augmented Lagrangian outer loop)."""
    options = options or SolveOptions()
    if options.polish not in (None, "cg", "descent"):
        raise ValueError('polish must be None, "cg" or "descent"')
    theta = problem.pack(problem.initial_slopes)
    k = problem.mesh.k
    if len(theta) == 0:
        traj = problem.trajectory(theta)
        loc = problem.localization_report(traj)
        violation = max(loc["node_excess"], loc["energy_excess"], loc["endpoint_violation"])
        return SolveReport(solution=traj, cost=problem.cost(traj), iterations=0,
                           gradient_norm=0.0, constraint_violation=violation,
                           localization_active={"nodes": False, "energy": False},
                           success=violation <= options.constraint_tol,
                           message="no free control channels; nothing to optimize")
    localized = math.isfinite(problem.epsilon)
    al = _ALState(alpha_nodes=np.zeros(k), alpha_energy=0.0,
                  mu=options.penalty_start) if localized else None

    history = []
    total_iters = 0
    message = ""
    gnorm = math.inf
    inner_gtol = options.gtol
    if options.polish == "descent":
        inner_gtol = max(options.gtol, min(1e-4, 1e5 * options.gtol))
    for outer in range(options.max_outer if localized else 1):
        fun = _make_fun(problem, al, options)
        res = minimize(fun, theta, jac=True, method="L-BFGS-B",
                       options={"maxiter": options.maxiter, "ftol": options.ftol,
                                "gtol": inner_gtol, "maxcor": 30,
                                "maxfun": 20 * options.maxiter})
        theta = res.x
        total_iters += int(res.nit)
        gnorm = float(np.abs(res.jac).max(initial=0.0))
        message = str(res.message)
        traj = problem.trajectory(theta)
        loc = problem.localization_report(traj)
        infeas = max(loc["node_excess"], loc["energy_excess"])
        history.append({"outer": outer, "penalty": al.mu if al else 0.0,
                        "cost": problem.cost(traj), "infeasibility": infeas,
                        "inner_iterations": int(res.nit),
                        "gradient_norm": gnorm,
                        "line_search_failed": bool(res.status == 2)})
        if not localized:
            break
        half_sq = (0.5 * problem.epsilon) ** 2
        dists = problem.node_distances(traj)
        al.alpha_nodes = np.maximum(0.0, al.alpha_nodes + al.mu * (dists ** 2 - half_sq))
        al.alpha_energy = max(0.0, al.alpha_energy
                              + al.mu * (problem.energy(traj) - 0.5 * problem.epsilon))
        if infeas <= options.constraint_tol:
            break
        al.mu = min(al.mu * options.penalty_growth, options.penalty_cap)

    multipliers_active = bool(al is not None and
                              (al.alpha_nodes.max(initial=0.0) > 0.0 or al.alpha_energy > 0.0))
    if options.polish is not None and not multipliers_active:
        fun = _make_fun(problem, al, options)
        if options.polish == "cg":
            polish_iters = options.polish_maxiter or (2 * max(1, len(theta)))
            theta, g, evals = _cg_polish(fun, theta, options.gtol, polish_iters)
        else:
            polish_iters = options.polish_maxiter or 5000
            theta, g, evals = _descent_polish(fun, theta, options.gtol, polish_iters)
        gnorm = float(np.abs(g).max(initial=0.0))
        total_iters += evals

    traj = problem.trajectory(theta)
    loc = problem.localization_report(traj)
    violation = max(loc["node_excess"], loc["energy_excess"], loc["endpoint_violation"])
    tol_edge = 1e-6 * (1.0 + problem.epsilon) if localized else 0.0
    active = {
        "nodes": bool(localized and (loc["node_max"] >= 0.5 * problem.epsilon - tol_edge)),
        "energy": bool(localized and (loc["energy"] >= 0.5 * problem.epsilon - tol_edge)),
    }
    success = violation <= max(options.constraint_tol, 1e-10)
    if active["nodes"] or active["energy"]:
        message += " [localization boundary active: epsilon too small or reference not locally optimal]"
    return SolveReport(solution=traj, cost=problem.cost(traj), iterations=total_iters,
                       gradient_norm=gnorm, constraint_violation=violation,
                       localization_active=active, success=success,
                       message=message, outer_history=history)


@dataclass
class ConvergenceStudy:
    rows: list

    def to_csv(self, path) -> None:
        """Write the table; timing stays in ``rows`` so files are run-stable."""
        fields = ["k", "cost", "w12_sup", "w12_deriv", "status"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({f: row[f] for f in fields})


def convergence_study(spec: ProblemSpec, reference, ks: Sequence[int],
                      epsilon: float | None = None,
                      options: SolveOptions | None = None) -> ConvergenceStudy:
    """Build and solve per k; per-k failures are recorded, the study continues."""
    ks = list(ks)
    if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])):
        raise ValueError("ks must be strictly increasing")
    rows = []
    for k in ks:
        t0 = time.perf_counter()
        try:
            problem = build(spec, reference, k, epsilon)
            report = solve(problem, options)
            ref_sampled = problem.reference
            dist = w12_distance(report.solution, ref_sampled)
            rows.append({"k": k, "cost": report.cost,
                         "w12_sup": dist.sup_norm, "w12_deriv": dist.l2_derivative,
                         "seconds": time.perf_counter() - t0,
                         "status": "ok" if report.success else "tolerance",
                         "report": report})
        except Exception as exc:  # noqa: BLE001 - study must survive per-k failures
            rows.append({"k": k, "cost": math.nan, "w12_sup": math.nan,
                         "w12_deriv": math.nan,
                         "seconds": time.perf_counter() - t0,
                         "status": f"error: {exc}", "report": None})
    return ConvergenceStudy(rows=rows)
