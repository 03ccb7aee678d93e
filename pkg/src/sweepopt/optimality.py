"""Stationarity certificates for discretized and continuous sweeping control.

The discrete half assembles multiplier sequences (cost multiplier, cone
multipliers, adjoint node vectors) for a solved transcription by running
the dual difference equations backward from their endpoint values, then
audits every equation independently and reports per-equation sup-norm
residuals.  Nothing is fitted to make residuals small: the assembly uses
only the pinned identities (velocity-multiplier formulas, endpoint
conditions, backward recursions), so any violation of stationarity shows
up in the audited rows.

The continuous half evaluates the stationarity system for a candidate
arc given in closed form -- primal representation, adjoint differential
equation, measure-adjusted dual arcs, the extended Volterra condition,
endpoint and nontriviality conditions -- on a dense grid, with the tail
integrals computed by cumulative Simpson quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.optimize import lsq_linear, nnls

from .dynamics import ProblemSpec, ReferenceArc, Trajectory
from .geometry import (
    ConeAmbiguityError,
    active_set,
    default_active_tol,
    normal_cone_decompose,
)

__all__ = [
    "CertificateError",
    "VelocityMultipliers",
    "CoderivativeReport",
    "DiscreteCertificate",
    "ContinuousCertificate",
    "compute_eta",
    "coderivative_check",
    "assemble_discrete_certificate",
    "verify_continuous_certificate",
    "benchmark_certificate",
]

_CHANNELS = ("x", "y", "u", "a", "b")


class CertificateError(RuntimeError):
    """Raised when a multiplier assembly cannot represent the instance."""


# ---------------------------------------------------------------------------
# Stage-cost selections
# ---------------------------------------------------------------------------


def _stage_selections(spec: ProblemSpec, traj: Trajectory):
    """Gradient selections (w_j, v_j) of the running cost at each interval.

    ``w`` collects the node-value gradients for channels x, u, a, b and
    ``v`` the slope gradients (x-slope from the running cost, control
    slopes from the dedicated slope forms).  The running cost has no slot
    for the accumulated integral state, so a y-dependent stage cost is
    rejected rather than silently dropped.
    """
    k = traj.mesh.k
    args = (traj.x[:-1], traj.y[:-1], traj.u[:-1], traj.a[:-1], traj.b[:-1],
            traj.slopes("x"))
    w = {}
    v = {}
    stage = spec.stage_cost
    if stage is not None and getattr(stage, "forms", None):
        yform = stage.forms.get("y")
        if yform is not None and (np.any(yform.Q) or
                                  (yform.r is not None and np.any(yform.r))):
            raise CertificateError(
                "stage costs depending on the integral state have no "
                "certificate slot")
    if getattr(stage, "time_dependent", False):
        raise CertificateError("time-dependent running costs are not certifiable")
    for c in ("x", "u", "a", "b"):
        dim = spec.channel_dim(c)
        if stage is not None and dim:
            w[c] = np.asarray(stage.grad(c, *args), float).reshape(k, dim)
        else:
            w[c] = np.zeros((k, dim))
    v["x"] = (np.asarray(stage.grad("xdot", *args), float).reshape(k, spec.n)
              if stage is not None else np.zeros((k, spec.n)))
    for c, form in (("u", spec.cost_u), ("a", spec.cost_a), ("b", spec.cost_b)):
        dim = spec.channel_dim(c)
        if form is not None and dim:
            v[c] = np.asarray(form.grad(traj.slopes(c)), float).reshape(k, dim)
        else:
            v[c] = np.zeros((k, dim))
    return w, v


def _thetas(problem, traj: Trajectory) -> dict:
    """Averaging integrals: interval slope times h minus the reference increment."""
    h = problem.mesh.h
    return {c: h[:, None] * traj.slopes(c) - problem.moments.m1[c]
            for c in _CHANNELS}


# ---------------------------------------------------------------------------
# Velocity multipliers (discrete primal representation)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VelocityMultipliers:
    """Nonnegative cone coefficients of the discrete velocity identity."""

    eta: np.ndarray
    residuals: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max(initial=0.0))


def compute_eta(spec: ProblemSpec, traj: Trajectory,
                tol: float | None = None) -> VelocityMultipliers:
    """Decompose each discrete velocity over the active constraint gradients.

    For every interval j the combination
    ``(x_{j+1}-x_j)/h + f1(a_j, x_j) + y_j + h f2(b_j, x_j)`` must be a
    nonnegative combination of the active gradients at ``x_j - u_j``;
    the coefficients are found by nonnegative least squares restricted
    to the active set, which makes the inactive-index slackness hold
    structurally.

    Raises
    ------
    CertificateError
        If some interval's residual exceeds the feasibility tolerance:
        the trajectory does not satisfy the discrete inclusion.
    """
    mesh = traj.mesh
    h = mesh.h
    sx = traj.slopes("x")
    f1v = spec.f1.value(traj.a[:-1], traj.x[:-1])
    f2v = spec.f2.value(traj.b[:-1], traj.x[:-1])
    k = mesh.k
    s = spec.set.n_constraints
    eta = np.zeros((k, s))
    res = np.zeros(k)
    for j in range(k):
        lhs = sx[j] + f1v[j] + traj.y[j] + h[j] * f2v[j]
        dec = normal_cone_decompose(spec.set, traj.x[j], traj.u[j], -lhs, tol=tol)
        eta[j] = dec.lam
        res[j] = dec.residual
        if not dec.feasible:
            raise CertificateError(
                f"discrete inclusion violated at interval {j}: the velocity "
                f"misses the normal cone by {dec.residual:.3g}")
    return VelocityMultipliers(eta=eta, residuals=res)


# ---------------------------------------------------------------------------
# Coderivative membership
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoderivativeReport:
    """Verdict of a cotangent membership test for the velocity mapping."""

    member: bool
    domain_ok: bool
    lam: np.ndarray
    sigma: np.ndarray | None
    residuals: dict
    witness: np.ndarray | None


def _sigma_partition(gvals, lam, inner, tol):
    """Index sets for the sign conditions attached to the sigma multipliers.

    Returns (forced_zero, nonneg, free) boolean masks: sigma vanishes off
    the active set and where the multiplier is zero with a strictly
    positive pairing; it is sign-constrained where the pairing is
    strictly negative; it is unrestricted otherwise.
    """
    inactive = gvals > tol
    zero_lam = lam <= tol
    forced_zero = inactive | (~inactive & zero_lam & (inner > tol))
    nonneg = ~inactive & zero_lam & (inner < -tol)
    free = ~(forced_zero | nonneg)
    return forced_zero, nonneg, free


def _solve_signed_ls(A, rhs, nonneg_mask, free_mask):
    """Least squares A sigma = rhs with selected components sign-constrained.

    Columns outside both masks are forced to zero.  Returns the
    full-length sigma and the infinity norm of the misfit.
    """
    s = nonneg_mask.size
    sigma = np.zeros(s)
    cols = np.flatnonzero(nonneg_mask | free_mask)
    if cols.size == 0:
        miss = rhs
        return sigma, float(np.abs(miss).max(initial=0.0)), miss
    Asub = A[:, cols]
    lo = np.where(nonneg_mask[cols], 0.0, -np.inf)
    hi = np.full(cols.size, np.inf)
    out = lsq_linear(Asub, rhs, bounds=(lo, hi))
    sigma[cols] = out.x
    miss = Asub @ out.x - rhs
    return sigma, float(np.abs(miss).max(initial=0.0)), miss


def coderivative_check(spec: ProblemSpec, point, z, h: float, candidate,
                       tol: float = 1e-9) -> CoderivativeReport:
    """Test whether a cotangent tuple belongs to the velocity-map coderivative.

    Parameters
    ----------
    point : tuple
        Base point ``(x, y, u, a, b, w)`` with ``w`` a velocity of the
        discrete sweeping map at the remaining components.
    z : array
        Direction; must satisfy the domain condition that every active
        multiplier annihilates its gradient pairing with ``z``.
    candidate : tuple
        Cotangent candidate ``(cx, cy, cu, ca, cb)``.

    The x and u slots are matched by solving for the sigma multipliers
    under their sign conditions; y, a and b slots are fixed linear images
    of ``z`` and are compared directly.  Domain violations are reported
    separately from value violations.
    """
    x, y, u, a, b, w = (np.asarray(c, float) for c in point)
    z = np.asarray(z, float)
    cx, cy, cu, ca, cb = (np.asarray(c, float) for c in candidate)
    f1v = spec.f1.value(a, x)
    f2v = spec.f2.value(b, x)
    dec = normal_cone_decompose(spec.set, x, u, w - f1v - y - h * f2v)
    if not dec.feasible:
        raise CertificateError(
            "w is not a velocity of the sweeping map at this point "
            f"(cone misfit {dec.residual:.3g})")
    lam = dec.lam
    pt = x - u
    gvals = spec.set.values(pt)
    G = spec.set.gradients(pt)
    H = spec.set.hessians(pt)
    scale = tol * (1.0 + float(np.linalg.norm(z)))
    inner = G @ z
    dom_res = float(np.abs(lam * inner).max(initial=0.0))
    residuals = {"inclusion": dec.residual, "domain": dom_res}
    if dom_res > scale:
        return CoderivativeReport(member=False, domain_ok=False, lam=lam,
                                  sigma=None, residuals=residuals, witness=None)
    Hz = np.tensordot(lam, H, axes=1) @ z
    J1x = np.asarray(spec.f1.jac_state(a, x), float)
    J1a = np.asarray(spec.f1.jac_ctrl(a, x), float)
    J2x = np.asarray(spec.f2.jac_state(b, x), float)
    J2b = np.asarray(spec.f2.jac_ctrl(b, x), float)
    base_x = J1x.T @ z + h * (J2x.T @ z) - Hz
    base_u = Hz
    fixed = max(
        float(np.abs(cy - z).max(initial=0.0)),
        float(np.abs(ca - J1a.T @ z).max(initial=0.0)),
        float(np.abs(cb - h * (J2b.T @ z)).max(initial=0.0)),
    )
    forced_zero, nonneg, free = _sigma_partition(gvals, lam, inner, scale)
    A = np.vstack([G.T, G.T])
    rhs = np.concatenate([base_x - cx, base_u - cu])
    sigma, fit_res, miss = _solve_signed_ls(A, rhs, nonneg, free)
    residuals["value"] = max(fixed, fit_res)
    member = residuals["value"] <= scale
    return CoderivativeReport(member=member, domain_ok=True, lam=lam,
                              sigma=sigma, residuals=residuals,
                              witness=None if member else miss)


# ---------------------------------------------------------------------------
# Discrete certificate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteCertificate:
    """Multipliers and adjoint node sequences for a solved transcription.

    ``p`` maps each channel to its (k+1)-row adjoint sequence; ``pd`` is
    the dual of the accumulation update with the index-0 row fixed to
    zero by convention.  ``residuals`` holds one sup-norm per audited
    equation; the adjoint and transversality keys carry the stationarity
    content, the slackness keys should be exactly zero by construction,
    and ``nontriviality`` stores the value of the normalization sum
    (a value, not a residual).
    """

    lam: float
    eta: np.ndarray
    sigma: np.ndarray
    p: dict
    pd: np.ndarray
    z: np.ndarray
    thetas: dict
    subgradients: dict
    residuals: dict
    infeasible_at_terminal: bool = False
    sigma_ambiguous: bool = False

    @property
    def max_residual(self) -> float:
        """Largest adjoint/transversality residual (the convergence metric)."""
        return max(val for key, val in self.residuals.items()
                   if key.startswith(("adjoint_", "transversality_")))

    @property
    def nontriviality(self) -> float:
        return float(self.residuals["nontriviality"])

    def satisfied(self, tol: float) -> bool:
        slack = max(self.residuals[k] for k in
                    ("slackness_eta", "slackness_sigma", "complementarity"))
        return (self.max_residual <= tol and slack <= tol
                and self.nontriviality > tol)


def _terminal_eta(problem, zk, lam, p, w, v, thetas, z0_hint, tol):
    """Endpoint cone coefficients chosen on the active terminal gradients.

    With a free set-shift channel the endpoint condition on its adjoint
    pins the coefficients (nonnegative least squares); otherwise the
    coefficients stay free in the stationarity system and are fitted to
    the endpoint rows of the remaining control channels, again under the
    nonnegativity constraint.
    """
    spec = problem.spec
    mesh = problem.mesh
    k = mesh.k
    hk = mesh.h[k - 1]
    mset = spec.set
    s = mset.n_constraints
    pt = zk.x[k] - zk.u[k]
    act = active_set(mset, pt, tol)
    eta_T = np.zeros(s)
    infeasible = False
    if not act.indices:
        return eta_T, False
    G_A = mset.gradients(pt)[list(act.indices)]
    if "u" in spec.free_channels:
        coef, resid = nnls(G_A.T, p["u"][k])
        eta_T[list(act.indices)] = coef
        infeasible = resid > tol * (1.0 + float(np.linalg.norm(p["u"][k])))
        return eta_T, infeasible
    # No free shift channel: the terminal coefficients only enter the
    # stationarity system through the last adjoint coupling vector, so fit
    # them to the endpoint rows of the a/b channels (affine in eta).
    rows = []
    targets = []
    grad_phi = (np.asarray(spec.terminal_cost.grad(zk.x[k]), float)
                if spec.terminal_cost is not None else np.zeros(spec.n))

    def last_rows(eta_vec):
        px_k = -lam * grad_phi + mset.gradients(pt).T @ eta_vec
        zj = px_k - lam * (v["x"][k - 1] + thetas["x"][k - 1] / hk)
        out = []
        if spec.m:
            J1a = np.asarray(spec.f1.jac_ctrl(zk.a[k - 1], zk.x[k - 1]), float)
            out.append((p["a"][k] - p["a"][k - 1]) / hk
                       - lam * w["a"][k - 1] - J1a.T @ zj)
        if spec.d:
            J2b = np.asarray(spec.f2.jac_ctrl(zk.b[k - 1], zk.x[k - 1]), float)
            pd_k = hk * p["y"][k] - lam * thetas["y"][k - 1]
            out.append((p["b"][k] - p["b"][k - 1]) / hk - lam * w["b"][k - 1]
                       + (J2b.T @ pd_k) / hk - hk * (J2b.T @ zj))
        if not out:
            return np.zeros(0)
        return np.concatenate(out)

    base = last_rows(np.zeros(s))
    if base.size == 0:
        return eta_T, False
    cols = []
    for i in act.indices:
        e = np.zeros(s)
        e[i] = 1.0
        cols.append(last_rows(e) - base)
    M = np.stack(cols, axis=1)
    coef, _ = nnls(M, -base)
    eta_T[list(act.indices)] = coef
    return eta_T, False


def assemble_discrete_certificate(problem, zk: Trajectory, lam: float = 1.0,
                                  active_tol: float | None = None) -> DiscreteCertificate:
    """Build the full multiplier set for a solved discrete instance.

    The assembly walks backward from the endpoint conditions: the control
    adjoints are pinned by the velocity-multiplier formulas, the terminal
    state adjoint by the transversality condition with NNLS endpoint cone
    coefficients, and the state/accumulator adjoints by their backward
    difference rows.  Afterwards :func:`_audit_discrete` re-evaluates
    every equation independently, so residuals reflect actual
    stationarity of ``zk``, not assembly choices.

    Parameters
    ----------
    problem : DiscreteProblem
        The transcription that produced ``zk`` (supplies mesh, reference
        moments and the underlying :class:`~sweepopt.dynamics.ProblemSpec`).
    zk : Trajectory
        Candidate discrete solution (typically ``solve(...)`` output).
    lam : float
        Cost multiplier; the normal case is 1, and 0 probes the abnormal
        case (the audit then flags a degenerate certificate).
    """
    if lam < 0:
        raise CertificateError("the cost multiplier must be nonnegative")
    spec = problem.spec
    mesh = problem.mesh
    k = mesh.k
    h = mesh.h
    mset = spec.set
    n, s = spec.n, mset.n_constraints
    x, u = zk.x, zk.u

    thetas = _thetas(problem, zk)
    w, v = _stage_selections(spec, zk)
    vel = compute_eta(spec, zk, tol=active_tol)
    eta = np.zeros((k + 1, s))
    eta[:k] = vel.eta

    dims = {c: spec.channel_dim(c) for c in _CHANNELS}
    p = {c: np.zeros((k + 1, dims[c])) for c in ("x", "y", "u", "a", "b")}
    for c in ("u", "a", "b"):
        if dims[c]:
            p[c][1:] = lam * (v[c] + thetas[c] / h[:, None])

    tol_T = active_tol if active_tol is not None else default_active_tol(x[k] - u[k])
    eta[k], infeasible_T = _terminal_eta(problem, zk, lam, p, w, v, thetas,
                                         None, tol_T)
    grad_phi = (np.asarray(spec.terminal_cost.grad(x[k]), float)
                if spec.terminal_cost is not None else np.zeros(n))
    p["x"][k] = -lam * grad_phi + mset.gradients(x[k] - u[k]).T @ eta[k]

    pd = np.zeros((k + 1, n))
    z = np.zeros((k, n))
    sigma = np.zeros((k, s))
    sigma_ambiguous = False
    u_free = "u" in spec.free_channels

    for j in range(k - 1, -1, -1):
        hj = h[j]
        pt = x[j] - u[j]
        G = mset.gradients(pt)
        H = mset.hessians(pt)
        pd[j + 1] = hj * p["y"][j + 1] - lam * thetas["y"][j]
        zj = p["x"][j + 1] - lam * (v["x"][j] + thetas["x"][j] / hj)
        z[j] = zj
        act = active_set(mset, pt, active_tol)
        if act.indices:
            Hz = np.tensordot(eta[j], H, axes=1) @ zj
            if u_free:
                gvals = mset.values(pt)
                inner = G @ zj
                stol = (active_tol if active_tol is not None
                        else default_active_tol(pt))
                forced_zero, nonneg, free = _sigma_partition(
                    gvals, eta[j], inner, stol)
                rhs = -((p["u"][j + 1] - p["u"][j]) / hj
                        - lam * w["u"][j] - Hz)
                sigma[j], _, _ = _solve_signed_ls(G.T, rhs, nonneg, free)
            else:
                sigma_ambiguous = True
        J1x = np.asarray(spec.f1.jac_state(zk.a[j], x[j]), float)
        J2x = np.asarray(spec.f2.jac_state(zk.b[j], x[j]), float)
        Hz = (np.tensordot(eta[j], H, axes=1) @ zj if act.indices
              else np.zeros(n))
        p["y"][j] = p["y"][j + 1] - hj * zj
        rhs_x = (lam * w["x"][j] - (J2x.T @ pd[j + 1]) / hj
                 + J1x.T @ zj + hj * (J2x.T @ zj) - Hz - G.T @ sigma[j])
        p["x"][j] = p["x"][j + 1] - hj * rhs_x

    # Index-0 control adjoints from the first difference row of each channel.
    pt0 = x[0] - u[0]
    G0 = mset.gradients(pt0)
    H0 = mset.hessians(pt0)
    Hz0 = np.tensordot(eta[0], H0, axes=1) @ z[0]
    if dims["u"]:
        p["u"][0] = p["u"][1] - h[0] * (lam * w["u"][0] + Hz0 - G0.T @ sigma[0])
    if dims["a"]:
        J1a0 = np.asarray(spec.f1.jac_ctrl(zk.a[0], x[0]), float)
        p["a"][0] = p["a"][1] - h[0] * (lam * w["a"][0] + J1a0.T @ z[0])
    if dims["b"]:
        J2b0 = np.asarray(spec.f2.jac_ctrl(zk.b[0], x[0]), float)
        p["b"][0] = p["b"][1] - h[0] * (lam * w["b"][0]
                                        - (J2b0.T @ pd[1]) / h[0]
                                        + h[0] * (J2b0.T @ z[0]))

    residuals = _audit_discrete(problem, zk, lam, eta, sigma, p, pd, z,
                                thetas, w, v, vel, active_tol)
    return DiscreteCertificate(
        lam=float(lam), eta=eta, sigma=sigma, p=p, pd=pd, z=z,
        thetas=thetas, subgradients={"w": w, "v": v}, residuals=residuals,
        infeasible_at_terminal=infeasible_T, sigma_ambiguous=sigma_ambiguous)


def _audit_discrete(problem, zk, lam, eta, sigma, p, pd, z, thetas, w, v,
                    vel, active_tol):
    """Independently re-evaluate every certificate equation in sup norm."""
    spec = problem.spec
    mesh = problem.mesh
    k, h = mesh.k, mesh.h
    mset = spec.set
    x, u = zk.x, zk.u
    res: dict[str, float] = {}

    def _max(vals):
        return float(np.abs(np.asarray(vals, float)).max(initial=0.0))

    rows = {c: [] for c in ("x", "y", "u", "a", "b")}
    slack_eta = [0.0]
    slack_sigma = [0.0]
    comp = [0.0]
    for j in range(k):
        hj = h[j]
        pt = x[j] - u[j]
        gvals = mset.values(pt)
        G = mset.gradients(pt)
        H = mset.hessians(pt)
        stol = active_tol if active_tol is not None else default_active_tol(pt)
        zj = z[j]
        Hz = np.tensordot(eta[j], H, axes=1) @ zj
        J1x = np.asarray(spec.f1.jac_state(zk.a[j], x[j]), float)
        J1a = np.asarray(spec.f1.jac_ctrl(zk.a[j], x[j]), float)
        J2x = np.asarray(spec.f2.jac_state(zk.b[j], x[j]), float)
        J2b = np.asarray(spec.f2.jac_ctrl(zk.b[j], x[j]), float)
        rows["x"].append((p["x"][j + 1] - p["x"][j]) / hj - lam * w["x"][j]
                         + (J2x.T @ pd[j + 1]) / hj
                         - (J1x.T @ zj + hj * (J2x.T @ zj) - Hz
                            - G.T @ sigma[j]))
        rows["y"].append((p["y"][j + 1] - p["y"][j]) / hj - zj)
        if spec.channel_dim("u"):
            rows["u"].append((p["u"][j + 1] - p["u"][j]) / hj - lam * w["u"][j]
                             - (Hz - G.T @ sigma[j]))
        if spec.m:
            rows["a"].append((p["a"][j + 1] - p["a"][j]) / hj
                             - lam * w["a"][j] - J1a.T @ zj)
        if spec.d:
            rows["b"].append((p["b"][j + 1] - p["b"][j]) / hj - lam * w["b"][j]
                             + (J2b.T @ pd[j + 1]) / hj - hj * (J2b.T @ zj))
        inner = G @ zj
        inactive = gvals > stol
        slack_eta.append(_max(eta[j][inactive]) if inactive.any() else 0.0)
        # sigma sign conditions: zero where forced, nonnegative where required
        forced_zero, nonneg, _ = _sigma_partition(gvals, eta[j], inner, stol)
        if forced_zero.any():
            slack_sigma.append(_max(sigma[j][forced_zero]))
        if nonneg.any():
            slack_sigma.append(max(0.0, -float(sigma[j][nonneg].min())))
        pos = eta[j] > stol
        if pos.any():
            comp.append(_max(eta[j][pos] * inner[pos]))

    for c, key in (("x", "adjoint_x"), ("y", "adjoint_y"), ("u", "adjoint_u"),
                   ("a", "adjoint_a"), ("b", "adjoint_b")):
        res[key] = _max(np.concatenate(rows[c])) if rows[c] else 0.0

    pt_T = x[k] - u[k]
    g_T = mset.values(pt_T)
    G_T = mset.gradients(pt_T)
    stol_T = active_tol if active_tol is not None else default_active_tol(pt_T)
    grad_phi = (np.asarray(spec.terminal_cost.grad(x[k]), float)
                if spec.terminal_cost is not None else np.zeros(spec.n))
    res["transversality_x"] = _max(p["x"][k] + lam * grad_phi - G_T.T @ eta[k])
    res["transversality_u"] = (_max(p["u"][k] - G_T.T @ eta[k])
                               if spec.channel_dim("u") else 0.0)
    res["transversality_y"] = _max(p["y"][k])
    res["transversality_a"] = _max(p["a"][k]) if spec.m else 0.0
    res["transversality_b"] = _max(p["b"][k]) if spec.d else 0.0

    slack_eta.append(_max(eta[k][g_T > stol_T]) if (g_T > stol_T).any() else 0.0)
    res["slackness_eta"] = max(slack_eta)
    res["slackness_sigma"] = max(slack_sigma)
    res["complementarity"] = max(comp)
    res["primal"] = vel.max_residual

    pin = [0.0]
    for c in ("u", "a", "b"):
        if spec.channel_dim(c):
            pin.append(_max(p[c][1:] - lam * (v[c] + thetas[c] / h[:, None])))
    res["velocity_multiplier"] = max(pin)
    res["velocity_multiplier_y"] = _max(
        pd[1:] - (h[:, None] * p["y"][1:] - lam * thetas["y"]))

    res["nontriviality"] = (lam + float(np.linalg.norm(pd, axis=1).sum())
                            + float(np.linalg.norm(p["u"][0]))
                            if spec.channel_dim("u")
                            else lam + float(np.linalg.norm(pd, axis=1).sum()))
    return res


# ---------------------------------------------------------------------------
# Continuous certificate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContinuousCertificate:
    """Closed-form dual arcs with a grid-audited residual report.

    All arc fields are vectorized callables mapping a time array of
    shape (N,) to values of shape (N, dim).  ``p``/``p_dot`` and ``q``
    are keyed by channel; channels absent from the problem (or not free,
    for the set-shift channel) are simply omitted.  The measure is an
    atom at the final time plus an optional absolutely continuous
    density; singular-continuous parts are not representable.
    """

    lam: float
    p: dict
    p_dot: dict
    q: dict
    qy_dot: Callable
    eta: Callable | None
    eta_terminal: np.ndarray
    gamma_atom: np.ndarray
    gamma_ac: Callable | None = None
    residuals: dict = field(default_factory=dict)

    @property
    def max_residual(self) -> float:
        return max(val for key, val in self.residuals.items()
                   if key != "nontriviality")

    @property
    def nontriviality(self) -> float:
        return float(self.residuals["nontriviality"])

    def satisfied(self, tol: float) -> bool:
        return self.max_residual <= tol and self.nontriviality > tol


def _eval_channel(fn, t, dim):
    out = np.asarray(fn(t), float)
    return out.reshape(len(t), dim)


def verify_continuous_certificate(spec: ProblemSpec, arc: ReferenceArc,
                                  cert: ContinuousCertificate,
                                  num_nodes: int = 2001,
                                  tol: float = 1e-8) -> ContinuousCertificate:
    """Audit a continuous certificate against a candidate arc on a grid.

    Every stationarity condition is evaluated at ``num_nodes`` uniformly
    spaced times: the primal velocity representation, the multiplier
    slackness implications, the adjoint differential equation, the slope
    pins of the dual arcs, the measure-adjusted integral identities, the
    extended Volterra equation, the endpoint conditions and the
    nontriviality sum.  Tail integrals use cumulative Simpson quadrature,
    so closed-form certificates are checked to quadrature accuracy
    (far below ``tol`` on the default grid).

    Returns a copy of ``cert`` with the ``residuals`` mapping filled.
    """
    if getattr(spec.stage_cost, "time_dependent", False):
        raise CertificateError("time-dependent running costs are not certifiable")
    lam = cert.lam
    if lam < 0:
        raise CertificateError("the cost multiplier must be nonnegative")
    T = spec.horizon
    t = np.linspace(0.0, T, num_nodes)
    n = spec.n
    mset = spec.set
    s = mset.n_constraints
    u_free = "u" in spec.free_channels

    zbar = {c: _eval_channel(arc.channel(c), t, spec.channel_dim(c))
            for c in _CHANNELS}
    zdot = {c: _eval_channel(arc.derivative(c), t, spec.channel_dim(c))
            for c in _CHANNELS}
    w, vsel = _grid_selections(spec, zbar, zdot)

    pvals = {c: _eval_channel(cert.p[c], t, spec.channel_dim(c)) for c in cert.p}
    pdots = {c: _eval_channel(cert.p_dot[c], t, spec.channel_dim(c))
             for c in cert.p_dot}
    qvals = {c: _eval_channel(cert.q[c], t, spec.channel_dim(c)) for c in cert.q}
    qy = qvals["y"]
    qy_dot = _eval_channel(cert.qy_dot, t, n)
    eta_t = (_eval_channel(cert.eta, t, s) if cert.eta is not None
             else np.zeros((num_nodes, s)))

    f1v = spec.f1.value(zbar["a"], zbar["x"])
    f2v = spec.f2.value(zbar["b"], zbar["x"])

    # gamma tail: atom at T (included for every t <= T) plus optional density
    gamma_tail = np.tile(np.asarray(cert.gamma_atom, float), (num_nodes, 1))
    if cert.gamma_ac is not None:
        dens = _eval_channel(cert.gamma_ac, t, n)
        cum = cumulative_simpson(dens, x=t, axis=0, initial=0.0)
        gamma_tail = gamma_tail + (cum[-1] - cum)

    # tails of q^y and of the state-Jacobian-weighted q^y
    cum_qy = cumulative_simpson(qy, x=t, axis=0, initial=0.0)
    qy_tail = cum_qy[-1] - cum_qy
    J2x_qy = np.empty((num_nodes, n))
    J2b_qy_rows = []
    for i in range(num_nodes):
        J2x = np.asarray(spec.f2.jac_state(zbar["b"][i], zbar["x"][i]), float)
        J2x_qy[i] = J2x.T @ qy[i]
        if spec.d:
            J2b = np.asarray(spec.f2.jac_ctrl(zbar["b"][i], zbar["x"][i]), float)
            J2b_qy_rows.append(J2b.T @ qy[i])
    cum_w = cumulative_simpson(J2x_qy, x=t, axis=0, initial=0.0)
    weighted_tail = cum_w[-1] - cum_w

    res: dict[str, float] = {}

    def _sup(arr):
        return float(np.abs(np.asarray(arr, float)).max(initial=0.0))

    # primal representation and slackness
    gvals = np.empty((num_nodes, s))
    primal = np.empty((num_nodes, n))
    eta_slack = 0.0
    eta_comp = 0.0
    coupling = lam * vsel["x"] - qvals["x"]
    for i in range(num_nodes):
        pt = zbar["x"][i] - zbar["u"][i]
        gvals[i] = mset.values(pt)
        G = mset.gradients(pt)
        primal[i] = zdot["x"][i] + f1v[i] + zbar["y"][i] - G.T @ eta_t[i]
        atol = default_active_tol(pt)
        inactive = gvals[i] > atol
        if inactive.any():
            eta_slack = max(eta_slack, _sup(eta_t[i][inactive]))
        pos = eta_t[i] > atol
        if pos.any():
            eta_comp = max(eta_comp, _sup(eta_t[i][pos] * (G[pos] @ coupling[i])))
    res["primal"] = _sup(primal)
    res["eta_slackness"] = eta_slack
    res["eta_coderivative"] = eta_comp

    # adjoint differential equation, one row per present channel
    J1x_c = np.empty((num_nodes, n))
    J1a_c = np.empty((num_nodes, spec.m)) if spec.m else np.zeros((num_nodes, 0))
    for i in range(num_nodes):
        J1x = np.asarray(spec.f1.jac_state(zbar["a"][i], zbar["x"][i]), float)
        J1x_c[i] = J1x.T @ coupling[i]
        if spec.m:
            J1a = np.asarray(spec.f1.jac_ctrl(zbar["a"][i], zbar["x"][i]), float)
            J1a_c[i] = J1a.T @ coupling[i]
    res["adjoint_p_x"] = _sup(pdots["x"] - lam * w["x"] - J1x_c)
    res["adjoint_p_y"] = _sup(pdots["y"] - coupling)
    if u_free:
        res["adjoint_p_u"] = _sup(pdots["u"] - lam * w["u"])
    if spec.m:
        res["adjoint_p_a"] = _sup(pdots["a"] - lam * w["a"] - J1a_c)
    if spec.d:
        res["adjoint_p_b"] = _sup(pdots["b"] - lam * w["b"])

    # slope pins of the dual arcs
    if u_free:
        pin_u = (lam * spec.cost_u.grad(zdot["u"]) if spec.cost_u is not None
                 else np.zeros((num_nodes, n)))
        res["velocity_q_u"] = _sup(qvals["u"] - pin_u)
    if spec.m and "a" in cert.q:
        pin_a = (lam * spec.cost_a.grad(zdot["a"]) if spec.cost_a is not None
                 else np.zeros((num_nodes, spec.m)))
        res["velocity_q_a"] = _sup(qvals["a"] - pin_a)
    if spec.d and "b" in cert.q:
        pin_b = (lam * spec.cost_b.grad(zdot["b"]) if spec.cost_b is not None
                 else np.zeros((num_nodes, spec.d)))
        res["velocity_q_b"] = _sup(qvals["b"] - pin_b)

    # measure-adjusted integral identities
    res["measure_q_x"] = _sup(qvals["x"] - pvals["x"] - gamma_tail - weighted_tail)
    res["measure_q_y"] = _sup(qy - pvals["y"] + qy_tail)
    if u_free:
        res["measure_q_u"] = _sup(qvals["u"] - pvals["u"] + gamma_tail)
    if spec.m and "a" in cert.q:
        res["measure_q_a"] = _sup(qvals["a"] - pvals["a"])
    if spec.d and "b" in cert.q:
        b_tail = np.stack(J2b_qy_rows)
        cum_b = cumulative_simpson(b_tail, x=t, axis=0, initial=0.0)
        res["measure_q_b"] = _sup(qvals["b"] - pvals["b"]
                                  - (cum_b[-1] - cum_b))

    # extended Volterra condition
    res["volterra"] = _sup(qy_dot - (lam * vsel["x"] - pvals["x"] - gamma_tail
                                     - weighted_tail + qy))

    # endpoint conditions
    pt_T = zbar["x"][-1] - zbar["u"][-1]
    G_T = mset.gradients(pt_T)
    g_T = mset.values(pt_T)
    atol_T = default_active_tol(pt_T)
    grad_phi = (np.asarray(spec.terminal_cost.grad(zbar["x"][-1]), float)
                if spec.terminal_cost is not None else np.zeros(n))
    res["terminal_x"] = _sup(-pvals["x"][-1] + G_T.T @ cert.eta_terminal
                             - lam * grad_phi)
    res["terminal_y"] = _sup(pvals["y"][-1])
    if u_free:
        res["terminal_u"] = _sup(pvals["u"][-1] + G_T.T @ cert.eta_terminal)
    if spec.m and "a" in pvals:
        res["terminal_a"] = _sup(pvals["a"][-1])
    if spec.d and "b" in pvals:
        res["terminal_b"] = _sup(pvals["b"][-1])
    cone_viol = max(0.0, -float(cert.eta_terminal.min(initial=0.0)))
    off_active = cert.eta_terminal[g_T > atol_T]
    if off_active.size:
        cone_viol = max(cone_viol, _sup(off_active))
    res["terminal_cone"] = cone_viol

    # nontriviality: lam + |q_u(0)| + |p(T)| + int |q_y|
    qy_norms = np.linalg.norm(qy, axis=1)
    total = lam + float(simpson(qy_norms, x=t))
    total += float(np.linalg.norm(np.concatenate(
        [pvals[c][-1] for c in pvals])))
    if u_free:
        total += float(np.linalg.norm(qvals["u"][0]))
    res["nontriviality"] = total

    return replace(cert, residuals=res)


def _grid_selections(spec: ProblemSpec, zbar: dict, zdot: dict):
    """Running-cost gradient selections along a sampled arc."""
    npts = zbar["x"].shape[0]
    stage = spec.stage_cost
    if stage is not None and getattr(stage, "forms", None):
        yform = stage.forms.get("y")
        if yform is not None and (np.any(yform.Q) or
                                  (yform.r is not None and np.any(yform.r))):
            raise CertificateError(
                "stage costs depending on the integral state have no "
                "certificate slot")
    args = (zbar["x"], zbar["y"], zbar["u"], zbar["a"], zbar["b"], zdot["x"])
    w = {}
    for c in ("x", "u", "a", "b"):
        dim = spec.channel_dim(c)
        if stage is not None and dim:
            w[c] = np.asarray(stage.grad(c, *args), float).reshape(npts, dim)
        else:
            w[c] = np.zeros((npts, dim))
    v = {"x": (np.asarray(stage.grad("xdot", *args), float).reshape(npts, spec.n)
               if stage is not None else np.zeros((npts, spec.n)))}
    return w, v


# ---------------------------------------------------------------------------
# Closed-form certificate for the two-diode benchmark
# ---------------------------------------------------------------------------


def benchmark_certificate(case: str, v2: float | None = None,
                          num_nodes: int = 2001):
    """Closed-form dual arcs for a benchmark endpoint mode, grid-audited.

    Builds the candidate arc for ``case`` at its optimal terminal dual
    value (or at an explicit ``v2``), attaches the matching closed-form
    adjoints -- constant state adjoint, exponential accumulator duals, a
    single measure atom at the final time -- and runs
    :func:`verify_continuous_certificate` so the returned certificate
    carries residuals.

    Returns
    -------
    (ContinuousCertificate, BenchmarkCandidate)
    """
    from . import circuits

    if case not in circuits.MODES:
        raise ValueError(f"unknown case {case!r}")
    if v2 is None:
        v2 = circuits.benchmark_optimize_mode(case)[0]
    cand = circuits.benchmark_candidate(case, v2)
    lam = 1.0
    v1 = cand.v1
    alpha = lam * (v1 + v2)
    delta = lam * (v1 - v2)

    def qy(t):
        t = np.asarray(t, float)
        common = -0.5 * alpha * np.exp(t - 1.0) + 0.5 * alpha
        osc = delta / 6.0 * np.exp(1.0 - t) - delta / 6.0 * np.exp(2.0 * t - 2.0)
        return np.stack([common + osc, common - osc], axis=-1)

    def qy_dot(t):
        t = np.asarray(t, float)
        common = -0.5 * alpha * np.exp(t - 1.0)
        osc = -delta / 6.0 * np.exp(1.0 - t) - delta / 3.0 * np.exp(2.0 * t - 2.0)
        return np.stack([common + osc, common - osc], axis=-1)

    def _ramp(t):
        # the antisymmetric part of the state dual: one third exponential
        # decay plus one sixth doubled-rate growth, centred to vanish at T
        return (delta / 3.0 * np.exp(1.0 - t)
                + delta / 6.0 * np.exp(2.0 * t - 2.0) - 0.5 * delta)

    def qx(t):
        t = np.asarray(t, float)
        e = _ramp(t)
        return np.stack([lam * v1 + e, lam * v2 - e], axis=-1)

    x2_T = float(cand.arc.channel("x")(np.array([1.0]))[0, 1])
    px_T = np.array([0.0, -lam * x2_T])
    gamma_atom = np.array([lam * v1, lam * v2]) - px_T

    def px(t):
        t = np.asarray(t, float)
        return np.tile(px_T, (len(t), 1))

    def zeros2(t):
        t = np.asarray(t, float)
        return np.zeros((len(t), 2))

    def py(t):
        t = np.asarray(t, float)
        P = (delta / 3.0 * (np.exp(1.0 - t) - 1.0)
             + delta / 12.0 * (1.0 - np.exp(2.0 * t - 2.0))
             - 0.5 * delta * (1.0 - t))
        base = 1.0 - t
        return np.stack([lam * v1 * base + P, lam * v2 * base - P], axis=-1)

    def py_dot(t):
        return -qx(t)

    cert = ContinuousCertificate(
        lam=lam,
        p={"x": px, "y": py, "a": zeros2},
        p_dot={"x": zeros2, "y": py_dot, "a": zeros2},
        q={"x": qx, "y": qy, "a": zeros2},
        qy_dot=qy_dot,
        eta=None,
        eta_terminal=np.zeros(2),
        gamma_atom=gamma_atom,
    )
    spec = circuits.benchmark_instance()
    cert = verify_continuous_certificate(spec, cand.arc, cert,
                                         num_nodes=num_nodes)
    return cert, cand
