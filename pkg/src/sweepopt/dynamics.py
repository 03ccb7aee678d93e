"""Controlled integro-differential sweeping dynamics.

The state pair (x, y) obeys

    -dx/dt  in  N_{C + u(t)}(x) + f1(a(t), x) + y(t),      y(0) = 0,
     dy/dt  =   f2(b(t), x),                               x(0) = x0,

with the mixed feasibility requirement g(x(t) - u(t)) >= 0.  This module
integrates the dynamics with the implicit catching-up projection scheme,
rebuilds discrete feasible quintuples from a continuous reference arc,
and supplies the discrete Gronwall bound and W12 trajectory distances used
throughout the solver stack.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import nnls

from .geometry import MovingSet, active_set, normal_cone_decompose, project

__all__ = [
    "LipschitzConstants",
    "LinearField",
    "CallableField",
    "QuadraticForm",
    "zero_form",
    "QuadraticStageCost",
    "QuadraticTerminal",
    "CallableTerminal",
    "ProblemSpec",
    "Mesh",
    "Controls",
    "Trajectory",
    "ReferenceArc",
    "BoundReport",
    "W12Distance",
    "Reconstruction",
    "step",
    "implicit_step_certificate",
    "simulate",
    "reconstruct_discrete_feasible",
    "discrete_gronwall",
    "w12_distance",
    "controls_from_reference",
    "feasibility_violation",
]


# ---------------------------------------------------------------------------
# Problem data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LipschitzConstants:
    """Growth/Lipschitz constants of the fields f1, f2."""

    L: float = 0.0
    L1: float = 0.0
    L2: float = 0.0
    alpha1: float = 0.0
    alpha2: float = 0.0


@dataclass(frozen=True)
class LinearField:
    """Field w(c, x) = c A_ctrl^T + x A_state^T + offset, broadcast over rows.

    Used for both the drift f1 (ctrl argument a) and the integral kernel f2
    (ctrl argument b).  Jacobians are the constant matrices.
    """

    A_ctrl: np.ndarray
    A_state: np.ndarray
    offset: np.ndarray | None = None

    def value(self, c, x):
        x = np.asarray(x, dtype=float)
        c = np.asarray(c, dtype=float)
        out = x @ self.A_state.T
        if self.A_ctrl.shape[1]:
            out = out + c @ self.A_ctrl.T
        if self.offset is not None:
            out = out + self.offset
        return out

    def jac_state(self, c, x):
        return self.A_state

    def jac_ctrl(self, c, x):
        return self.A_ctrl


class CallableField:
    """Wrap plain callables (c, x) -> value with optional analytic Jacobians.

    Missing Jacobians fall back to central finite differences; the value
    callable must broadcast over leading batch axes.
    """

    def __init__(self, n, ctrl_dim, value, jac_state=None, jac_ctrl=None, fd_step=1e-7):
        self.n = n
        self.ctrl_dim = ctrl_dim
        self._value = value
        self._jac_state = jac_state
        self._jac_ctrl = jac_ctrl
        self._fd = fd_step

    def value(self, c, x):
        return np.asarray(self._value(np.asarray(c, float), np.asarray(x, float)), float)

    def _fd_jac(self, f, v, dim):
        cols = []
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = self._fd
            cols.append((f(v + e) - f(v - e)) / (2 * self._fd))
        return np.stack(cols, axis=-1) if cols else np.zeros((self.n, 0))

    def jac_state(self, c, x):
        if self._jac_state is not None:
            return np.asarray(self._jac_state(c, x), float)
        return self._fd_jac(lambda xv: self.value(c, xv), np.asarray(x, float), len(x))

    def jac_ctrl(self, c, x):
        if self._jac_ctrl is not None:
            return np.asarray(self._jac_ctrl(c, x), float)
        return self._fd_jac(lambda cv: self.value(cv, x), np.asarray(c, float), len(c))


@dataclass(frozen=True)
class QuadraticForm:
    """q(v) = 0.5 v'Qv + r'v + const, vectorized over leading axes."""

    Q: np.ndarray
    r: np.ndarray | None = None
    const: float = 0.0

    def value(self, v):
        v = np.asarray(v, dtype=float)
        out = 0.5 * np.einsum("...i,ij,...j->...", v, self.Q, v) + self.const
        if self.r is not None:
            out = out + v @ self.r
        return out

    def grad(self, v):
        v = np.asarray(v, dtype=float)
        out = v @ self.Q.T
        if self.r is not None:
            out = out + self.r
        return out


def zero_form(dim: int) -> QuadraticForm:
    return QuadraticForm(Q=np.zeros((dim, dim)))


_CHANNELS = ("x", "y", "u", "a", "b")


@dataclass(frozen=True)
class QuadraticStageCost:
    """Separable stage cost l1(x, y, u, a, b, xdot) = sum of per-channel forms.

    Channels without a form contribute zero; gradients follow suit.
    """

    forms: dict = field(default_factory=dict)  # channel name -> QuadraticForm

    def value(self, x, y, u, a, b, xdot):
        args = {"x": x, "y": y, "u": u, "a": a, "b": b, "xdot": xdot}
        total = 0.0
        for name, form in self.forms.items():
            total = total + form.value(args[name])
        if np.isscalar(total):
            total = np.zeros(np.asarray(x, float).shape[:-1])
        return total

    def grad(self, channel, x, y, u, a, b, xdot):
        args = {"x": x, "y": y, "u": u, "a": a, "b": b, "xdot": xdot}
        v = np.asarray(args[channel], dtype=float)
        form = self.forms.get(channel)
        if form is None:
            return np.zeros_like(v)
        return form.grad(v)


@dataclass(frozen=True)
class QuadraticTerminal:
    """phi(x) = 0.5 x'Qx + r'x + const."""

    Q: np.ndarray
    r: np.ndarray | None = None
    const: float = 0.0

    def value(self, x):
        return QuadraticForm(self.Q, self.r, self.const).value(x)

    def grad(self, x):
        return QuadraticForm(self.Q, self.r, self.const).grad(x)


class CallableTerminal:
    def __init__(self, value, grad):
        self._v = value
        self._g = grad

    def value(self, x):
        return np.asarray(self._v(np.asarray(x, float)), float)

    def grad(self, x):
        return np.asarray(self._g(np.asarray(x, float)), float)


@dataclass(frozen=True)
class ProblemSpec:
    """Full problem data: geometry, fields, costs, horizon and initial state.

    ``free_channels`` records which control channels (subset of
    {"u", "a", "b"}) an optimizer may vary; the remaining channels are data.
    Channels with zero dimension are never free.
    """

    set: MovingSet
    n: int
    m: int
    d: int
    f1: object
    f2: object
    horizon: float
    x0: np.ndarray
    lipschitz: LipschitzConstants = field(default_factory=LipschitzConstants)
    terminal_cost: object = None
    stage_cost: object = None
    cost_u: QuadraticForm | None = None
    cost_a: QuadraticForm | None = None
    cost_b: QuadraticForm | None = None
    free_channels: frozenset = frozenset({"u", "a", "b"})
    label: str = "problem"

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        free = frozenset(self.free_channels)
        if self.m == 0:
            free = free - {"a"}
        if self.d == 0:
            free = free - {"b"}
        object.__setattr__(self, "free_channels", free)

    def channel_dim(self, channel: str) -> int:
        return {"x": self.n, "y": self.n, "u": self.n, "a": self.m, "b": self.d}[channel]


# ---------------------------------------------------------------------------
# Mesh / trajectory containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mesh:
    """Nodes 0 = t_0 < ... < t_k = T with max step at most T/k."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("mesh needs at least two nodes")
        steps = np.diff(nodes)
        if np.any(steps <= 0):
            raise ValueError("mesh nodes must be strictly increasing")
        T = nodes[-1] - nodes[0]
        if steps.max() > T / self.k * (1 + 1e-12):
            raise ValueError("max mesh step exceeds T/k")

    @classmethod
    def uniform(cls, T: float, k: int) -> "Mesh":
        return cls(np.linspace(0.0, float(T), int(k) + 1))

    @property
    def k(self) -> int:
        return self.nodes.size - 1

    @property
    def h(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])


@dataclass(frozen=True)
class Controls:
    """Node-indexed control channels on a mesh."""

    mesh: Mesh
    u: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        kp1 = self.mesh.k + 1
        for name in ("u", "a", "b"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(kp1, -1) if arr.size else arr.reshape(kp1, 0)
            object.__setattr__(self, name, arr)
            if arr.shape[0] != kp1:
                raise ValueError(f"control '{name}' must have k+1 = {kp1} rows")


def _interp_rows(nodes, values, t):
    """Piecewise-linear interpolation of row-stacked values at times t."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.empty(t.shape + (values.shape[1],))
    for j in range(values.shape[1]):
        out[..., j] = np.interp(t, nodes, values[:, j])
    return out


@dataclass(frozen=True)
class Trajectory:
    """Piecewise-linear quintuple z = (x, y, u, a, b) on a mesh."""

    mesh: Mesh
    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        kp1 = self.mesh.k + 1
        for name in ("x", "y", "u", "a", "b"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(kp1, -1)
            object.__setattr__(self, name, arr)
            if arr.shape[0] != kp1:
                raise ValueError(f"channel '{name}' must have k+1 = {kp1} rows")

    def channel(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def stacked(self) -> np.ndarray:
        """All channels concatenated per node, shape (k+1, 2n+n+m+d)."""
        return np.concatenate([self.x, self.y, self.u, self.a, self.b], axis=1)

    def value(self, name: str, t) -> np.ndarray:
        return _interp_rows(self.mesh.nodes, self.channel(name), t)

    def slopes(self, name: str) -> np.ndarray:
        """Constant derivative on each interval, shape (k, dim)."""
        arr = self.channel(name)
        return np.diff(arr, axis=0) / self.mesh.h[:, None]

    def to_csv(self, path) -> None:
        header = ["t"]
        dims = {name: self.channel(name).shape[1] for name in ("x", "y", "u", "a", "b")}
        for name in ("x", "y", "u", "a", "b"):
            header.extend(f"{name}{i + 1}" for i in range(dims[name]))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            stacked = self.stacked()
            for j, t in enumerate(self.mesh.nodes):
                row = [repr(float(t))] + [repr(float(v)) for v in stacked[j]]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
        data = np.asarray(rows)
        if header[0] != "t":
            raise ValueError("first CSV column must be t")
        counts = {name: sum(1 for col in header if col.startswith(name) and col[len(name):].isdigit())
                  for name in ("x", "y", "u", "a", "b")}
        mesh = Mesh(data[:, 0])
        offset = 1
        channels = {}
        for name in ("x", "y", "u", "a", "b"):
            c = counts[name]
            channels[name] = data[:, offset:offset + c]
            offset += c
        return cls(mesh=mesh, **channels)


@dataclass(frozen=True)
class ReferenceArc:
    """Continuous reference quintuple given by vectorized callables of t.

    Derivative callables are required wherever the consumer needs them
    (reconstruction needs x_dot; certificate assembly needs all five).
    Missing channels default to zero functions of the declared dimension.
    """

    T: float
    n: int
    m: int
    d: int
    x: Callable
    y: Callable
    u: Callable
    a: Callable
    b: Callable
    x_dot: Callable | None = None
    y_dot: Callable | None = None
    u_dot: Callable | None = None
    a_dot: Callable | None = None
    b_dot: Callable | None = None
    # Interior times where the derivatives may jump (piecewise references);
    # quadrature consumers split intervals here to stay exact.
    breaks: np.ndarray | None = None

    def channel(self, name: str) -> Callable:
        return getattr(self, name)

    def derivative(self, name: str) -> Callable:
        fn = getattr(self, f"{name}_dot")
        if fn is None:
            raise ValueError(f"reference arc lacks a derivative for channel '{name}'")
        return fn

    def sample(self, mesh: Mesh) -> Trajectory:
        t = mesh.nodes
        return Trajectory(mesh=mesh, x=self.x(t), y=self.y(t), u=self.u(t),
                          a=self.a(t), b=self.b(t))

    @classmethod
    def from_trajectory(cls, traj: Trajectory) -> "ReferenceArc":
        """Linear interpolant of a discrete trajectory, with step derivatives."""
        nodes = traj.mesh.nodes

        def interp(name):
            vals = traj.channel(name)
            return lambda t, vals=vals: _interp_rows(nodes, vals, t)

        def deriv(name):
            slopes = traj.slopes(name)

            def fn(t, slopes=slopes):
                t = np.atleast_1d(np.asarray(t, dtype=float))
                idx = np.clip(np.searchsorted(nodes, t, side="right") - 1, 0, len(nodes) - 2)
                return slopes[idx]

            return fn

        return cls(
            T=traj.mesh.horizon, n=traj.x.shape[1], m=traj.a.shape[1], d=traj.b.shape[1],
            x=interp("x"), y=interp("y"), u=interp("u"), a=interp("a"), b=interp("b"),
            x_dot=deriv("x"), y_dot=deriv("y"), u_dot=deriv("u"),
            a_dot=deriv("a"), b_dot=deriv("b"),
            breaks=nodes[1:-1].copy(),
        )


def controls_from_reference(spec: ProblemSpec, mesh: Mesh, ref: ReferenceArc) -> Controls:
    t = mesh.nodes
    return Controls(mesh=mesh, u=ref.u(t), a=ref.a(t), b=ref.b(t))


# ---------------------------------------------------------------------------
# Stepping and simulation
# ---------------------------------------------------------------------------


def step(spec: ProblemSpec, x_j, y_j, u_next, a_j, b_j, h: float):
    """One implicit catching-up step.

    The memory channel advances by the left-endpoint rectangle rule
    y+ = y + h f2(b_j, x_j); the state is the projection of the Euler
    predictor onto the set shifted to the *next* control position:
    x+ = proj_{C + u_next}(x_j - h (f1(a_j, x_j) + y+)).

    Returns
    -------
    (x_next, y_next)
    """
    y_next = np.asarray(y_j, dtype=float) + h * spec.f2.value(b_j, x_j)
    drift = spec.f1.value(a_j, x_j)
    if not np.all(np.isfinite(drift)):
        raise FloatingPointError("NaN in drift evaluation")
    x_next = project(spec.set, u_next, np.asarray(x_j, dtype=float) - h * (drift + y_next))
    return x_next, y_next


def implicit_step_certificate(spec: ProblemSpec, x_j, x_next, y_next, u_next, a_j, b_j, h: float):
    """Normal-cone certificate of the implicit step.

    Decomposes -[(x_next - x_j)/h + f1(a_j, x_j) + y_next] over the active
    gradients at x_next - u_next; the residual vanishes (up to NNLS
    accuracy) exactly when the step satisfies the discrete inclusion.
    """
    w = -((np.asarray(x_next, float) - np.asarray(x_j, float)) / h
          + spec.f1.value(a_j, x_j) + np.asarray(y_next, float))
    return normal_cone_decompose(spec.set, x_next, u_next, w)


def simulate(spec: ProblemSpec, controls: Controls):
    """Integrate the sweeping process for given node controls.

    Returns the trajectory together with a :class:`BoundReport` that
    evaluates the a-priori velocity estimates along the computed solution
    and flags nodes exceeding them by more than 5% (diagnostic only; the
    estimates are exact in the continuous limit).
    """
    mesh = controls.mesh
    k = mesh.k
    h = mesh.h
    x = np.empty((k + 1, spec.n))
    y = np.zeros((k + 1, spec.n))
    x[0] = spec.x0
    viol = spec.set.values(x[0] - controls.u[0])
    if np.min(viol, initial=0.0) < -1e-9 * (1 + np.linalg.norm(x[0])):
        raise ValueError("initial state violates the mixed constraint g(x0 - u0) >= 0")
    cert_residuals = np.zeros(k)
    for j in range(k):
        x[j + 1], y[j + 1] = step(spec, x[j], y[j], controls.u[j + 1],
                                  controls.a[j], controls.b[j], h[j])
        cert = implicit_step_certificate(spec, x[j], x[j + 1], y[j + 1],
                                         controls.u[j + 1], controls.a[j], controls.b[j], h[j])
        cert_residuals[j] = cert.residual
    traj = Trajectory(mesh=mesh, x=x, y=y, u=controls.u, a=controls.a, b=controls.b)
    report = _bound_report(spec, traj, cert_residuals)
    return traj, report


def feasibility_violation(spec: ProblemSpec, traj: Trajectory) -> float:
    """Largest violation of g(x_j - u_j) >= 0 over all nodes (0 if feasible)."""
    worst = 0.0
    for j in range(traj.mesh.k + 1):
        vals = spec.set.values(traj.x[j] - traj.u[j])
        worst = max(worst, float(max(0.0, -np.min(vals, initial=0.0))))
    return worst


# ---------------------------------------------------------------------------
# A-priori velocity estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundReport:
    """Evaluation of the a-priori velocity bounds along a trajectory.

    ``l_tilde`` is evaluated literally as printed (the inner integral of
    ||b|| runs over the whole horizon); ``l_tilde_variant`` replaces that
    inner upper limit by the outer integration variable, the likely
    intended reading.  Each estimate maps an interval index to the observed
    left-endpoint value and the bound's right-hand side; ``flagged`` lists
    intervals whose observation exceeds the bound by more than 5%.
    """

    l_tilde: float
    l_tilde_variant: float
    observed: dict
    bounds: dict
    flagged: dict
    certificate_residuals: np.ndarray

    @property
    def exceeded(self) -> bool:
        return any(len(v) for v in self.flagged.values())

    def to_dict(self) -> dict:
        return {
            "l_tilde": self.l_tilde,
            "l_tilde_variant": self.l_tilde_variant,
            "observed": {k: list(map(float, v)) for k, v in self.observed.items()},
            "bounds": {k: list(map(float, v)) for k, v in self.bounds.items()},
            "flagged": {k: list(map(int, v)) for k, v in self.flagged.items()},
            "max_certificate_residual": float(self.certificate_residuals.max(initial=0.0)),
        }


def _bound_report(spec: ProblemSpec, traj: Trajectory, cert_residuals) -> BoundReport:
    mesh = traj.mesh
    T = mesh.horizon
    t = mesh.nodes
    h = mesh.h
    alpha1 = spec.lipschitz.alpha1
    alpha2 = spec.lipschitz.alpha2

    a_norm = np.linalg.norm(traj.a, axis=1) if traj.a.shape[1] else np.zeros(mesh.k + 1)
    b_norm = np.linalg.norm(traj.b, axis=1) if traj.b.shape[1] else np.zeros(mesh.k + 1)
    beta1 = np.maximum(a_norm, alpha1)
    btilde = 2.0 * np.maximum(beta1, alpha2)

    u_slope = np.linalg.norm(traj.slopes("u"), axis=1)
    x_slope = traj.slopes("x")
    y_slope = traj.slopes("y")

    # Left-rectangle cumulative integrals, matching the scheme's quadrature.
    def cum_left(vals):
        out = np.zeros(mesh.k + 1)
        out[1:] = np.cumsum(vals[:-1] * h)
        return out

    int_b = cum_left(b_norm)
    int_btilde = cum_left(btilde)
    E = math.exp(float(cum_left(btilde + 1.0)[-1]))
    x0_norm = float(np.linalg.norm(spec.x0))
    # Literal form: the inner ||b|| integral runs over [0, T] for every s.
    inner_literal = np.full(mesh.k + 1, int_b[-1])
    inner_variant = int_b
    l_lit = x0_norm * E + E * float(cum_left(np.concatenate([u_slope, [0.0]]) + 2 * beta1 + 2 * inner_literal)[-1])
    l_var = x0_norm * E + E * float(cum_left(np.concatenate([u_slope, [0.0]]) + 2 * beta1 + 2 * inner_variant)[-1])

    f1_vals = spec.f1.value(traj.a[:-1], traj.x[:-1]).reshape(mesh.k, spec.n)
    obs_identity = np.linalg.norm(x_slope + f1_vals + traj.y[:-1], axis=1)
    obs_state = np.linalg.norm(x_slope, axis=1)
    obs_memory = np.linalg.norm(y_slope, axis=1)

    bnd_identity = u_slope + (1 + l_lit) * beta1[:-1] + int_b[:-1] + T * alpha2 * l_lit
    bnd_state = u_slope + 2 * (1 + l_lit) * beta1[:-1] + 2 * int_btilde[:-1] + 2 * T * alpha2 * l_lit
    bnd_memory = b_norm[:-1] + alpha2 * l_lit

    observed = {"velocity_identity": obs_identity, "state_rate": obs_state, "memory_rate": obs_memory}
    bounds = {"velocity_identity": bnd_identity, "state_rate": bnd_state, "memory_rate": bnd_memory}
    flagged = {
        name: np.flatnonzero(observed[name] > 1.05 * np.maximum(bounds[name], 1e-30)).tolist()
        for name in observed
    }
    return BoundReport(
        l_tilde=float(l_lit),
        l_tilde_variant=float(l_var),
        observed=observed,
        bounds=bounds,
        flagged=flagged,
        certificate_residuals=np.asarray(cert_residuals, dtype=float),
    )


# ---------------------------------------------------------------------------
# Discrete feasible reconstruction from a continuous reference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Reconstruction:
    trajectory: Trajectory
    distance_to_reference: "W12Distance"


def reconstruct_discrete_feasible(spec: ProblemSpec, reference: ReferenceArc, k: int) -> Reconstruction:
    """Discrete feasible quintuple tracking a continuous reference arc.

    The control shift is re-centred at every node, u_j := x_j - xbar(t_j)
    + ubar(t_j), which keeps x_j - u_j = xbar(t_j) - ubar(t_j) feasible by
    construction.  The state velocity is the nearest point of the discrete
    right-hand side -[N_{C+u_j}(x_j) + f1(a_j, x_j) + y_{j+1}] to the
    reference velocity xbar'(t_j): writing the cone over active gradients,
    the nearest-point problem is a nonnegative least squares solve.  The
    memory channel uses the rectangle rule with the reference data.

    Returns the trajectory together with its W12 distance to the reference
    (computed against the reference sampled on the same mesh).
    """
    mesh = Mesh.uniform(reference.T, k)
    t = mesh.nodes
    h = mesh.h
    xbar = reference.x(t)
    ubar = reference.u(t)
    abar = reference.a(t)
    bbar = reference.b(t)
    xdot = reference.derivative("x")(t)

    x = np.empty((k + 1, spec.n))
    y = np.zeros((k + 1, spec.n))
    u = np.empty((k + 1, spec.n))
    x[0] = xbar[0]
    u[0] = ubar[0]
    for j in range(k):
        y[j + 1] = y[j] + h[j] * spec.f2.value(bbar[j], x[j])
        q = spec.f1.value(abar[j], x[j]) + y[j + 1]
        base = x[j] - u[j]
        act = active_set(spec.set, base)
        target = -xdot[j] - q
        if act.indices:
            G_A = spec.set.gradients(base)[list(act.indices)]
            lam, _ = nnls(G_A.T, -target)
            nu = -G_A.T @ lam
        else:
            nu = np.zeros(spec.n)
        v = -(q + nu)
        x[j + 1] = x[j] + h[j] * v
        u[j + 1] = x[j + 1] - xbar[j + 1] + ubar[j + 1]
    traj = Trajectory(mesh=mesh, x=x, y=y, u=u, a=abar, b=bbar)
    dist = w12_distance(traj, reference.sample(mesh))
    return Reconstruction(trajectory=traj, distance_to_reference=dist)


# ---------------------------------------------------------------------------
# Gronwall bound and W12 distance
# ---------------------------------------------------------------------------


def discrete_gronwall(e0: float, sigmas, rhos, gammas, i: int) -> float:
    """Closed-form majorant of the perturbed discrete Gronwall recursion.

    Bounds any sequence with e_{j+1} <= sigma_j + rho_j * sum_{k<j} e_k +
    (1 + gamma_j) e_j by

        e_i <= (e_0 + sum_{k<i} sigma_k) * exp(sum_{k<i} (k rho_k + gamma_k)).

    All inputs must be nonnegative and i at most the data length.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    rhos = np.asarray(rhos, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    if e0 < 0 or np.any(sigmas < 0) or np.any(rhos < 0) or np.any(gammas < 0):
        raise ValueError("Gronwall inputs must be nonnegative")
    if i > min(sigmas.size, rhos.size, gammas.size):
        raise ValueError("index i exceeds coefficient length")
    ks = np.arange(i)
    return float((e0 + sigmas[:i].sum()) * math.exp(float((ks * rhos[:i] + gammas[:i]).sum())))


@dataclass(frozen=True)
class W12Distance:
    sup_norm: float
    l2_derivative: float


def w12_distance(t1: Trajectory, t2: Trajectory) -> W12Distance:
    """Sup-norm and exact L2-derivative distance between two trajectories.

    Both trajectories are piecewise linear, so on the common refinement of
    their meshes the difference is piecewise linear (sup attained at nodes)
    and the derivative difference is piecewise constant (the squared-
    derivative integral is a finite sum).
    """
    T1, T2 = t1.mesh.horizon, t2.mesh.horizon
    if abs(T1 - T2) > 1e-12 * max(1.0, abs(T1)):
        raise ValueError(f"mismatched horizons: {T1} vs {T2}")
    nodes = np.union1d(t1.mesh.nodes, t2.mesh.nodes)
    z1 = np.concatenate([_interp_rows(t1.mesh.nodes, t1.channel(c), nodes)
                         for c in _CHANNELS], axis=1)
    z2 = np.concatenate([_interp_rows(t2.mesh.nodes, t2.channel(c), nodes)
                         for c in _CHANNELS], axis=1)
    if z1.shape != z2.shape:
        raise ValueError("trajectories have mismatched channel dimensions")
    diff = z1 - z2
    sup = float(np.linalg.norm(diff, axis=1).max())
    lengths = np.diff(nodes)
    dslopes = np.diff(diff, axis=0) / lengths[:, None]
    l2 = float(np.sum(lengths * np.einsum("ij,ij->i", dslopes, dslopes)))
    return W12Distance(sup_norm=sup, l2_derivative=l2)
