"""Moving constraint sets C(u) = C + u and their normal-cone algebra.

The base set is C = {x : g_i(x) >= 0, i = 0..s-1}.  Everything else in the
package reduces to three primitives implemented here: active index sets,
Euclidean projection onto C + u, and decomposition of a vector over active
constraint gradients (proximal normal-cone membership).  Sets carry the
regularity constants (M1, M2, M3, beta, rho) that determine the
prox-regularity radius of the shifted sets.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import nnls

__all__ = [
    "SetConstants",
    "MovingSet",
    "ActiveIndexSet",
    "ConeDecomposition",
    "PlicqReport",
    "GeometryError",
    "EvaluationError",
    "ProjectionError",
    "ConeAmbiguityError",
    "InvalidConstantsError",
    "ProximityDomainWarning",
    "active_set",
    "project",
    "project_many",
    "normal_cone_decompose",
    "check_plicq",
    "prox_radius",
    "orthant_set",
    "affine_set",
    "smooth_set",
    "register_set",
    "set_from_config",
    "default_active_tol",
]


class GeometryError(Exception):
    """Base class for geometry failures."""


class EvaluationError(GeometryError):
    """A constraint function returned a non-finite value."""


class ProjectionError(GeometryError):
    """Projection iteration failed to converge.

    Carries ``last_iterate`` and ``residual`` so callers can diagnose
    whether the target point left the prox-regularity domain.
    """

    def __init__(self, message: str, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class ConeAmbiguityError(GeometryError):
    """Active gradients are rank deficient; multipliers are not unique."""


class InvalidConstantsError(GeometryError):
    """Regularity constants violate their positivity requirements."""


class ProximityDomainWarning(UserWarning):
    """Projection target lies beyond the prox-regularity radius."""


@dataclass(frozen=True)
class SetConstants:
    """Uniform bounds on the constraint functions.

    M1 <= ||grad g_i|| <= M2 on the region of interest, ||hess g_i|| <= M3,
    beta bounds the speed of the moving shift, rho is the activity radius.
    The library verifies these by sampling; it never derives them.
    """

    M1: float = 1.0
    M2: float = 1.0
    M3: float = 0.0
    beta: float = 1.0
    rho: float = math.inf


@dataclass(frozen=True)
class MovingSet:
    """Base set C = {x : g(x) >= 0} of a moving family C + u.

    ``g`` maps a point (n,) to the stacked constraint values (s,);
    ``grad_g`` to the stacked gradients (s, n); ``hess_g`` to the stacked
    Hessians (s, n, n) (``None`` for affine constraints, where it is zero).
    ``kind`` selects fast projection paths ("orthant", "affine", "smooth").
    """

    dim: int
    n_constraints: int
    g: Callable[[np.ndarray], np.ndarray]
    grad_g: Callable[[np.ndarray], np.ndarray]
    hess_g: Callable[[np.ndarray], np.ndarray] | None
    constants: SetConstants = field(default_factory=SetConstants)
    affine_flag: bool = False
    kind: str = "smooth"
    # Exact-projection data, populated for affine kinds: g(x) = A x + offsets.
    A: np.ndarray | None = None
    offsets: np.ndarray | None = None
    label: str = "custom"

    def values(self, y) -> np.ndarray:
        vals = np.atleast_1d(np.asarray(self.g(np.asarray(y, dtype=float)), dtype=float))
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise EvaluationError(
                f"constraint g_{int(bad[0])} of set '{self.label}' is non-finite at {np.asarray(y)}"
            )
        return vals

    def gradients(self, y) -> np.ndarray:
        grads = np.asarray(self.grad_g(np.asarray(y, dtype=float)), dtype=float)
        return grads.reshape(self.n_constraints, self.dim)

    def hessians(self, y) -> np.ndarray:
        if self.hess_g is None:
            return np.zeros((self.n_constraints, self.dim, self.dim))
        return np.asarray(self.hess_g(np.asarray(y, dtype=float)), dtype=float)


@dataclass(frozen=True)
class ActiveIndexSet:
    """Indices i with g_i(point) <= threshold (0-based)."""

    indices: tuple[int, ...]
    threshold: float

    def __contains__(self, i) -> bool:
        return i in self.indices

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class ConeDecomposition:
    """Result of expressing w = -sum_i lam_i grad g_i over active indices."""

    lam: np.ndarray
    residual: float
    feasible: bool
    active: ActiveIndexSet


@dataclass(frozen=True)
class PlicqReport:
    """Positive-linear-independence verdict with its quantitative margin."""

    holds: bool
    margin: float
    active: ActiveIndexSet


def default_active_tol(y) -> float:
    return 1e-8 * (1.0 + float(np.linalg.norm(np.asarray(y, dtype=float))))


def active_set(mset: MovingSet, y, tol: float | None = None) -> ActiveIndexSet:
    """Indices of constraints active at ``y`` within ``tol``.

    With ``tol=None`` a scale-aware default 1e-8*(1+||y||) is used; passing
    the activity radius rho recovers the enlarged near-active index set.
    """
    if tol is None:
        tol = default_active_tol(y)
    vals = mset.values(y)
    idx = tuple(int(i) for i in np.flatnonzero(vals <= tol))
    return ActiveIndexSet(indices=idx, threshold=float(tol))


def prox_radius(constants: SetConstants) -> float:
    """Prox-regularity radius M1/(M3*beta) of the shifted sets; +inf if M3=0."""
    if constants.M1 <= 0 or constants.beta <= 0:
        raise InvalidConstantsError(
            f"M1 and beta must be positive, got M1={constants.M1}, beta={constants.beta}"
        )
    if constants.M3 < 0:
        raise InvalidConstantsError(f"M3 must be nonnegative, got {constants.M3}")
    if constants.M3 == 0:
        return math.inf
    return constants.M1 / (constants.M3 * constants.beta)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project(mset: MovingSet, shift, p) -> np.ndarray:
    """Euclidean projection of ``p`` onto the shifted set C + shift.

    Affine constraints are solved exactly by active-subset enumeration of
    the QP optimality system; smooth constraints by a damped Newton
    iteration on the KKT conditions with active-set refinement (at most 100
    iterations, residual tolerance 1e-10).  For nonconvex sets a target
    farther than the prox radius from the set triggers a
    ``ProximityDomainWarning`` on the (still returned) nearest point found.

    Parameters
    ----------
    mset : MovingSet
        Base set C.
    shift : array_like, shape (n,)
        Translation u; the projection target set is C + u.
    p : array_like, shape (n,)
        Point to project.

    Returns
    -------
    numpy.ndarray, shape (n,)
        Nearest point of C + shift.
    """
    shift = np.asarray(shift, dtype=float)
    q = np.asarray(p, dtype=float) - shift
    if mset.kind == "orthant":
        return shift + np.maximum(q, 0.0)
    if mset.affine_flag:
        return shift + _project_affine(mset, q)
    z = _project_smooth(mset, q)
    eta = prox_radius(mset.constants)
    if math.isfinite(eta):
        dist = float(np.linalg.norm(q - z))
        if dist > eta:
            warnings.warn(
                f"projection target lies {dist:.3g} from the set, beyond the "
                f"prox radius {eta:.3g}; nearest point is not guaranteed unique",
                ProximityDomainWarning,
                stacklevel=2,
            )
    return shift + z


def project_many(mset: MovingSet, shift, P) -> np.ndarray:
    """Row-wise projection of a batch P (B, n) onto C + shift.

    ``shift`` may be a single point (n,) or one point per row (B, n).  The
    orthant kind is vectorized; other kinds fall back to a row loop.
    """
    P = np.asarray(P, dtype=float)
    shift = np.asarray(shift, dtype=float)
    if mset.kind == "orthant":
        return np.maximum(P, shift)
    if shift.ndim == 1:
        shift = np.broadcast_to(shift, P.shape)
    return np.stack([project(mset, shift[i], P[i]) for i in range(P.shape[0])])


def _project_affine(mset: MovingSet, q: np.ndarray) -> np.ndarray:
    """Exact projection onto {z : A z + c >= 0} by KKT subset enumeration.

    The minimizer satisfies z = q + A_S^T lam with lam >= 0 over some active
    subset S of at most n rows (conic Caratheodory), so trying subsets in
    order of size and accepting the first primal-dual feasible candidate is
    exact.  s is small in every intended use, so the enumeration is cheap.
    """
    A = mset.A
    c = mset.offsets
    s, n = A.shape
    scale = 1.0 + float(np.linalg.norm(q))
    feas_tol = 1e-10 * scale
    vals = A @ q + c
    if np.all(vals >= -feas_tol):
        return q
    if s > 16:
        raise ProjectionError(
            f"affine projection supports at most 16 constraints, got {s}"
        )
    for size in range(1, min(s, n) + 1):
        for S in itertools.combinations(range(s), size):
            A_S = A[list(S)]
            M = A_S @ A_S.T
            rhs = -(c[list(S)] + A_S @ q)
            lam_S, res, rank, _ = np.linalg.lstsq(M, rhs, rcond=None)
            # Reject subsets whose equality system is inconsistent.
            if float(np.linalg.norm(M @ lam_S - rhs)) > feas_tol:
                continue
            if np.any(lam_S < -1e-10):
                continue
            z = q + A_S.T @ lam_S
            if np.all(A @ z + c >= -feas_tol):
                return z
    raise ProjectionError(
        "no KKT-consistent active subset found (infeasible constraint system?)",
        last_iterate=q,
        residual=float(-np.min(vals)),
    )


def _project_smooth(mset: MovingSet, q: np.ndarray, max_iter: int = 100,
                    tol: float = 1e-10) -> np.ndarray:
    """Damped Newton on the projection KKT system for C2 constraints."""
    n = mset.dim
    z = q.copy()
    lam = np.zeros(mset.n_constraints)
    scale = 1.0 + float(np.linalg.norm(q))

    def kkt_residual(z, lam):
        vals = mset.values(z)
        grads = mset.gradients(z)
        stat = z - q - grads.T @ lam
        return max(
            float(np.linalg.norm(stat, ord=np.inf)),
            float(max(0.0, -np.min(vals, initial=0.0))),
            float(max(0.0, -np.min(lam, initial=0.0))),
            float(abs(lam @ vals)),
        )

    res = kkt_residual(z, lam)
    for _ in range(max_iter):
        if res <= tol * scale:
            return z
        vals = mset.values(z)
        grads = mset.gradients(z)
        hess = mset.hessians(z)
        act = sorted(set(np.flatnonzero(vals <= 1e-8 * scale)) | set(np.flatnonzero(lam > 0)))
        if not act:
            # Strictly interior target: the projection is the point itself.
            z = q.copy()
            lam[:] = 0.0
            res = kkt_residual(z, lam)
            continue
        G_A = grads[act]
        H = np.eye(n) - np.einsum("i,ijk->jk", lam[act], hess[act])
        na = len(act)
        K = np.zeros((n + na, n + na))
        K[:n, :n] = H
        K[:n, n:] = -G_A.T
        K[n:, :n] = G_A
        rhs = -np.concatenate([z - q - G_A.T @ lam[act], vals[act]])
        try:
            step = np.linalg.solve(K, rhs)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        best = None
        t = 1.0
        for _ in range(30):
            z_t = z + t * step[:n]
            lam_t = lam.copy()
            lam_t[act] = np.maximum(lam[act] + t * step[n:], 0.0)
            r_t = kkt_residual(z_t, lam_t)
            if r_t < res:
                best = (z_t, lam_t, r_t)
                break
            t *= 0.5
        if best is None:
            break
        z, lam, res = best
    if res <= tol * scale:
        return z
    raise ProjectionError(
        f"projection Newton did not converge in {max_iter} iterations "
        f"(residual {res:.3g})",
        last_iterate=z,
        residual=res,
    )


# ---------------------------------------------------------------------------
# Normal-cone algebra
# ---------------------------------------------------------------------------


def normal_cone_decompose(mset: MovingSet, x, u, w, tol: float | None = None) -> ConeDecomposition:
    """Multipliers lam >= 0 with w = -sum_i lam_i grad g_i(x - u).

    Solves a nonnegative least-squares problem restricted to the active
    gradients at x - u and reports the attained residual; ``feasible`` is
    False when the residual exceeds ``tol`` (w is outside the proximal
    normal cone).  Rank-deficient active gradients raise
    :class:`ConeAmbiguityError` since the multipliers are then not unique.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    y = x - u
    if tol is None:
        tol = default_active_tol(y)
    vals = mset.values(y)
    if np.min(vals, initial=0.0) < -tol:
        raise GeometryError(
            f"point is outside the shifted set by {-float(np.min(vals)):.3g}"
        )
    act = active_set(mset, y, tol)
    lam = np.zeros(mset.n_constraints)
    wnorm = float(np.linalg.norm(w))
    if not act.indices:
        residual = wnorm
        return ConeDecomposition(lam, residual, residual <= tol * (1.0 + wnorm), act)
    G_A = mset.gradients(y)[list(act.indices)]
    if np.linalg.matrix_rank(G_A, tol=1e-10 * max(1.0, float(np.abs(G_A).max()))) < len(act.indices):
        raise ConeAmbiguityError(
            f"active gradients at indices {act.indices} are rank deficient; "
            "multipliers are not unique"
        )
    lam_A, residual = nnls(G_A.T, -w)
    lam[list(act.indices)] = lam_A
    return ConeDecomposition(lam, float(residual), float(residual) <= tol * (1.0 + wnorm), act)


def check_plicq(mset: MovingSet, x, tol: float | None = None) -> PlicqReport:
    """Positive linear independence of active gradients at ``x``.

    Minimizes ||sum_i lam_i grad g_i(x)|| over the unit simplex of active
    multipliers by enumerating KKT systems of the simplex faces; the
    verdict holds iff the minimum is positive.  No active constraints give
    an infinite margin.
    """
    act = active_set(mset, x, tol)
    if not act.indices:
        return PlicqReport(True, math.inf, act)
    G = mset.gradients(np.asarray(x, dtype=float))[list(act.indices)]
    na = G.shape[0]
    if na > 14:
        raise GeometryError(f"PLICQ check supports at most 14 active constraints, got {na}")
    Q = G @ G.T
    best = math.inf
    for size in range(1, na + 1):
        for S in itertools.combinations(range(na), size):
            idx = list(S)
            K = np.zeros((size + 1, size + 1))
            K[:size, :size] = Q[np.ix_(idx, idx)]
            K[:size, size] = 1.0
            K[size, :size] = 1.0
            rhs = np.zeros(size + 1)
            rhs[size] = 1.0
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            lam = sol[:size]
            if np.any(lam < -1e-12):
                continue
            val = math.sqrt(max(float(lam @ Q[np.ix_(idx, idx)] @ lam), 0.0))
            best = min(best, val)
    grad_scale = max(1.0, float(np.abs(G).max()))
    return PlicqReport(best > 1e-10 * grad_scale, best, act)


# ---------------------------------------------------------------------------
# Constructors and registry
# ---------------------------------------------------------------------------


def orthant_set(dim: int, constants: SetConstants | None = None) -> MovingSet:
    """Nonnegative orthant in R^dim: g_i(x) = x_i."""
    eye = np.eye(dim)
    if constants is None:
        constants = SetConstants(M1=1.0, M2=1.0, M3=0.0, beta=1.0)
    return MovingSet(
        dim=dim,
        n_constraints=dim,
        g=lambda y: np.asarray(y, dtype=float),
        grad_g=lambda y: eye,
        hess_g=None,
        constants=constants,
        affine_flag=True,
        kind="orthant",
        A=eye,
        offsets=np.zeros(dim),
        label=f"orthant{dim}",
    )


def affine_set(A, offsets, constants: SetConstants | None = None) -> MovingSet:
    """Polyhedron {x : A x + offsets >= 0} with exact projections."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.asarray(offsets, dtype=float).reshape(A.shape[0])
    if constants is None:
        norms = np.linalg.norm(A, axis=1)
        constants = SetConstants(M1=float(norms.min()), M2=float(norms.max()), M3=0.0, beta=1.0)
    return MovingSet(
        dim=A.shape[1],
        n_constraints=A.shape[0],
        g=lambda y: A @ np.asarray(y, dtype=float) + c,
        grad_g=lambda y: A,
        hess_g=None,
        constants=constants,
        affine_flag=True,
        kind="affine",
        A=A,
        offsets=c,
        label="affine",
    )


def smooth_set(dim, g, grad_g, hess_g, n_constraints, constants: SetConstants,
               label: str = "custom") -> MovingSet:
    """Set {x : g(x) >= 0} with twice-differentiable constraints."""
    return MovingSet(
        dim=dim,
        n_constraints=n_constraints,
        g=g,
        grad_g=grad_g,
        hess_g=hess_g,
        constants=constants,
        affine_flag=False,
        kind="smooth",
        label=label,
    )


_SET_REGISTRY: dict[str, Callable[[dict], MovingSet]] = {}


def register_set(name: str, factory: Callable[[dict], MovingSet]) -> None:
    """Register a custom moving-set factory usable from JSON problem files."""
    _SET_REGISTRY[name] = factory


def set_from_config(cfg: dict) -> MovingSet:
    """Build a MovingSet from its JSON description.

    Supported kinds: {"kind": "orthant", "dim": n}, {"kind": "affine",
    "A": rows, "offsets": c} meaning g(x) = A x + c >= 0, and
    {"kind": "custom", "name": ..., ...} for host-registered sets.
    """
    kind = cfg.get("kind")
    constants = None
    if "constants" in cfg:
        constants = SetConstants(**cfg["constants"])
    if kind == "orthant":
        return orthant_set(int(cfg["dim"]), constants)
    if kind == "affine":
        return affine_set(cfg["A"], cfg["offsets"], constants)
    if kind == "custom":
        name = cfg.get("name")
        if name not in _SET_REGISTRY:
            raise KeyError(f"no registered moving set named {name!r}")
        return _SET_REGISTRY[name](cfg)
    raise ValueError(f"unknown moving-set kind {kind!r}")


def _unit_ball_factory(cfg: dict) -> MovingSet:
    dim = int(cfg.get("dim", 2))
    return smooth_set(
        dim=dim,
        g=lambda y: np.array([1.0 - float(y @ y)]),
        grad_g=lambda y: (-2.0 * np.asarray(y, dtype=float)).reshape(1, dim),
        hess_g=lambda y: (-2.0 * np.eye(dim)).reshape(1, dim, dim),
        n_constraints=1,
        constants=SetConstants(M1=2.0, M2=2.0, M3=2.0, beta=1.0, rho=0.5),
        label="unit-ball",
    )


register_set("unit-ball", _unit_ball_factory)
