import math

import numpy as np
import pytest

from sweepopt import geometry
from sweepopt.geometry import (
    ConeDecomposition,
    EvaluationError,
    InvalidConstantsError,
    ProjectionError,
    SetConstants,
    active_set,
    affine_set,
    check_plicq,
    default_active_tol,
    normal_cone_decompose,
    orthant_set,
    project,
    project_many,
    prox_radius,
    set_from_config,
    smooth_set,
)


def test_orthant_projection_is_shifted_clip():
    rng = np.random.default_rng(0)
    mset = orthant_set(4)
    for _ in range(50):
        shift = rng.normal(size=4)
        p = rng.normal(scale=3.0, size=4)
        expected = np.maximum(p, shift)
        assert np.allclose(project(mset, shift, p), expected, atol=1e-12)


def test_affine_projection_matches_halfspace_formula():
    # Single halfspace a.x + c >= 0: closed-form projection.
    a = np.array([1.0, 2.0, -1.0])
    c = -1.5
    mset = affine_set(a.reshape(1, 3), [c])
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.normal(scale=2.0, size=3)
        viol = a @ p + c
        expected = p if viol >= 0 else p - viol * a / (a @ a)
        assert np.allclose(project(mset, np.zeros(3), p), expected, atol=1e-10)


def test_project_many_matches_pointwise():
    mset = orthant_set(3)
    rng = np.random.default_rng(2)
    P = rng.normal(size=(20, 3))
    shift = rng.normal(size=3)
    batched = project_many(mset, shift, P)
    for i in range(20):
        assert np.allclose(batched[i], project(mset, shift, P[i]))


def test_smooth_projection_unit_ball():
    mset = set_from_config({"kind": "custom", "name": "unit-ball", "dim": 3})
    rng = np.random.default_rng(3)
    for _ in range(30):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        p = direction * rng.uniform(0.0, 1.9)  # stays inside the prox radius
        proj = project(mset, np.zeros(3), p)
        norm = np.linalg.norm(p)
        expected = p if norm <= 1 else p / norm
        assert np.allclose(proj, expected, atol=1e-9)


def test_projection_idempotent_on_smooth_set():
    mset = set_from_config({"kind": "custom", "name": "unit-ball", "dim": 2})
    rng = np.random.default_rng(4)
    for _ in range(30):
        shift = rng.normal(size=2) * 0.05
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        p = shift + direction * rng.uniform(0.0, 1.8)
        q = project(mset, shift, p)
        assert np.linalg.norm(project(mset, shift, q) - q) <= 1e-9


def test_projection_warns_beyond_prox_radius():
    mset = set_from_config({"kind": "custom", "name": "unit-ball", "dim": 2})
    with pytest.warns(geometry.ProximityDomainWarning):
        project(mset, np.zeros(2), np.array([4.0, 0.0]))


def test_active_set_scale_aware_default():
    mset = orthant_set(3)
    y = np.array([0.0, 5e-9, 2.0])
    act = active_set(mset, y)
    assert act.indices == (0, 1)
    assert 0 in act and 2 not in act
    assert len(act) == 2
    # a huge point loosens the default tolerance proportionally
    assert default_active_tol(1e6 * np.ones(3)) > 1.0e-3


def test_normal_cone_roundtrip_and_infeasible_direction():
    mset = orthant_set(3)
    x = np.array([0.0, 0.0, 1.0])
    u = np.zeros(3)
    # w = -sum lam_i grad g_i over active {0,1}
    lam = np.array([0.7, 1.3])
    G = mset.gradients(x)[:2]
    w = -G.T @ lam
    dec = normal_cone_decompose(mset, x, u, w)
    assert isinstance(dec, ConeDecomposition)
    assert dec.feasible
    assert dec.residual <= 1e-10
    assert np.allclose(dec.lam[:2], lam, atol=1e-9)
    # +e0 points inward: not a proximal normal
    bad = normal_cone_decompose(mset, x, u, np.array([1.0, 0.0, 0.0]))
    assert not bad.feasible
    assert bad.residual >= 0.5


def test_normal_cone_zero_at_interior_points():
    mset = orthant_set(2)
    dec = normal_cone_decompose(mset, np.array([1.0, 2.0]), np.zeros(2),
                                np.zeros(2))
    assert dec.feasible
    assert dec.lam.size == 0 or np.all(dec.lam == 0)


def test_plicq_margin_positive_for_orthant_and_zero_for_opposed_gradients():
    assert check_plicq(orthant_set(3), np.zeros(3)).holds
    # two opposed gradients: positive-linear dependence
    opposed = affine_set(np.array([[1.0, 0.0], [-1.0, 0.0]]), [0.0, 0.0])
    rep = check_plicq(opposed, np.zeros(2))
    assert not rep.holds
    assert rep.margin <= 1e-9


def test_prox_radius_formula_and_validation():
    assert prox_radius(SetConstants(M1=2.0, M2=2.0, M3=2.0, beta=1.0)) == 1.0
    assert math.isinf(prox_radius(SetConstants(M1=1.0, M3=0.0)))
    with pytest.raises(InvalidConstantsError):
        prox_radius(SetConstants(M1=0.0))
    with pytest.raises(InvalidConstantsError):
        prox_radius(SetConstants(M1=1.0, M3=-1.0))


def test_set_from_config_kinds_and_errors():
    assert set_from_config({"kind": "orthant", "dim": 5}).n_constraints == 5
    aff = set_from_config({"kind": "affine", "A": [[1.0, 1.0]], "offsets": [0.5]})
    assert aff.dim == 2
    with pytest.raises(ValueError):
        set_from_config({"kind": "torus"})
    with pytest.raises(KeyError):
        set_from_config({"kind": "custom", "name": "does-not-exist"})


def test_registered_custom_set_roundtrip():
    def factory(cfg):
        return orthant_set(int(cfg["dim"]))

    geometry.register_set("orthant-alias", factory)
    mset = set_from_config({"kind": "custom", "name": "orthant-alias", "dim": 2})
    assert mset.kind == "orthant"


def test_non_finite_constraint_value_raises():
    mset = smooth_set(
        dim=1,
        g=lambda y: np.array([math.inf]),
        grad_g=lambda y: np.ones((1, 1)),
        hess_g=None,
        n_constraints=1,
        constants=SetConstants(),
    )
    with pytest.raises(EvaluationError):
        mset.values(np.zeros(1))


def test_smooth_projection_reports_nonconvergence():
    # Projecting the center of the ball's complement-like trap: force a
    # failure by giving the iteration almost no budget.
    mset = set_from_config({"kind": "custom", "name": "unit-ball", "dim": 2})
    from sweepopt.geometry import _project_smooth

    with pytest.raises(ProjectionError):
        _project_smooth(mset, np.array([5.0, 5.0]), max_iter=1)
