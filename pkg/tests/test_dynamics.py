import math

import numpy as np
import pytest

from sweepopt import circuits
from sweepopt.dynamics import (
    Controls,
    LinearField,
    Mesh,
    ProblemSpec,
    ReferenceArc,
    Trajectory,
    controls_from_reference,
    discrete_gronwall,
    feasibility_violation,
    implicit_step_certificate,
    reconstruct_discrete_feasible,
    simulate,
    step,
    w12_distance,
)
from sweepopt.geometry import orthant_set


def _toy_spec(n=2, drift_scale=0.5, memory_scale=0.3):
    A1 = drift_scale * np.array([[0.0, 1.0], [-1.0, 0.0]])[:n, :n]
    A2 = memory_scale * np.eye(n)
    return ProblemSpec(
        set=orthant_set(n), n=n, m=0, d=0,
        f1=LinearField(A_ctrl=np.zeros((n, 0)), A_state=A1),
        f2=LinearField(A_ctrl=np.zeros((n, 0)), A_state=A2),
        horizon=1.0, x0=np.ones(n), free_channels=frozenset())


def test_mesh_validation():
    with pytest.raises(ValueError):
        Mesh(np.array([0.0]))
    with pytest.raises(ValueError):
        Mesh(np.array([0.0, 0.5, 0.4]))
    m = Mesh.uniform(2.0, 10)
    assert m.k == 10
    assert m.horizon == 2.0
    assert np.allclose(m.h, 0.2)


def test_step_memory_rectangle_rule_and_feasibility():
    spec = circuits.benchmark_instance()
    rng = np.random.default_rng(0)
    for _ in range(25):
        x = rng.uniform(0.1, 2.0, size=2)
        y = rng.normal(size=2)
        u_next = rng.normal(size=2) * 0.1
        a = rng.normal(size=2)
        h = 0.01
        x2, y2 = step(spec, x, y, u_next, a, np.zeros(0), h)
        assert np.allclose(y2, y + h * spec.f2.value(np.zeros(0), x), atol=1e-14)
        assert spec.set.values(x2 - u_next).min() >= -1e-10
        cert = implicit_step_certificate(spec, x, x2, y2, u_next, a,
                                         np.zeros(0), h)
        assert cert.feasible
        assert cert.residual <= 1e-8


def test_simulate_stationary_spec_is_constant():
    spec = _toy_spec(drift_scale=0.0, memory_scale=0.0)
    mesh = Mesh.uniform(1.0, 40)
    controls = Controls(mesh=mesh, u=np.zeros((41, 2)), a=np.zeros((41, 0)),
                        b=np.zeros((41, 0)))
    traj, report = simulate(spec, controls)
    assert np.allclose(traj.x, spec.x0, atol=1e-15)
    assert np.allclose(traj.y, 0.0)
    assert feasibility_violation(spec, traj) == 0.0
    assert not report.exceeded
    assert report.certificate_residuals.max(initial=0.0) <= 1e-10


def test_simulate_rejects_infeasible_start():
    spec = _toy_spec()
    mesh = Mesh.uniform(1.0, 5)
    u = np.zeros((6, 2))
    u[0] = np.array([3.0, 0.0])  # x0 - u0 leaves the orthant
    with pytest.raises(ValueError):
        simulate(spec, Controls(mesh=mesh, u=u, a=np.zeros((6, 0)),
                                b=np.zeros((6, 0))))


def test_bound_report_serializes_and_holds_on_benchmark():
    spec = circuits.benchmark_instance()
    cand = circuits.benchmark_candidate("iii")
    mesh = Mesh.uniform(1.0, 200)
    traj, report = simulate(spec, controls_from_reference(spec, mesh, cand.arc))
    d = report.to_dict()
    assert set(d) >= {"l_tilde", "l_tilde_variant", "observed", "bounds",
                      "flagged", "max_certificate_residual"}
    assert d["l_tilde"] >= d["l_tilde_variant"] > 0
    assert not report.exceeded


def test_trajectory_csv_roundtrip_bitwise(tmp_path):
    spec = circuits.benchmark_instance()
    cand = circuits.benchmark_candidate("i", 0.3)
    mesh = Mesh.uniform(1.0, 17)
    traj, _ = simulate(spec, controls_from_reference(spec, mesh, cand.arc))
    path = tmp_path / "traj.csv"
    traj.to_csv(path)
    back = Trajectory.from_csv(path)
    for name in ("x", "y", "u", "a", "b"):
        orig = traj.channel(name)
        assert back.channel(name).shape == orig.shape
        assert np.array_equal(back.channel(name), orig)
    assert np.array_equal(back.mesh.nodes, traj.mesh.nodes)


def test_trajectory_interpolation_and_slopes():
    mesh = Mesh.uniform(1.0, 4)
    x = np.linspace(0.0, 1.0, 5).reshape(5, 1) ** 2
    traj = Trajectory(mesh=mesh, x=x, y=np.zeros((5, 1)), u=np.zeros((5, 1)),
                      a=np.zeros((5, 0)), b=np.zeros((5, 0)))
    mid = traj.value("x", 0.125)
    assert np.allclose(mid, 0.5 * (x[0] + x[1]))
    slopes = traj.slopes("x")
    assert slopes.shape == (4, 1)
    assert np.allclose(slopes[:, 0], np.diff(x[:, 0]) * 4.0)


def test_reference_arc_from_trajectory_matches_nodes():
    mesh = Mesh.uniform(1.0, 8)
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(9, 2))
    traj = Trajectory(mesh=mesh, x=vals, y=np.zeros((9, 2)),
                      u=np.zeros((9, 2)), a=np.zeros((9, 0)),
                      b=np.zeros((9, 0)))
    arc = ReferenceArc.from_trajectory(traj)
    assert np.allclose(arc.x(mesh.nodes), vals)
    # step derivative equals the interval slope at interior sample times
    t_mid = mesh.nodes[:-1] + 0.5 * mesh.h
    assert np.allclose(arc.derivative("x")(t_mid), traj.slopes("x"))
    with pytest.raises(ValueError):
        ReferenceArc(T=1.0, n=1, m=0, d=0, x=lambda t: np.zeros((len(t), 1)),
                     y=None, u=None, a=None, b=None).derivative("x")


def test_reconstruction_tracks_reference():
    spec = circuits.benchmark_instance()
    cand = circuits.benchmark_candidate("i", circuits.benchmark_optimize_mode("i")[0])
    recon = reconstruct_discrete_feasible(spec, cand.arc, 50)
    assert feasibility_violation(spec, recon.trajectory) <= 1e-10
    assert recon.distance_to_reference.sup_norm <= 5e-2
    finer = reconstruct_discrete_feasible(spec, cand.arc, 200)
    assert (finer.distance_to_reference.sup_norm
            < recon.distance_to_reference.sup_norm)


def test_w12_distance_zero_and_symmetry():
    mesh = Mesh.uniform(1.0, 6)
    rng = np.random.default_rng(6)
    mk = lambda v: Trajectory(mesh=mesh, x=v, y=np.zeros((7, 1)),
                              u=np.zeros((7, 1)), a=np.zeros((7, 0)),
                              b=np.zeros((7, 0)))
    t1 = mk(rng.normal(size=(7, 1)))
    t2 = mk(rng.normal(size=(7, 1)))
    same = w12_distance(t1, t1)
    assert same.sup_norm == 0.0 and same.l2_derivative == 0.0
    d12, d21 = w12_distance(t1, t2), w12_distance(t2, t1)
    assert math.isclose(d12.sup_norm, d21.sup_norm)
    assert math.isclose(d12.l2_derivative, d21.l2_derivative)


def test_discrete_gronwall_validation_and_tightness():
    with pytest.raises(ValueError):
        discrete_gronwall(-1.0, [0.0], [0.0], [0.0], 1)
    with pytest.raises(ValueError):
        discrete_gronwall(1.0, [0.0], [0.0], [0.0], 5)
    # gamma = rho = 0: bound collapses to e0 + sum(sigma)
    val = discrete_gronwall(2.0, [1.0, 1.0], [0.0, 0.0], [0.0, 0.0], 2)
    assert math.isclose(val, 4.0)


def test_controls_shape_validation():
    mesh = Mesh.uniform(1.0, 3)
    with pytest.raises(ValueError):
        Controls(mesh=mesh, u=np.zeros((3, 2)), a=np.zeros((4, 0)),
                 b=np.zeros((4, 0)))
