import numpy as np
import pytest

from sweepopt import circuits

# 50-digit quadrature values from tools/highprec_oracle.py, frozen here so a
# regression in the closed forms cannot slip through a self-consistent pair.
ORACLE_C_I = 0.91753443755995312075
ORACLE_V2 = {"i": 0.59884812700652308153, "ii": 1.0567873986698303444}
ORACLE_COST = {"i": 0.81745129685608256141, "ii": 0.71247762262776893496,
               "iii": 1.0}


def test_mode_constant_matches_oracle():
    assert circuits.mode_constant("i") == pytest.approx(ORACLE_C_I, abs=1e-12)
    assert circuits.mode_constant("ii") == pytest.approx(ORACLE_C_I - 1.0,
                                                         abs=1e-12)
    with pytest.raises(ValueError):
        circuits.mode_constant("iii")


def test_mode_v1_endpoint_relations():
    for case in ("i", "ii"):
        c = circuits.mode_constant(case)
        for v2 in (-1.3, 0.0, 0.7, 2.4):
            v1 = circuits.mode_v1(case, v2)
            # both relations encode x2(1) pinned through the constant c
            if case == "i":
                assert c * (v1 - v2) == pytest.approx(-(v2 - 1.0), abs=1e-12)
            else:
                assert c * (v1 - v2) == pytest.approx(v2 - 1.0, abs=1e-12)
    assert circuits.mode_v1("iii", 5.0) == 1.0
    with pytest.raises(ValueError):
        circuits.mode_v1("iv", 1.0)


def test_candidate_cost_matches_quadrature():
    for case in circuits.MODES:
        for v2 in (0.3, 1.0, 1.9):
            cand = circuits.benchmark_candidate(case, v2)
            assert cand.cost == pytest.approx(cand.cost_by_quadrature(),
                                              abs=1e-9)


def test_optimized_modes_match_oracle():
    for case in ("i", "ii"):
        v2, cost = circuits.benchmark_optimize_mode(case)
        assert v2 == pytest.approx(ORACLE_V2[case], abs=1e-9)
        assert cost == pytest.approx(ORACLE_COST[case], abs=1e-12)
    v2_iii, cost_iii = circuits.benchmark_optimize_mode("iii")
    assert cost_iii == pytest.approx(1.0, abs=1e-15)


def test_best_mode_is_second_contact_case():
    assert circuits.benchmark_best_mode() == "ii"
    costs = {case: circuits.benchmark_optimize_mode(case)[1]
             for case in circuits.MODES}
    assert costs["ii"] < costs["i"] < costs["iii"]


def test_candidate_arcs_are_dynamically_consistent(benchmark_spec):
    """Closed-form arcs must solve the continuous system they minimize."""
    t = np.linspace(0.0, 1.0, 401)
    A2 = np.array([[1.0, -1.0], [-1.0, 1.0]])
    for case in circuits.MODES:
        cand = circuits.benchmark_candidate(
            case, circuits.benchmark_optimize_mode(case)[0])
        arc = cand.arc
        x, y, a = arc.x(t), arc.y(t), arc.a(t)
        # feasibility: the states stay in the (unshifted) orthant
        assert x.min() >= -1e-12
        # memory consistency: y' = A2 x
        assert np.abs(arc.y_dot(t) - x @ A2.T).max() <= 1e-9
        # interior/contact dynamics: x' = a - y away from the boundary
        interior = x.min(axis=1) > 1e-6
        gap = arc.x_dot(t) - (a - y)
        assert np.abs(gap[interior]).max() <= 1e-9
        # endpoint data
        assert np.allclose(arc.x(np.array([0.0]))[0], benchmark_spec.x0)


def test_case_iii_is_the_straight_ramp():
    cand = circuits.benchmark_candidate("iii")
    t = np.linspace(0.0, 1.0, 101)
    ramp = np.column_stack([1.0 - t, 1.0 - t])
    assert np.abs(cand.arc.x(t) - ramp).max() <= 1e-12
    assert np.abs(cand.arc.a(t) + 1.0).max() <= 1e-12
    assert cand.cost == pytest.approx(1.0, abs=1e-15)


def test_benchmark_instance_shapes(benchmark_spec):
    assert benchmark_spec.n == 2
    assert benchmark_spec.m == 2
    assert benchmark_spec.d == 0
    assert benchmark_spec.free_channels == frozenset({"a"})
    assert benchmark_spec.horizon == 1.0
    assert np.array_equal(benchmark_spec.x0, [1.0, 1.0])
    # f1 acts on the sources only, f2 on the state only
    a = np.array([2.0, 3.0])
    x = np.array([1.0, 4.0])
    assert np.allclose(benchmark_spec.f1.value(a, x), [-2.0, -3.0])
    assert np.allclose(benchmark_spec.f2.value(np.zeros(0), x), [-3.0, 3.0])


def test_voltage_source_validates_parameters():
    with pytest.raises(ValueError):
        circuits.voltage_source_instance(
            circuits.CircuitParams(inductances=(1.0,)))
    with pytest.raises(ValueError):
        circuits.CircuitParams(capacitances=(0.0,))
    with pytest.raises(ValueError):
        circuits.CircuitParams(weights=(0.0, 0.0, 0.0))


def test_current_source_instance_tracks_profile():
    params = circuits.CircuitParams(resistances=(0.5, 0.25),
                                    inductances=(1.0, 2.0),
                                    capacitances=(1.0, 1.0))

    def i_profile(t):
        return 1.0 + 0.5 * np.sin(np.asarray(t, dtype=float))

    spec = circuits.current_source_instance(params, i_profile)
    assert not spec.free_channels
    assert spec.m == 0 and spec.d == 2
    assert np.allclose(spec.x0, [1.0, 0.0])
    u_fn, b_fn = circuits.current_source_channels(params, i_profile)
    t = np.linspace(0.0, 1.0, 11)
    u = u_fn(t)
    assert np.allclose(u[:, 0], i_profile(t))
    assert np.all(u[:, 1] == 0.0)
    assert np.allclose(b_fn(t)[:, 0], i_profile(t))  # 1/(L1 C1) = 1 here
    with pytest.raises(ValueError):
        circuits.current_source_instance(
            circuits.CircuitParams(capacitances=(1.0,)), i_profile)
