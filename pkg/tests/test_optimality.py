import dataclasses
import math

import numpy as np
import pytest

from sweepopt import circuits
from sweepopt.dynamics import (
    Controls,
    Mesh,
    QuadraticForm,
    QuadraticStageCost,
    simulate,
)
from sweepopt.optimality import (
    CertificateError,
    assemble_discrete_certificate,
    benchmark_certificate,
    coderivative_check,
    compute_eta,
    verify_continuous_certificate,
)
from sweepopt.transcribe import DiscreteProblem


def _interior_simulation(spec, k=64):
    mesh = Mesh.uniform(spec.horizon, k)
    a = np.tile([-0.2, -0.4], (k + 1, 1))
    controls = Controls(mesh=mesh, u=np.zeros((k + 1, spec.n)), a=a,
                        b=np.zeros((k + 1, spec.d)))
    traj, _ = simulate(spec, controls)
    return traj


def test_compute_eta_interior_run_has_zero_multipliers(benchmark_spec):
    traj = _interior_simulation(benchmark_spec)
    mult = compute_eta(benchmark_spec, traj)
    assert mult.max_residual <= 1e-10
    assert np.all(mult.eta == 0.0)


def test_compute_eta_exact_on_terminal_contact_arc(benchmark_spec, mode_candidates):
    # the case-iii arc reaches the constraint boundary exactly at the horizon
    traj = mode_candidates["iii"].arc.sample(Mesh.uniform(1.0, 200))
    mult = compute_eta(benchmark_spec, traj)
    assert mult.max_residual <= 1e-12
    assert np.all(mult.eta == 0.0)


def test_compute_eta_rejects_violated_inclusion(benchmark_spec):
    traj = _interior_simulation(benchmark_spec, k=32)
    broken = dataclasses.replace(traj, x=traj.x + np.array([0.5, 0.0]))
    with pytest.raises(CertificateError):
        compute_eta(benchmark_spec, broken)


def _interior_candidate(spec, rng, h):
    x = rng.uniform(0.5, 2.0, spec.n)
    u = rng.uniform(-0.25, 0.25, spec.n)
    x = x + np.maximum(u, 0.0)  # keep x - u well inside the orthant
    y = rng.normal(size=spec.n)
    a = rng.normal(size=spec.m)
    b = np.zeros(spec.d)
    w = spec.f1.value(a, x) + y + h * spec.f2.value(b, x)
    z = rng.normal(size=spec.n)
    J1x = spec.f1.jac_state(a, x)
    J2x = spec.f2.jac_state(b, x)
    J1a = spec.f1.jac_ctrl(a, x)
    J2b = spec.f2.jac_ctrl(b, x)
    cand = (J1x.T @ z + h * (J2x.T @ z), z, np.zeros(spec.n),
            J1a.T @ z, h * (J2b.T @ z))
    return (x, y, u, a, b, w), z, cand


def test_coderivative_interior_membership(benchmark_spec):
    rng = np.random.default_rng(7)
    h = 0.01
    for _ in range(50):
        point, z, cand = _interior_candidate(benchmark_spec, rng, h)
        rep = coderivative_check(benchmark_spec, point, z, h, cand)
        assert rep.domain_ok
        assert rep.member
        assert rep.residuals["value"] <= 1e-9
        assert np.all(rep.lam == 0.0)


def test_coderivative_flags_value_perturbation(benchmark_spec):
    rng = np.random.default_rng(11)
    h = 0.01
    delta = 1e-3
    for _ in range(25):
        point, z, cand = _interior_candidate(benchmark_spec, rng, h)
        direction = rng.normal(size=benchmark_spec.n)
        direction /= np.linalg.norm(direction)
        cx = cand[0] + delta * direction
        rep = coderivative_check(benchmark_spec, point, z, h,
                                 (cx,) + cand[1:])
        assert rep.domain_ok
        assert not rep.member
        assert rep.witness is not None
        assert rep.residuals["value"] >= 0.5 * delta


def test_coderivative_domain_violation(benchmark_spec):
    h = 0.02
    x = np.array([0.5, 0.9])
    u = np.array([0.5, 0.2])  # x - u = (0, 0.7): first constraint active
    y = np.array([0.1, -0.3])
    a = np.array([0.4, 0.2])
    b = np.zeros(0)
    lam0 = 0.6
    w = (benchmark_spec.f1.value(a, x) + y + h * benchmark_spec.f2.value(b, x)
         - np.array([lam0, 0.0]))
    z = np.array([1.0, -0.4])  # pairs nonzero with the active gradient
    cand = (np.zeros(2), z, np.zeros(2), np.zeros(2), np.zeros(0))
    rep = coderivative_check(benchmark_spec, (x, y, u, a, b, w), z, h, cand)
    assert not rep.domain_ok
    assert not rep.member
    assert rep.residuals["domain"] >= 0.5 * lam0


def test_coderivative_boundary_membership_with_sigma(benchmark_spec):
    h = 0.02
    x = np.array([0.5, 0.9])
    u = np.array([0.5, 0.2])
    y = np.array([0.1, -0.3])
    a = np.array([0.4, 0.2])
    b = np.zeros(0)
    w = (benchmark_spec.f1.value(a, x) + y + h * benchmark_spec.f2.value(b, x)
         - np.array([0.6, 0.0]))
    z = np.array([0.0, 0.8])  # annihilates the active gradient pairing
    sigma = np.array([0.35, 0.0])
    J1x = benchmark_spec.f1.jac_state(a, x)
    J2x = benchmark_spec.f2.jac_state(b, x)
    J1a = benchmark_spec.f1.jac_ctrl(a, x)
    cand = (J1x.T @ z + h * (J2x.T @ z) - sigma, z, -sigma, J1a.T @ z,
            np.zeros(0))
    rep = coderivative_check(benchmark_spec, (x, y, u, a, b, w), z, h, cand)
    assert rep.domain_ok
    assert rep.member
    assert rep.sigma is not None


def test_discrete_certificate_on_solved_ladder(solved_ladder):
    for row in solved_ladder["rows"]:
        cert = row["certificate"]
        assert cert.residuals["slackness_eta"] == 0.0
        assert cert.residuals["slackness_sigma"] == 0.0
        assert cert.residuals["complementarity"] == 0.0
        assert cert.nontriviality > 1.0
        assert cert.satisfied(1e-3)
    finest = solved_ladder["rows"][-1]["certificate"]
    assert finest.max_residual <= 1e-6


def test_certificate_rejects_negative_multiplier(solved_ladder):
    row = solved_ladder["rows"][0]
    with pytest.raises(CertificateError):
        assemble_discrete_certificate(row["problem"], row["report"].solution,
                                      lam=-1.0)


def test_certificate_degenerates_at_zero_multiplier(solved_ladder):
    row = solved_ladder["rows"][0]
    cert = assemble_discrete_certificate(row["problem"],
                                         row["report"].solution, lam=0.0)
    assert cert.nontriviality <= 1e-10
    assert not cert.satisfied(1e-8)


def test_stage_cost_on_integral_state_is_refused(benchmark_spec, mode_candidates):
    spec = dataclasses.replace(
        benchmark_spec,
        stage_cost=QuadraticStageCost(forms={"y": QuadraticForm(Q=np.eye(2))}))
    traj = mode_candidates["ii"].arc.sample(Mesh.uniform(1.0, 20))
    carrier = DiscreteProblem(spec, traj.mesh, mode_candidates["ii"].arc,
                              math.inf, {},
                              {c: traj.channel(c) for c in ("u", "a", "b")})
    with pytest.raises(CertificateError):
        assemble_discrete_certificate(carrier, traj)


def test_benchmark_certificate_unknown_case():
    with pytest.raises(ValueError):
        benchmark_certificate("iv")


def test_benchmark_certificates_verify_all_modes(benchmark_spec):
    for case in circuits.MODES:
        cert, cand = benchmark_certificate(case)
        assert cert.max_residual <= 1e-8
        assert cert.satisfied(1e-8)
        # re-audit through the public runner on a fresh grid
        again = verify_continuous_certificate(benchmark_spec, cand.arc, cert,
                                              num_nodes=1201)
        assert again.max_residual <= 1e-8


def test_continuous_certificate_rejects_negative_multiplier(benchmark_spec, mode_candidates):
    cert, cand = benchmark_certificate("i")
    bad = dataclasses.replace(cert, lam=-1.0)
    with pytest.raises(CertificateError):
        verify_continuous_certificate(benchmark_spec, cand.arc, bad)
