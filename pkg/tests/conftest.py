import time

import pytest

from sweepopt import circuits, transcribe
from sweepopt.optimality import assemble_discrete_certificate

LADDER_KS = (50, 100, 200, 400)


@pytest.fixture(scope="session")
def benchmark_spec():
    return circuits.benchmark_instance()


@pytest.fixture(scope="session")
def mode_candidates():
    """Analytic candidates at each mode's optimal second voltage."""
    return {case: circuits.benchmark_candidate(
                case, circuits.benchmark_optimize_mode(case)[0])
            for case in circuits.MODES}


@pytest.fixture(scope="session")
def solved_ladder(benchmark_spec, mode_candidates):
    """Solved instances for k in LADDER_KS near the best-mode reference.

    Shared by the convergence and certificate-decay acceptance tests.
    gtol = h^4 with the descent polish keeps the landed gradient level
    tolerance-dominated instead of plunging to roundoff, so the
    certificate residual tracks the schedule.
    """
    reference = mode_candidates["ii"].arc
    rows = []
    t0 = time.perf_counter()
    for k in LADDER_KS:
        h = 1.0 / k
        problem = transcribe.build(benchmark_spec, reference, k, epsilon=1.0)
        report = transcribe.solve(problem, transcribe.SolveOptions(
            gradient="adjoint", gtol=h ** 4, maxiter=2000, polish="descent"))
        cert = assemble_discrete_certificate(problem, report.solution)
        rows.append({"k": k, "problem": problem, "report": report,
                     "certificate": cert})
    return {"rows": rows, "seconds": time.perf_counter() - t0,
            "reference_case": "ii"}
