"""High-precision oracle for the unit two-inductor benchmark.

Recomputes, with 50-digit arithmetic and quadrature that is completely
independent of the library code, the quantities the test-suite freezes:

* the mode constants c (both boundary modes),
* the quadratic cost J(v2) of each mode and its minimizer,
* consistency of the closed-form states/controls with the interior ODE
  x' = a - y,  y' = A2 x,
* consistency of the closed-form adjoint arcs with the backward
  integro-differential system they must satisfy.

Run:  python3 tools/highprec_oracle.py   (needs mpmath, not a package dep)
"""

from mpmath import mp, mpf, cos, sin, exp, sqrt, quad, diff

mp.dps = 50

SQ2 = sqrt(2)
E = exp(1)
EM2 = exp(-2)


def mode_c(case):
    base = mpf(4) / 9 if case == "i" else mpf(-5) / 9
    return (
        base
        - cos(SQ2) / 9 * (EM2 / 2 - E)
        + sin(SQ2) / (9 * SQ2) * (EM2 / 2 + 2 * E)
    )


def v1_of(case, v2):
    if case == "iii":
        return mpf(1)
    c = mode_c(case)
    return v2 - (v2 - 1) / c if case == "i" else v2 + (v2 - 1) / c


def abar(case, v2, t):
    v1 = v1_of(case, v2)
    d = v1 - v2
    a1 = -v1 - d / 3 * exp(-(t - 1)) - d / 6 * exp(2 * t - 2) + d / 2
    a2 = -v2 + d / 3 * exp(-(t - 1)) + d / 6 * exp(2 * t - 2) - d / 2
    return a1, a2


def xbar(case, v2, t):
    v1 = v1_of(case, v2)
    d = v1 - v2
    osc_c = d * EM2 / 6 - d * E / 3
    osc_s = d * EM2 / 18 + 2 * d * E / 9
    common = 1 - (v1 + v2) / 2 * t
    wiggle = (
        -d / 18 * exp(2 * t - 2)
        + d / 9 * exp(1 - t)
        + cos(SQ2 * t) / 3 * osc_c
        - sin(SQ2 * t) / SQ2 * osc_s
    )
    return common + wiggle, common - wiggle


def ybar(case, v2, t):
    # y = int_0^t A2 x ds with A2 = [[1,-1],[-1,1]]; A2 x = (x1-x2)(1,-1).
    v1 = v1_of(case, v2)
    d = v1 - v2
    osc_c = d * EM2 / 6 - d * E / 3
    osc_s = d * EM2 / 18 + 2 * d * E / 9
    # D(t) = x1-x2 = 2*wiggle;  int_0^t D:
    intD = 2 * (
        -d / 36 * (exp(2 * t - 2) - EM2)
        - d / 9 * (exp(1 - t) - E)
        + osc_c / 3 * sin(SQ2 * t) / SQ2
        + osc_s / 2 * (cos(SQ2 * t) - 1)
    )
    return intD, -intD


def cost(case, v2):
    x1T, x2T = xbar(case, v2, mpf(1))
    run = quad(
        lambda t: sum(ai ** 2 for ai in abar(case, v2, t)) / 2, [0, 1]
    )
    return x2T ** 2 / 2 + run


def minimize_quadratic(f):
    f0, f1, f2 = f(mpf(0)), f(mpf(1)), f(mpf(2))
    q2 = (f2 - 2 * f1 + f0) / 2
    q1 = f1 - f0 - q2
    return -q1 / (2 * q2), q2


def ode_residual(case, v2):
    # sup over sample times of | d/dt xbar - (abar - ybar) |
    worst = mpf(0)
    for i in range(1, 20):
        t = mpf(i) / 20
        dx1 = diff(lambda s: xbar(case, v2, s)[0], t)
        dx2 = diff(lambda s: xbar(case, v2, s)[1], t)
        a1, a2 = abar(case, v2, t)
        y1, y2 = ybar(case, v2, t)
        worst = max(worst, abs(dx1 - (a1 - y1)), abs(dx2 - (a2 - y2)))
    return worst


def adjoint_residual(case, v2, lam=mpf(1)):
    """Check the closed-form dual arcs.

    With v = (v1, v2), alpha = lam*(v1+v2), delta = lam*(v1-v2):
      Q_i(t) = int_[t,1] q^y_i,
      q^y_1  = -(alpha/2) e^{t-1} + (delta/6) e^{1-t} - (delta/6) e^{2t-2} + alpha/2,
      q^x    = lam*v + A2 Q(t),
    and the Volterra relation reads
      (q^y)'(t) = -lam*v - A2 Q(t) + q^y(t)   (using p^x + gamma({1}) = lam*v).
    Also q^y(1) = 0 and  lam*abar = -q^x.
    """
    v1 = v1_of(case, v2)
    alpha = lam * (v1 + v2)
    delta = lam * (v1 - v2)

    def qy(t):
        q1 = -alpha / 2 * exp(t - 1) + delta / 6 * exp(1 - t) \
            - delta / 6 * exp(2 * t - 2) + alpha / 2
        q2 = -alpha / 2 * exp(t - 1) - delta / 6 * exp(1 - t) \
            + delta / 6 * exp(2 * t - 2) + alpha / 2
        return q1, q2

    def Q(t):
        Q1 = alpha / 2 * exp(t - 1) + delta / 6 * exp(1 - t) \
            + delta / 12 * exp(2 * t - 2) - delta / 4 - alpha / 2 * t
        Q2 = alpha / 2 * exp(t - 1) - delta / 6 * exp(1 - t) \
            - delta / 12 * exp(2 * t - 2) + delta / 4 - alpha / 2 * t
        return Q1, Q2

    worst = mpf(0)
    # Q really is the tail integral of qy, and qy(1)=0
    for i in range(0, 11):
        t = mpf(i) / 10
        Q1n = quad(lambda s: qy(s)[0], [t, 1])
        Q2n = quad(lambda s: qy(s)[1], [t, 1])
        Q1, Q2 = Q(t)
        worst = max(worst, abs(Q1 - Q1n), abs(Q2 - Q2n))
    q1T, q2T = qy(mpf(1))
    worst = max(worst, abs(q1T), abs(q2T))
    # Volterra relation and the control link lam*abar = -qx
    for i in range(1, 20):
        t = mpf(i) / 20
        d1 = diff(lambda s: qy(s)[0], t)
        d2 = diff(lambda s: qy(s)[1], t)
        Q1, Q2 = Q(t)
        qy1, qy2 = qy(t)
        r1 = d1 - (-lam * v1 - (Q1 - Q2) + qy1)
        r2 = d2 - (-lam * v2 - (Q2 - Q1) + qy2)
        worst = max(worst, abs(r1), abs(r2))
        a1, a2 = abar(case, v2, t)
        qx1 = lam * v1 + (Q1 - Q2)
        qx2 = lam * v2 + (Q2 - Q1)
        worst = max(worst, abs(lam * a1 + qx1), abs(lam * a2 + qx2))
    return worst


if __name__ == "__main__":
    for case in ("i", "ii"):
        c = mode_c(case)
        vstar, q2 = minimize_quadratic(lambda v, case=case: cost(case, v))
        print(f"mode {case}:  c = {mp.nstr(c, 20)}")
        print(f"          v2* = {mp.nstr(vstar, 20)} (curvature {mp.nstr(q2, 8)})")
        print(f"          J(v2*) = {mp.nstr(cost(case, vstar), 20)}")
        print(f"          ode residual @v2* = {mp.nstr(ode_residual(case, vstar), 5)}")
        print(f"          adjoint residual  = {mp.nstr(adjoint_residual(case, vstar), 5)}")
    print(f"mode iii: J = {mp.nstr(cost('iii', mpf(1)), 20)}")
    print(f"          ode residual = {mp.nstr(ode_residual('iii', mpf(1)), 5)}")
    print(f"          adjoint residual = {mp.nstr(adjoint_residual('iii', mpf(1)), 5)}")
