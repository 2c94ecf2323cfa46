"""Independent reference implementations used as test oracles.

These are deliberately naive: plain recursion and loops with no sharing of
code or numerical tricks with the package.
"""

import math

import numpy as np


def bspline_recursive(knots, i, r, t):
    """Order-``r`` B-spline ``i`` at ``t`` from the textbook recursion (0/0 = 0).

    The last nonempty interval is closed on the right so the basis is
    defined at the upper boundary.
    """
    knots = list(knots)
    if r == 1:
        lo, hi = knots[i], knots[i + 1]
        if lo <= t < hi:
            return 1.0
        last = max(k for k in range(len(knots) - 1) if knots[k] < knots[k + 1])
        return 1.0 if (i == last and t == hi) else 0.0
    out = 0.0
    d1 = knots[i + r - 1] - knots[i]
    if d1 > 0:
        out += (t - knots[i]) / d1 * bspline_recursive(knots, i, r - 1, t)
    d2 = knots[i + r] - knots[i + 1]
    if d2 > 0:
        out += (knots[i + r] - t) / d2 * bspline_recursive(knots, i + 1, r - 1, t)
    return out


def basis_vector(knots, r, t):
    n = len(knots) - r
    return np.array([bspline_recursive(knots, i, r, t) for i in range(n)])


def adaptive_simpson(f, a, b, tol=1e-12, max_depth=50):
    """Adaptive Simpson quadrature of a scalar function on ``[a, b]``."""
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def rec(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return rec(a, m, fa, flm, fm, left, tol / 2, depth - 1) + rec(m, b, fm, frm, fb, right, tol / 2, depth - 1)

    if b <= a:
        return 0.0
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return rec(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


def alpha_oracle(knots, r, gamma, t, breakpoints):
    """``int_0^t exp(gamma' B(u)) du`` by adaptive Simpson on each knot interval."""
    total = 0.0
    pts = [b for b in breakpoints if b < t] + [t]
    for a, b in zip(pts[:-1], pts[1:]):
        total += adaptive_simpson(lambda u: math.exp(float(basis_vector(knots, r, u) @ gamma)), a, b)
    return total


def po_loglik_literal(Z, X, D, beta, gamma, knots, r, breakpoints):
    """Sum over subjects of the PO log-likelihood written term by term."""
    total = 0.0
    for i in range(len(X)):
        eta = float(np.dot(Z[i], beta))
        alpha = alpha_oracle(knots, r, gamma, X[i], breakpoints)
        m = float(basis_vector(knots, r, X[i]) @ gamma)
        total += D[i] * (m + eta) - (1 + D[i]) * math.log1p(math.exp(eta) * alpha)
    return total


def pair_concordance(X_hat, X, D_hat, D):
    """``(C_u, C_u_plus)`` by explicit double loop over pairs ``i < j``."""
    n = len(X)
    num = den = num_p = den_p = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if X[i] <= X[j]:
                den += 1
                den_p += D[i]
                if X_hat[i] <= X_hat[j]:
                    num += 1
                    num_p += D_hat[i] * D[i]
    return num / den, (num_p / den_p if den_p else float("nan"))


def simulate_po(n, beta, alpha_c, rng, horizon=20.0, power=3.0):
    """PO data with ``alpha(t) = t^power exp(alpha_c)``, standard normal
    features and uniform censoring on ``(0, horizon]`` with an atom at the
    horizon.  The true log-baseline is ``m(t) = alpha_c + log(power) +
    (power - 1) log t``."""
    from scipy.special import logit

    beta = np.asarray(beta, float)
    Z = rng.standard_normal((n, beta.size))
    V = rng.uniform(size=n)
    T = np.exp((logit(V) - Z @ beta - alpha_c) / power)
    C = np.where(rng.uniform(size=n) < 0.1, horizon, rng.uniform(0.0, horizon, n))
    C = np.maximum(C, 1e-3)
    X = np.minimum(T, C)
    D = (T <= C).astype(int)
    return Z, X, D, C
