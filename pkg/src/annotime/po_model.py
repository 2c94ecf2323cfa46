"""Proportional-odds survival model with a B-spline log-baseline.

Model: ``F(t | Z) = e^{Z'b} alpha(t) / (1 + e^{Z'b} alpha(t))`` with
``alpha(t) = int_0^t exp{gamma' B(u)} du``.  The labeled-data
log-likelihood is

    l_n(b, g) = sum_i D_i {B(X_i)'g + Z_i'b} - (1 + D_i) log{1 + e^{Z_i'b} alpha(X_i)}.

``fit_profile`` maximizes it by profiling: an inner Newton solve for
``gamma`` at fixed ``beta`` and an outer Newton iteration on ``beta`` using
the profile Hessian.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .spline import EndpointQuadrature, QuadratureRule, SplineBasis, eval_basis

__all__ = [
    "PoNumericalError",
    "PoData",
    "PoFit",
    "SurvivalPrediction",
    "loglik",
    "score_and_hessian",
    "fit_profile",
    "predict",
    "sandwich",
    "beta_covariance",
    "baseline_band",
]

log = logging.getLogger(__name__)


class PoNumericalError(ArithmeticError):
    """Likelihood evaluation or a linear solve broke down."""


class PoData:
    """Labeled design for the PO likelihood with quadrature precomputed at ``X``."""

    def __init__(self, Z, X, delta, basis: SplineBasis, rule: QuadratureRule | None = None,
                 censor_times=None):
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        X = np.asarray(X, dtype=float).reshape(-1)
        delta = np.asarray(delta).reshape(-1)
        if not (Z.shape[0] == X.size == delta.size):
            raise ValueError("Z, X and delta must have the same number of rows")
        if not np.all(np.isin(delta, (0, 1))):
            raise ValueError("delta must be 0/1")
        if not np.all(np.isfinite(Z)):
            bad = np.argwhere(~np.isfinite(Z))[0]
            raise ValueError(f"non-finite feature at row {bad[0]}, column {bad[1]}")
        if np.any(X <= 0):
            raise ValueError("observed times must be positive")
        self.Z = Z
        self.X = X
        self.delta = delta.astype(float)
        self.basis = basis
        self.rule = rule or QuadratureRule()
        self.quad = EndpointQuadrature(basis, X, self.rule)
        self.BX = eval_basis(basis, self.quad.ends)
        self.C = None if censor_times is None else np.asarray(censor_times, dtype=float).reshape(-1)

    @property
    def n(self) -> int:
        return self.X.size

    @property
    def d(self) -> int:
        return self.Z.shape[1]

    @property
    def P(self) -> int:
        return self.basis.n_basis

    def subset(self, idx) -> "PoData":
        idx = np.asarray(idx)
        C = None if self.C is None else self.C[idx]
        return PoData(self.Z[idx], self.X[idx], self.delta[idx], self.basis, self.rule, C)


def _pieces(data: PoData, beta, gamma):
    beta = np.asarray(beta, dtype=float).reshape(-1)
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if beta.size != data.d or gamma.size != data.P:
        raise ValueError(f"expected beta of length {data.d} and gamma of length {data.P}")
    if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(gamma))):
        raise PoNumericalError("non-finite parameters")
    eta = data.Z @ beta
    log_alpha, a_norm, ew, alpha_s = data.quad.log_moments(gamma)
    s = eta + log_alpha
    return beta, gamma, eta, s, a_norm, ew, alpha_s


def _check_finite(values, what):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise PoNumericalError(f"non-finite {what} for subject index {bad[0]}")


def loglik(data: PoData, beta, gamma, per_subject: bool = False):
    """Log-likelihood ``l_n(beta, gamma)`` (or its per-subject terms)."""
    beta, gamma, eta, s, *_ = _pieces(data, beta, gamma)
    D = data.delta
    terms = D * (data.BX @ gamma + eta) - (1.0 + D) * np.logaddexp(0.0, s)
    _check_finite(terms, "log-likelihood")
    return terms if per_subject else float(terms.sum())


@dataclass
class Derivatives:
    loglik: float
    S_beta: np.ndarray     # (n, d) per-subject
    S_gamma: np.ndarray    # (n, P) per-subject
    S_bb: np.ndarray       # (d, d) summed
    S_gg: np.ndarray       # (P, P) summed
    S_bg: np.ndarray       # (d, P) summed

    @property
    def grad_beta(self):
        return self.S_beta.sum(axis=0)

    @property
    def grad_gamma(self):
        return self.S_gamma.sum(axis=0)


def score_and_hessian(data: PoData, beta, gamma, which: str = "all") -> Derivatives:
    """Analytic scores and second-derivative blocks summed over subjects.

    ``which="gamma"`` skips the beta blocks (used by the inner solver).
    """
    beta, gamma, eta, s, a_norm, ew, alpha_s = _pieces(data, beta, gamma)
    D = data.delta
    w = 1.0 + D
    p = expit(s)
    pq = p * expit(-s)
    ll_terms = D * (data.BX @ gamma + eta) - w * np.logaddexp(0.0, s)
    _check_finite(ll_terms, "log-likelihood")

    S_gamma = D[:, None] * data.BX - (w * p)[:, None] * a_norm
    # alpha_s can underflow for short X under a large shift; the term then vanishes
    ratio = np.divide(w * p, alpha_s, out=np.zeros_like(p), where=alpha_s > 0)
    second = data.quad.weighted_second_moment(ew, ratio)
    wa = (w * p * p)[:, None] * a_norm
    S_gg = -second + wa.T @ a_norm
    S_gg = 0.5 * (S_gg + S_gg.T)
    if which == "gamma":
        return Derivatives(float(ll_terms.sum()), None, S_gamma, None, S_gg, None)
    Z = data.Z
    S_beta = (D - w * p)[:, None] * Z
    wz = (w * pq)[:, None] * Z
    S_bb = -(wz.T @ Z)
    S_bg = -(wz.T @ a_norm)
    return Derivatives(float(ll_terms.sum()), S_beta, S_gamma, S_bb, S_gg, S_bg)


def _neg_solve(H, g):
    """Solve ``(-H) x = g`` for a (nearly) negative-definite ``H``.

    Falls back to an eigenvalue-floored inverse when ``-H`` is not positive
    definite, which turns the step into an ascent direction regardless.
    """
    M = -H
    try:
        L = np.linalg.cholesky(M)
        return np.linalg.solve(L.T, np.linalg.solve(L, g)), True
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
        scale = max(np.abs(vals).max(), 1.0)
        vals = np.maximum(np.abs(vals), 1e-8 * scale)
        return vecs @ ((vecs.T @ g) / vals), False


@dataclass
class InnerResult:
    gamma: np.ndarray
    loglik: float
    iterations: int
    converged: bool


def solve_gamma(data: PoData, beta, gamma0=None, tol: float = 1e-9, max_iter: int = 100) -> InnerResult:
    """Maximize ``l_n(beta, .)`` over gamma by Newton's method with step halving."""
    gamma = np.zeros(data.P) if gamma0 is None else np.array(gamma0, dtype=float)
    der = score_and_hessian(data, beta, gamma, which="gamma")
    ll = der.loglik
    for it in range(1, max_iter + 1):
        g = der.grad_gamma
        if np.max(np.abs(g)) < tol:
            return InnerResult(gamma, ll, it - 1, True)
        step, _ = _neg_solve(der.S_gg, g)
        t = 1.0
        while True:
            cand = gamma + t * step
            try:
                cand_ll = loglik(data, beta, cand)
            except PoNumericalError:
                cand_ll = -np.inf
            if cand_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
            if t < 1e-12:
                return InnerResult(gamma, ll, it, np.max(np.abs(g)) < 1e3 * tol)
        gamma = cand
        if np.max(np.abs(t * step)) < 1e-13:
            der = score_and_hessian(data, beta, gamma, which="gamma")
            return InnerResult(gamma, der.loglik, it, np.max(np.abs(der.grad_gamma)) < 1e3 * tol)
        der = score_and_hessian(data, beta, gamma, which="gamma")
        ll = der.loglik
    return InnerResult(gamma, ll, max_iter, False)


@dataclass
class PoFit:
    """Result of maximizing the PO likelihood."""

    beta: np.ndarray
    gamma: np.ndarray
    loglik: float
    basis: SplineBasis
    S_bb: np.ndarray
    S_gg: np.ndarray
    S_bg: np.ndarray
    n: int
    converged: bool
    iterations: int
    inner_iterations: int
    max_gradient: float
    method: str = "profile"
    beta_cov: np.ndarray | None = None
    gamma_core: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        """``(gamma, beta)`` stacked in that order."""
        return np.concatenate([self.gamma, self.beta])

    @property
    def information(self) -> np.ndarray:
        """``-n^{-1} l_n''`` at the fit, ordered as :attr:`theta`."""
        H = np.block([[self.S_gg, self.S_bg.T], [self.S_bg, self.S_bb]])
        return -H / self.n

    def with_params(self, beta, gamma) -> "PoFit":
        return replace(self, beta=np.asarray(beta, float), gamma=np.asarray(gamma, float))

    def m_hat(self, u) -> np.ndarray:
        return eval_basis(self.basis, u) @ self.gamma

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "beta": arr(self.beta),
            "gamma": arr(self.gamma),
            "loglik": self.loglik,
            "basis": self.basis.to_dict(),
            "S_bb": arr(self.S_bb),
            "S_gg": arr(self.S_gg),
            "S_bg": arr(self.S_bg),
            "n": self.n,
            "converged": self.converged,
            "iterations": self.iterations,
            "inner_iterations": self.inner_iterations,
            "max_gradient": self.max_gradient,
            "method": self.method,
            "beta_cov": arr(self.beta_cov),
            "gamma_core": arr(self.gamma_core),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoFit":
        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        return cls(
            beta=arr(d["beta"]),
            gamma=arr(d["gamma"]),
            loglik=float(d["loglik"]),
            basis=SplineBasis.from_dict(d["basis"]),
            S_bb=arr(d["S_bb"]),
            S_gg=arr(d["S_gg"]),
            S_bg=arr(d["S_bg"]),
            n=int(d["n"]),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            inner_iterations=int(d["inner_iterations"]),
            max_gradient=float(d["max_gradient"]),
            method=d.get("method", "profile"),
            beta_cov=arr(d.get("beta_cov")),
            gamma_core=arr(d.get("gamma_core")),
            meta=d.get("meta", {}),
        )


def _finish(data, beta, gamma, method, converged, iterations, inner_iters, variance) -> PoFit:
    der = score_and_hessian(data, beta, gamma)
    grad = np.concatenate([der.grad_beta, der.grad_gamma])
    fit = PoFit(
        beta=beta, gamma=gamma, loglik=der.loglik, basis=data.basis,
        S_bb=der.S_bb, S_gg=der.S_gg, S_bg=der.S_bg, n=data.n,
        converged=converged, iterations=iterations, inner_iterations=inner_iters,
        max_gradient=float(np.max(np.abs(grad))), method=method,
    )
    try:
        np.linalg.cholesky(-der.S_gg)
    except np.linalg.LinAlgError:
        fit.meta["gamma_hessian_negative_definite"] = False
        if converged:
            warnings.warn("S_gamma_gamma is not negative definite at the reported optimum", RuntimeWarning)
    else:
        fit.meta["gamma_hessian_negative_definite"] = True
    if variance:
        try:
            fit.beta_cov, fit.gamma_core = sandwich(data, beta, gamma, der)
        except PoNumericalError as exc:
            fit.meta["variance_error"] = str(exc)
    return fit


def fit_profile(
    data: PoData,
    beta0=None,
    gamma0=None,
    method: str = "profile",
    max_iter: int = 200,
    grad_tol: float = 1e-6,
    step_tol: float = 1e-8,
    variance: bool = True,
) -> PoFit:
    """Maximize the PO likelihood.

    Parameters
    ----------
    method : {"profile", "joint"}
        ``"profile"`` alternates an inner gamma-Newton solve with an outer
        Newton step on beta driven by the profile gradient and Hessian.
        ``"joint"`` runs Newton on ``(beta, gamma)`` together; the optimum is
        the same.
    grad_tol, step_tol
        Convergence requires ``max |score| < grad_tol`` and the last Newton
        step to be smaller than ``step_tol`` in max-norm.
    """
    if data.delta.sum() == 0:
        raise ValueError("no observed events: cannot fit the PO model")
    if data.n < data.d + data.P:
        warnings.warn(
            f"only {data.n} labeled subjects for {data.d + data.P} parameters", RuntimeWarning
        )
    beta = np.zeros(data.d) if beta0 is None else np.array(beta0, dtype=float)
    gamma = np.zeros(data.P) if gamma0 is None else np.array(gamma0, dtype=float)
    if method == "joint":
        return _fit_joint(data, beta, gamma, max_iter, grad_tol, step_tol, variance)
    if method != "profile":
        raise ValueError(f"unknown method {method!r}")

    inner = solve_gamma(data, beta, gamma)
    gamma, ll = inner.gamma, inner.loglik
    inner_total = inner.iterations
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        der = score_and_hessian(data, beta, gamma)
        g = der.grad_beta
        # profile Hessian: S_bb - S_bg S_gg^{-1} S_gb
        try:
            Vinv_Sgb = np.linalg.solve(-der.S_gg, der.S_bg.T)
        except np.linalg.LinAlgError:
            Vinv_Sgb = np.linalg.lstsq(-der.S_gg, der.S_bg.T, rcond=None)[0]
        H_prof = der.S_bb + der.S_bg @ Vinv_Sgb
        H_prof = 0.5 * (H_prof + H_prof.T)
        step, _ = _neg_solve(H_prof, g)
        gmax = np.max(np.abs(np.concatenate([g, der.grad_gamma])))
        if gmax < grad_tol and np.max(np.abs(step), initial=0.0) < step_tol:
            converged = True
            break
        t = 1.0
        accepted = False
        while t >= 1e-10:
            cand_beta = beta + t * step
            # warm start gamma along the implicit-function tangent
            cand_gamma0 = gamma + t * (Vinv_Sgb @ step)
            try:
                cand = solve_gamma(data, cand_beta, cand_gamma0)
            except PoNumericalError:
                t *= 0.5
                continue
            inner_total += cand.iterations
            if cand.loglik >= ll - 1e-12 * max(1.0, abs(ll)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            log.debug("profile line search failed at iteration %d", it)
            break
        beta, gamma, ll = cand_beta, cand.gamma, cand.loglik
    fit = _finish(data, beta, gamma, "profile", converged, it, inner_total, variance)
    if not converged:
        warnings.warn(f"profile likelihood fit did not converge (max gradient {fit.max_gradient:.3g})",
                      RuntimeWarning)
    return fit


def _fit_joint(data, beta, gamma, max_iter, grad_tol, step_tol, variance) -> PoFit:
    d = data.d
    ll = loglik(data, beta, gamma)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        der = score_and_hessian(data, beta, gamma)
        grad = np.concatenate([der.grad_beta, der.grad_gamma])
        H = np.block([[der.S_bb, der.S_bg], [der.S_bg.T, der.S_gg]])
        step, _ = _neg_solve(H, grad)
        if np.max(np.abs(grad)) < grad_tol and np.max(np.abs(step)) < step_tol:
            converged = True
            break
        t = 1.0
        while t >= 1e-12:
            cb, cg = beta + t * step[:d], gamma + t * step[d:]
            try:
                cll = loglik(data, cb, cg)
            except PoNumericalError:
                cll = -np.inf
            if cll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            break
        beta, gamma, ll = cb, cg, cll
    fit = _finish(data, beta, gamma, "joint", converged, it, 0, variance)
    if not converged:
        warnings.warn(f"joint Newton fit did not converge (max gradient {fit.max_gradient:.3g})",
                      RuntimeWarning)
    return fit


def sandwich(data: PoData, beta, gamma, der: Derivatives | None = None):
    """Plug-in sandwich covariance of beta and the core matrix for the baseline band.

    Returns ``(beta_cov, gamma_core)`` where ``beta_cov = A^{-1} Sigma A^{-T} / n``
    and ``gamma_core = V^{-1} (n^{-2} sum_i S_gamma_i S_gamma_i') V^{-1}``.
    """
    if der is None:
        der = score_and_hessian(data, beta, gamma)
    n = data.n
    V = -der.S_gg / n
    Sbg = der.S_bg / n
    try:
        Vinv = np.linalg.inv(V)
        if not np.all(np.isfinite(Vinv)) or np.linalg.cond(V) > 1e14:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        raise PoNumericalError(
            "gamma information matrix is singular; reduce the number of spline knots"
        ) from None
    A = der.S_bb / n + Sbg @ Vinv @ Sbg.T
    eff = der.S_beta + der.S_gamma @ (Vinv @ Sbg.T)
    Sigma = eff.T @ eff / n
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise PoNumericalError("profile information for beta is singular") from None
    cov = Ainv @ Sigma @ Ainv.T / n
    cov = 0.5 * (cov + cov.T)
    core = Vinv @ (der.S_gamma.T @ der.S_gamma / n**2) @ Vinv
    core = 0.5 * (core + core.T)
    return cov, core


def beta_covariance(fit: PoFit, data: PoData | None = None) -> np.ndarray:
    """Sandwich covariance of beta-hat; recomputed from ``data`` when given."""
    if data is not None:
        return sandwich(data, fit.beta, fit.gamma)[0]
    if fit.beta_cov is None:
        raise PoNumericalError(fit.meta.get("variance_error", "fit carries no covariance estimate"))
    return fit.beta_cov


def baseline_band(fit: PoFit, u, data: PoData | None = None) -> np.ndarray:
    """Pointwise standard error ``sigma(u)`` of ``m_hat(u)``."""
    core = fit.gamma_core if data is None else sandwich(data, fit.beta, fit.gamma)[1]
    if core is None:
        raise PoNumericalError(fit.meta.get("variance_error", "fit carries no variance estimate"))
    B = eval_basis(fit.basis, u)
    var = np.einsum("...p,pq,...q->...", B, core, B)
    return np.sqrt(np.maximum(var, 0.0))


@dataclass
class SurvivalPrediction:
    """Predicted event-time distribution for a set of subjects."""

    times: np.ndarray | None   # (g,) requested evaluation grid
    F: np.ndarray | None       # (n, g) predicted CDF on that grid
    pi_C: np.ndarray    # (n,) F at each subject's censor time
    T_hat: np.ndarray   # (n,) int_0^C {1 - F(t)} dt
    censor_times: np.ndarray


def _cdf_from_log_alpha(eta, log_alpha):
    with np.errstate(invalid="ignore"):
        return expit(eta[:, None] + log_alpha[None, :])


def predict(
    fit: PoFit,
    Z,
    censor_times,
    time_grid=None,
    n_grid: int = 2001,
    rule: QuadratureRule | None = None,
) -> SurvivalPrediction:
    """Predict ``F(t|Z)``, ``pi_C = F(C|Z)`` and ``T_hat = int_0^C (1 - F)``.

    ``T_hat`` is integrated with the trapezoid rule on an ``n_grid``-point
    grid over ``[0, horizon]`` truncated at each subject's ``C``.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    C = np.asarray(censor_times, dtype=float).reshape(-1)
    E = fit.basis.horizon
    if np.any(C > E):
        warnings.warn("censor times beyond the spline horizon clamped", RuntimeWarning)
        C = np.minimum(C, E)
    eta = Z @ fit.beta
    base = np.linspace(0.0, E, n_grid)
    with np.errstate(divide="ignore"):
        log_a_base = np.log(EndpointQuadrature(fit.basis, base, rule).alpha(fit.gamma))
        log_a_C = np.log(EndpointQuadrature(fit.basis, C, rule).alpha(fit.gamma))
    pi_C = expit(eta + log_a_C)

    # trapezoid of 1 - F over grid points below C, then the partial panel to C
    dt = np.diff(base)
    k_all = np.clip(np.searchsorted(base, C, side="right") - 1, 0, n_grid - 1)
    T_hat = np.empty(Z.shape[0])
    for lo in range(0, Z.shape[0], 512):
        sl = slice(lo, lo + 512)
        S = 1.0 - _cdf_from_log_alpha(eta[sl], log_a_base)
        cum = np.concatenate(
            [np.zeros((S.shape[0], 1)), np.cumsum(0.5 * (S[:, 1:] + S[:, :-1]) * dt, axis=1)], axis=1
        )
        k = k_all[sl]
        rows = np.arange(S.shape[0])
        T_hat[sl] = cum[rows, k] + 0.5 * (S[rows, k] + (1.0 - pi_C[sl])) * (C[sl] - base[k])

    times = F = None
    if time_grid is not None:
        times = np.asarray(time_grid, dtype=float)
        if np.any(times > E) or np.any(times < 0):
            warnings.warn("prediction grid outside [0, horizon] clamped", RuntimeWarning)
            times = np.clip(times, 0.0, E)
        with np.errstate(divide="ignore"):
            la = np.log(EndpointQuadrature(fit.basis, times, rule).alpha(fit.gamma))
        F = _cdf_from_log_alpha(eta, la)
    return SurvivalPrediction(times, F, pi_C, T_hat, C)
