"""Adaptive group-lasso selection on the least-squares approximation of the likelihood.

With ``theta = (gamma, beta)`` and ``H = -n^{-1} l_n''`` at the MLE, the
penalized problem is

    min_theta (theta - theta_mle)' H (theta - theta_mle) + lam * sum_g w_g ||beta_g||_2,
    w_g = 1 / ||beta_mle_g||_2.

gamma is never penalized, so it is profiled out exactly: for fixed beta the
optimal gamma is ``gamma_mle - H_gg^{-1} H_gb (beta - beta_mle)``.  The
remaining problem in beta is a quadratic in the Schur complement plus the
group penalty, solved by block coordinate descent with exact group updates.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .po_model import PoData, PoFit, fit_profile, loglik

__all__ = [
    "GlassoConvergenceError",
    "LsaProblem",
    "SelectionResult",
    "lsa_objective",
    "solve_glasso",
    "lambda_max",
    "tune_lambda",
]

log = logging.getLogger(__name__)

ZERO_NORM = 1e-10


class GlassoConvergenceError(RuntimeError):
    """Block coordinate descent hit the sweep limit."""


def _project_psd(H):
    H = 0.5 * (H + H.T)
    vals, vecs = np.linalg.eigh(H)
    if vals.min() >= 0:
        return H
    return (vecs * np.maximum(vals, 0.0)) @ vecs.T


def group_weights(beta_mle, groups) -> np.ndarray:
    norms = np.array([np.linalg.norm(beta_mle[g]) for g in groups])
    with np.errstate(divide="ignore"):
        return np.where(norms < ZERO_NORM, np.inf, 1.0 / np.maximum(norms, ZERO_NORM))


class LsaProblem:
    """Quadratic approximation of the likelihood at the MLE with its group structure.

    Parameters
    ----------
    theta_mle : array
        ``(gamma, beta)`` at the MLE.
    H : array
        ``-n^{-1} l_n''`` in the same ordering.
    n_gamma : int
        Length of the unpenalized gamma block.
    groups : list of index arrays
        Column indices into beta, one entry per penalized group.
    """

    def __init__(self, theta_mle, H, n_gamma: int, groups):
        self.theta_mle = np.asarray(theta_mle, dtype=float)
        self.H = _project_psd(np.asarray(H, dtype=float))
        self.P = int(n_gamma)
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.gamma_mle = self.theta_mle[: self.P]
        self.beta_mle = self.theta_mle[self.P:]
        d = self.beta_mle.size
        covered = np.concatenate(self.groups) if self.groups else np.zeros(0, int)
        if np.unique(covered).size != covered.size or (covered.size and (covered.min() < 0 or covered.max() >= d)):
            raise ValueError("groups must be disjoint index sets into beta")
        self.weights = group_weights(self.beta_mle, self.groups)
        P = self.P
        Hgg = self.H[:P, :P]
        Hgb = self.H[:P, P:]
        try:
            self._Hgg_inv_Hgb = np.linalg.solve(Hgg, Hgb)
        except np.linalg.LinAlgError:
            self._Hgg_inv_Hgb = np.linalg.lstsq(Hgg, Hgb, rcond=None)[0]
        # reduced quadratic in beta after profiling gamma
        Hr = self.H[P:, P:] - Hgb.T @ self._Hgg_inv_Hgb
        self.H_red = _project_psd(Hr)
        self._eig = [np.linalg.eigh(self.H_red[np.ix_(g, g)]) for g in self.groups]

    @classmethod
    def from_fit(cls, fit: PoFit, groups) -> "LsaProblem":
        return cls(fit.theta, fit.information, fit.gamma.size, groups)

    @property
    def d(self) -> int:
        return self.beta_mle.size

    def gamma_for(self, beta) -> np.ndarray:
        return self.gamma_mle - self._Hgg_inv_Hgb @ (np.asarray(beta) - self.beta_mle)

    def theta_for(self, beta) -> np.ndarray:
        return np.concatenate([self.gamma_for(beta), beta])

    def objective(self, theta, lam) -> float:
        return lsa_objective(theta, self.theta_mle, self.H, lam, self.groups, self.weights, self.P)

    def kkt_residual(self, beta, lam) -> float:
        """Largest violation of the group-lasso optimality conditions at ``beta``."""
        grad = 2.0 * self.H_red @ (beta - self.beta_mle)
        worst = 0.0
        for g, w in zip(self.groups, self.weights):
            bg = beta[g]
            nb = np.linalg.norm(bg)
            if nb > 0:
                r = np.linalg.norm(grad[g] + lam * w * bg / nb)
            elif np.isinf(w):
                r = 0.0
            else:
                r = max(0.0, np.linalg.norm(grad[g]) - lam * w)
            worst = max(worst, r)
        free = np.setdiff1d(np.arange(self.d), np.concatenate(self.groups) if self.groups else [])
        if free.size:
            worst = max(worst, np.abs(grad[free]).max())
        return float(worst)


def lsa_objective(theta, theta_mle, H, lam, groups, weights, n_gamma) -> float:
    """Quadratic approximation plus weighted group-norm penalty on the beta block."""
    r = np.asarray(theta, float) - np.asarray(theta_mle, float)
    beta = np.asarray(theta, float)[n_gamma:]
    val = float(r @ H @ r)
    for g, w in zip(groups, weights):
        nb = np.linalg.norm(beta[g])
        if np.isinf(w):
            if nb > 0:
                return math.inf
            continue
        val += lam * w * nb
    return val


def _group_update(Hgg_eig, target, lam_w):
    """Minimize ``x'Hx - x'target + lam_w ||x||`` (target = 2(H x_hat - b)).

    Returns the exact minimizer via the secular equation in ``rho = ||x||``.
    """
    if np.linalg.norm(target) <= lam_w:
        return np.zeros_like(target)
    vals, vecs = Hgg_eig
    vt = vecs.T @ target
    two_l = 2.0 * np.maximum(vals, 0.0)
    if lam_w == 0.0:
        return vecs @ (vt / two_l)

    # h(rho) = ||vt / (two_l rho + lam_w)|| is convex and decreasing, so Newton
    # from rho = 0 climbs monotonically to the root of h(rho) = 1
    c2 = vt * vt
    rho = 0.0
    for _ in range(200):
        den = two_l * rho + lam_w
        r2 = c2 / (den * den)
        h = math.sqrt(r2.sum())
        dh = -(r2 * two_l / den).sum() / h
        if dh >= 0.0:
            raise GlassoConvergenceError("group update diverged (singular block)")
        step = (h - 1.0) / dh
        rho -= step
        if abs(step) <= 1e-15 * (1.0 + rho):
            break
    return vecs @ (vt * rho / (two_l * rho + lam_w))


def solve_glasso(
    problem: LsaProblem,
    lam: float,
    beta0=None,
    tol: float = 1e-8,
    max_sweeps: int = 10_000,
) -> np.ndarray:
    """Minimize the LSA objective at penalty ``lam``; returns ``theta = (gamma, beta)``.

    Groups with zero MLE norm have infinite weight and stay exactly at zero.
    """
    H = problem.H_red
    bm = problem.beta_mle
    beta = bm.copy() if beta0 is None else np.array(beta0, dtype=float)
    for g, w in zip(problem.groups, problem.weights):
        if np.isinf(w):
            beta[g] = 0.0
    grouped = np.concatenate(problem.groups) if problem.groups else np.zeros(0, int)
    free = np.setdiff1d(np.arange(problem.d), grouped)
    blocks = [(g, w, e) for g, w, e in zip(problem.groups, problem.weights, problem._eig)]
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        if free.size:
            # unpenalized beta entries: exact block solve
            r = beta - bm
            b = H[np.ix_(free, np.arange(problem.d))] @ r - H[np.ix_(free, free)] @ r[free]
            new = bm[free] - np.linalg.lstsq(H[np.ix_(free, free)], b, rcond=None)[0]
            change = max(change, np.abs(new - beta[free]).max())
            beta[free] = new
        for g, w, eig in blocks:
            if np.isinf(w):
                continue
            r = beta - bm
            Hg = H[g]
            b = Hg @ r - Hg[:, g] @ r[g]
            target = 2.0 * (Hg[:, g] @ bm[g] - b)
            new = _group_update(eig, target, lam * w)
            change = max(change, np.abs(new - beta[g]).max())
            beta[g] = new
        if change < tol:
            return problem.theta_for(beta)
    raise GlassoConvergenceError(
        f"group lasso did not converge in {max_sweeps} sweeps (last change {change:.3g}, "
        f"KKT residual {problem.kkt_residual(beta, lam):.3g})"
    )


def lambda_max(problem: LsaProblem) -> float:
    """Smallest penalty at which every finite-weight group is exactly zero."""
    grad0 = -2.0 * problem.H_red @ (-problem.beta_mle)
    vals = [np.linalg.norm(grad0[g]) / w for g, w in zip(problem.groups, problem.weights) if np.isfinite(w)]
    return float(max(vals, default=0.0))


@dataclass
class PathPoint:
    lam: float
    theta: np.ndarray
    active_groups: list
    df: int
    loglik: float
    criterion: float
    kkt: float


@dataclass
class SelectionResult:
    """Selected model and the full penalty path."""

    theta: np.ndarray
    n_gamma: int
    active_groups: list
    chosen_lambda: float
    criterion: str
    path: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def gamma(self) -> np.ndarray:
        return self.theta[: self.n_gamma]

    @property
    def beta(self) -> np.ndarray:
        return self.theta[self.n_gamma:]

    @property
    def model_size(self) -> int:
        return int(np.count_nonzero(self.beta)) + self.n_gamma

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "chosen_lambda": self.chosen_lambda,
            "gamma": self.gamma.tolist(),
            "beta": self.beta.tolist(),
            "active_groups": [int(g) for g in self.active_groups],
            "model_size": self.model_size,
            "lambda_path": [
                {"lambda": p.lam, "criterion": p.criterion, "loglik": p.loglik, "df": p.df,
                 "active_groups": [int(g) for g in p.active_groups], "kkt_residual": p.kkt}
                for p in self.path
            ],
            "meta": self.meta,
        }


def _active(problem: LsaProblem, beta) -> list:
    return [k for k, g in enumerate(problem.groups) if np.any(beta[g] != 0)]


def default_lambda_grid(lmax: float, n_lambda: int = 50, min_ratio: float = 1e-4) -> np.ndarray:
    if lmax <= 0:
        return np.zeros(1)
    return lmax * np.logspace(0.0, np.log10(min_ratio), n_lambda)


def solve_path(problem: LsaProblem, lambdas, tol: float = 1e-8):
    """Warm-started solutions along ``lambdas`` (processed in the given order)."""
    out = []
    beta = None
    for lam in lambdas:
        theta = solve_glasso(problem, lam, beta0=beta, tol=tol)
        beta = theta[problem.P:]
        out.append(theta)
    return out


def tune_lambda(
    fit: PoFit,
    data: PoData,
    groups,
    criterion: str = "bic",
    lambdas=None,
    n_lambda: int = 50,
    min_ratio: float = 1e-4,
    cv_folds: int = 5,
    cv_loss: str = "loglik",
    seed: int = 0,
    tol: float = 1e-8,
) -> SelectionResult:
    """Trace the penalty path and pick ``lambda`` by AIC, BIC or K-fold CV.

    ``df`` counts the nonzero beta entries plus the spline coefficients.  CV
    refits the MLE on each training fold and scores the held-out fold by its
    log-likelihood (``cv_loss="loglik"``) or by the minimum APE over the
    cutoff grid (``cv_loss="ape"``).
    """
    criterion = criterion.lower()
    if criterion not in ("aic", "bic", "cv"):
        raise ValueError(f"unknown criterion {criterion!r}")
    problem = LsaProblem.from_fit(fit, groups)
    lmax = lambda_max(problem)
    if lambdas is None:
        lambdas = default_lambda_grid(lmax, n_lambda, min_ratio)
    lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
    thetas = solve_path(problem, lambdas, tol)
    n = data.n
    P = problem.P
    path = []
    for lam, theta in zip(lambdas, thetas):
        beta = theta[P:]
        df = int(np.count_nonzero(beta)) + P
        ll = loglik(data, beta, theta[:P])
        pen = 2.0 if criterion == "aic" else math.log(n)
        path.append(PathPoint(float(lam), theta, _active(problem, beta), df, ll, -2.0 * ll + pen * df,
                              problem.kkt_residual(beta, lam)))
    if criterion == "cv":
        cv_scores = _cv_scores(fit, data, groups, lambdas, cv_folds, cv_loss, seed, tol)
        for p, s in zip(path, cv_scores):
            p.criterion = float(s)
    # ties broken toward the larger penalty (sparser model): path is in descending lambda
    best = min(range(len(path)), key=lambda k: (path[k].criterion, k))
    chosen = path[best]
    if not chosen.active_groups and all(not p.active_groups for p in path):
        warnings.warn("every group was dropped at every penalty on the path", RuntimeWarning)
    return SelectionResult(
        theta=chosen.theta, n_gamma=P, active_groups=chosen.active_groups,
        chosen_lambda=chosen.lam, criterion=criterion, path=path,
        meta={"lambda_max": lmax, "weights": [None if np.isinf(w) else float(w) for w in problem.weights],
              "cv_loss": cv_loss if criterion == "cv" else None},
    )


def fold_assignment(delta, k: int, seed: int) -> np.ndarray:
    """Stratified fold labels (events spread evenly) from a seeded permutation."""
    delta = np.asarray(delta)
    rng = np.random.default_rng(seed)
    folds = np.empty(delta.size, dtype=int)
    for val in (1, 0):
        idx = np.flatnonzero(delta == val)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % k
    return folds


def _cv_scores(fit, data, groups, lambdas, k, loss, seed, tol):
    folds = fold_assignment(data.delta, k, seed)
    total = np.zeros(len(lambdas))
    for f in range(k):
        train = data.subset(np.flatnonzero(folds != f))
        test = data.subset(np.flatnonzero(folds == f))
        if train.delta.sum() == 0:
            raise ValueError(f"training fold {f} has no events")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fold_fit = fit_profile(train, beta0=fit.beta, gamma0=fit.gamma, variance=False)
        prob = LsaProblem.from_fit(fold_fit, groups)
        for j, theta in enumerate(solve_path(prob, lambdas, tol)):
            beta, gamma = theta[prob.P:], theta[:prob.P]
            if loss == "loglik":
                total[j] -= loglik(test, beta, gamma)
            elif loss == "ape":
                from .evaluation import cutoff_search
                from .po_model import predict

                pred = predict(fold_fit.with_params(beta, gamma), test.Z, _censor_times_of(test))
                rep = cutoff_search(pred.pi_C, pred.T_hat, pred.censor_times, test.X, test.delta, curves="none")
                total[j] += rep.best_ape * test.n
            else:
                raise ValueError(f"unknown cv loss {loss!r}")
    return total


def _censor_times_of(data: PoData) -> np.ndarray:
    C = data.C
    if C is None:
        raise ValueError("APE-loss cross-validation needs censor times on the labeled data")
    return C
