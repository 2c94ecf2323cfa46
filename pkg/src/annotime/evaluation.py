"""Annotation accuracy: cutoff rules, rank concordances and absolute prediction error.

For a cutoff ``u`` the annotated status is ``Dhat_u = 1{pi_C >= u}`` and the
annotated time is ``Xhat_u = C (1 - Dhat_u) + Dhat_u T_hat``.  Accuracy is
summarized by

* ``C_u  = sum_{i<j} 1(Xhat_i <= Xhat_j, X_i <= X_j) / sum_{i<j} 1(X_i <= X_j)``
* ``C_u+ = sum_{i<j} Dhat_i D_i 1(...) / sum_{i<j} D_i 1(X_i <= X_j)``
* ``APE_u = mean |Xhat_u - X|``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AnnotationRule",
    "AccuracyReport",
    "apply_rule",
    "concordance",
    "ape",
    "delta_discrimination",
    "cutoff_search",
    "default_cutoff_grid",
    "cross_validate",
]

_CHUNK = 1024


@dataclass(frozen=True)
class AnnotationRule:
    u: float
    delta_hat: np.ndarray
    X_hat: np.ndarray
    T_hat: np.ndarray
    censor_times: np.ndarray


def apply_rule(pi_C, T_hat, censor_times, u: float) -> AnnotationRule:
    """Threshold ``pi_C`` at ``u`` (inclusive) and build the annotated times."""
    pi_C = np.asarray(pi_C, dtype=float)
    T_hat = np.asarray(T_hat, dtype=float)
    C = np.asarray(censor_times, dtype=float)
    dh = (pi_C >= u).astype(int)
    X_hat = np.where(dh == 1, T_hat, C)
    return AnnotationRule(float(u), dh, X_hat, T_hat, C)


def _pair_counts(X_hat, X, w_num, w_den):
    """Sums over pairs i<j of ``w_num_i 1(Xhat_i<=Xhat_j, X_i<=X_j)`` and ``w_den_i 1(X_i<=X_j)``."""
    n = X.size
    num = 0.0
    den = 0.0
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        rows = np.arange(lo, hi)
        upper = np.arange(n)[None, :] > rows[:, None]
        xle = (X[lo:hi, None] <= X[None, :]) & upper
        both = xle & (X_hat[lo:hi, None] <= X_hat[None, :])
        num += float(w_num[lo:hi] @ both.sum(axis=1))
        den += float(w_den[lo:hi] @ xle.sum(axis=1))
    return num, den


def concordance(rule: AnnotationRule, X, delta):
    """Return ``(C_u, C_u_plus)`` by exhaustive enumeration of pairs ``i < j``.

    Raises ``ValueError`` when a denominator is zero.
    """
    X = np.asarray(X, dtype=float)
    D = np.asarray(delta, dtype=float)
    if X.size < 2:
        raise ValueError("concordance needs at least two patients")
    ones = np.ones(X.size)
    num, den = _pair_counts(rule.X_hat, X, ones, ones)
    num_p, den_p = _pair_counts(rule.X_hat, X, rule.delta_hat * D, D)
    if den == 0:
        raise ValueError("concordance undefined: no comparable pairs")
    c_plus = num_p / den_p if den_p > 0 else float("nan")
    if den_p == 0:
        warnings.warn("C_u+ undefined: no comparable pairs with an observed event", RuntimeWarning)
    return num / den, c_plus


def ape(rule: AnnotationRule, X) -> float:
    """Mean absolute difference between annotated and observed times."""
    return float(np.mean(np.abs(rule.X_hat - np.asarray(X, dtype=float))))


def delta_discrimination(pi_C, delta, inclusive: bool = True) -> float:
    """Concordance of ``pi_C`` with the event indicator (an AUC).

    The fraction of (event, non-event) pairs where the event subject has the
    larger ``pi_C``; ties count as concordant when ``inclusive`` is true.
    """
    pi_C = np.asarray(pi_C, dtype=float)
    D = np.asarray(delta).astype(bool)
    pos, neg = pi_C[D], np.sort(pi_C[~D])
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    side = "right" if inclusive else "left"
    return float(np.searchsorted(neg, pos, side=side).sum() / (pos.size * neg.size))


def default_cutoff_grid(n_points: int = 51) -> np.ndarray:
    """``u = l / (n_points - 1)``; 51 points gives steps of 0.02."""
    if n_points == 1:
        return np.zeros(1)
    return np.arange(n_points) / (n_points - 1)


@dataclass
class AccuracyReport:
    """Accuracy curves over the cutoff grid plus the APE-optimal cutoff."""

    grid: np.ndarray
    ape: np.ndarray
    c: np.ndarray
    c_plus: np.ndarray
    n_events_annotated: np.ndarray
    best_index: int
    delta_auc_inclusive: float
    delta_auc_strict: float
    cv: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def best_u(self) -> float:
        return float(self.grid[self.best_index])

    @property
    def best_ape(self) -> float:
        return float(self.ape[self.best_index])

    @property
    def best_c(self) -> float:
        return float(self.c[self.best_index])

    @property
    def best_c_plus(self) -> float:
        return float(self.c_plus[self.best_index])

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float)]

        return {
            "grid": clean(self.grid),
            "ape": clean(self.ape),
            "c": clean(self.c),
            "c_plus": clean(self.c_plus),
            "n_events_annotated": [int(v) for v in self.n_events_annotated],
            "best_u": self.best_u,
            "best_ape": self.best_ape,
            "best_c": None if not np.isfinite(self.best_c) else self.best_c,
            "best_c_plus": None if not np.isfinite(self.best_c_plus) else self.best_c_plus,
            "delta_discrimination": {
                "inclusive": self.delta_auc_inclusive,
                "strict": self.delta_auc_strict,
                "note": "interpreted as the AUC of pi_C for classifying the event indicator",
            },
            "cv": self.cv,
            "meta": self.meta,
        }


def cutoff_search(pi_C, T_hat, censor_times, X, delta, grid=None, curves: str = "all") -> AccuracyReport:
    """Evaluate the accuracy measures over a cutoff grid and pick the APE minimizer.

    ``curves`` controls the O(n^2) concordance work: ``"all"`` fills every grid
    point, ``"best"`` only the selected cutoff, ``"none"`` skips it.  APE ties
    go to the smaller cutoff.
    """
    grid = default_cutoff_grid() if grid is None else np.sort(np.asarray(grid, dtype=float))
    X = np.asarray(X, dtype=float)
    D = np.asarray(delta, dtype=int)
    k = grid.size
    ape_c = np.empty(k)
    cc = np.full(k, np.nan)
    cp = np.full(k, np.nan)
    n_ev = np.empty(k, dtype=int)
    rules = []
    for i, u in enumerate(grid):
        r = apply_rule(pi_C, T_hat, censor_times, u)
        rules.append(r)
        ape_c[i] = ape(r, X)
        n_ev[i] = int(r.delta_hat.sum())
    best = int(np.argmin(ape_c))
    targets = range(k) if curves == "all" else ([best] if curves == "best" else [])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in targets:
            cc[i], cp[i] = concordance(rules[i], X, D)
    return AccuracyReport(
        grid=grid, ape=ape_c, c=cc, c_plus=cp, n_events_annotated=n_ev, best_index=best,
        delta_auc_inclusive=delta_discrimination(pi_C, D, True),
        delta_auc_strict=delta_discrimination(pi_C, D, False),
    )


def cross_validate(
    Z,
    X,
    delta,
    censor_times,
    k: int = 5,
    seed: int = 0,
    n_knots: int = 9,
    order: int = 4,
    knot_scheme: str = "percentile",
    horizon: float | None = None,
    groups=None,
    criterion: str | None = None,
    grid=None,
    curves: str = "all",
) -> AccuracyReport:
    """K-fold cross-validated accuracy.

    Each fold's PO model (optionally followed by group-lasso selection) is fit
    on the other ``k - 1`` folds and used to predict the held-out patients.
    The out-of-fold predictions are pooled and scored once, so leave-one-out
    (``k = n``) is supported.  Folds are stratified on the event indicator.
    """
    from .po_model import PoData, fit_profile, predict
    from .selection import fold_assignment, tune_lambda
    from .spline import place_knots

    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    X = np.asarray(X, dtype=float)
    D = np.asarray(delta, dtype=int)
    C = np.asarray(censor_times, dtype=float)
    n = X.size
    if not 2 <= k <= n:
        raise ValueError("need 2 <= k <= n folds")
    E = float(C.max()) if horizon is None else float(horizon)
    folds = fold_assignment(D, k, seed)
    pi = np.empty(n)
    T = np.empty(n)
    fold_stats = []
    for f in range(k):
        test = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        if D[train].sum() == 0:
            raise ValueError(f"training data for fold {f} contain no events")
        basis = place_knots(X[train], n_knots, knot_scheme, horizon=E, order=order)
        data = PoData(Z[train], X[train], D[train], basis, censor_times=C[train])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = fit_profile(data, variance=False)
            if criterion is not None:
                sel = tune_lambda(fit, data, groups if groups is not None else [[j] for j in range(Z.shape[1])],
                                  criterion=criterion)
                fit = fit.with_params(sel.beta, sel.gamma)
        pred = predict(fit, Z[test], C[test])
        pi[test] = pred.pi_C
        T[test] = pred.T_hat
        fold_stats.append({"fold": f, "n_test": int(test.size), "converged": bool(fit.converged)})
    report = cutoff_search(pi, T, C, X, D, grid=grid, curves=curves)
    report.cv = {"k": k, "seed": seed, "folds": fold_stats, "pooling": "out-of-fold predictions"}
    return report
