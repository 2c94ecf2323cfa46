"""Simulated cohorts with multi-channel encounter processes and PO event times.

Each channel ``j`` of patient ``i`` has intensity ``tau_ij f_ij(t)`` where
``f_ij`` is a Normal density truncated at 0 (``gaussian`` family) or a Gamma
density (``gamma`` family).  Encounter counts are ``Poisson(m_ij) + 5`` with
``m_ij`` a Gamma quantile of a latent normal, only draws in ``[0, E]`` are
kept and the observed history is cut at the censor time.  Event times follow
the PO model with ``log alpha(t) = 3 log t + alpha_c``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from .data_model import CohortData, EncounterChannel, Patient

__all__ = [
    "SimConfig",
    "ChannelHyper",
    "SimTruth",
    "SimulatedCohort",
    "ReplicationResult",
    "StudyResult",
    "draw_hyperparameters",
    "gen_censoring",
    "gen_gaussian_intensities",
    "gen_gamma_intensities",
    "gen_counts_and_arrivals",
    "true_features",
    "gen_event_times",
    "simulate_cohort",
    "zero_encounter_rates",
    "run_replication",
    "run_replication_study",
]

log = logging.getLogger(__name__)

K2 = (0.6, 0.48, 0.36, 1.2, 0.6, 0.9, 0.54, 1.26, 0.45, 0.468)
THETA2 = (10.0, 6.0, 20.0, 4.0, 8.0, 9.0, 6.5, 5.0, 16.0, 14.0)
ALPHA_C = {("gaussian", 30): 7.5, ("gaussian", 70): 1.1, ("gamma", 30): 6.8, ("gamma", 70): 1.9}
HYPER_STREAM = 2**32 - 1  # spawn key of the fixed-hyperparameter stream


def _default_beta(q: int) -> tuple:
    beta = [0.0] * (2 * q)
    beta[0], beta[1] = -4.0, -3.0
    return tuple(beta)


@dataclass(frozen=True)
class SimConfig:
    """Settings of one simulation regime.

    ``alpha_c`` defaults to the value matching ``censoring`` (30 or 70
    percent) for the chosen family.  ``true_beta`` acts on the true features
    ``(log peak, logit(change point / peak))`` of every channel.
    """

    n: int = 400
    N: int = 3600
    q: int = 10
    horizon: float = 20.0
    family: str = "gaussian"
    correlation: str = "independent"
    censoring: int = 30
    alpha_c: float | None = None
    true_beta: tuple | None = None
    k2: tuple = K2
    theta2: tuple = THETA2
    n_valid: int = 5000
    fix_hyperparameters: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n + self.N < 2 or self.n < 1 or self.N < 0:
            raise ValueError("need n >= 1 labeled and n + N >= 2 subjects")
        if self.family not in ("gaussian", "gamma"):
            raise ValueError(f"unknown intensity family {self.family!r}")
        if self.correlation not in ("independent", "ar0.5"):
            raise ValueError("correlation must be 'independent' or 'ar0.5'")
        if len(self.k2) != self.q or len(self.theta2) != self.q:
            raise ValueError("k2 and theta2 need one entry per channel")
        if self.alpha_c is None and (self.family, self.censoring) not in ALPHA_C:
            raise ValueError("censoring must be 30 or 70 unless alpha_c is given")
        if self.alpha_c is not None and not math.isfinite(self.alpha_c):
            raise ValueError("alpha_c must be finite")
        if self.true_beta is not None and len(self.true_beta) != 2 * self.q:
            raise ValueError("true_beta needs two entries per channel")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def alpha(self) -> float:
        return float(self.alpha_c if self.alpha_c is not None else ALPHA_C[(self.family, self.censoring)])

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.true_beta if self.true_beta is not None else _default_beta(self.q), float)

    @property
    def sigma(self) -> np.ndarray:
        idx = np.arange(self.q)
        if self.correlation == "independent":
            return np.eye(self.q)
        return 0.5 ** np.abs(idx[:, None] - idx[None, :])


@dataclass(frozen=True)
class ChannelHyper:
    """Channel-level hyperparameters (one value per channel)."""

    family: str
    k1: np.ndarray | None = None      # gaussian: Gamma shape of the peak distribution
    theta1: np.ndarray | None = None  # gaussian: Gamma scale of the peak distribution
    k_lo: np.ndarray | None = None    # gamma: range of the subject shapes
    k_hi: np.ndarray | None = None
    a: np.ndarray | None = None       # gamma: Gamma(a, scale b) law of subject scales
    b: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}


def draw_hyperparameters(cfg: SimConfig, rng: np.random.Generator) -> ChannelHyper:
    q = cfg.q
    if cfg.family == "gaussian":
        return ChannelHyper("gaussian", k1=rng.uniform(3, 6, q), theta1=rng.uniform(2, 3, q))
    return ChannelHyper("gamma", k_lo=rng.uniform(2, 4, q), k_hi=rng.uniform(4, 6, q),
                        a=rng.uniform(3, 6, q), b=rng.uniform(2, 4, q))


def gen_censoring(count: int, rng, horizon: float = 20.0) -> np.ndarray:
    """Draws from ``0.909 Uniform[0, E) + 0.091 point mass at E`` (zeros redrawn)."""
    rng = np.random.default_rng(rng)
    C = np.where(rng.uniform(size=count) < 0.091, horizon, rng.uniform(0.0, horizon, count))
    zero = C <= 0
    while np.any(zero):
        C[zero] = rng.uniform(0.0, horizon, int(zero.sum()))
        zero = C <= 0
    return C


def _latent(cfg: SimConfig, rng, size: int) -> np.ndarray:
    """Rows of ``MNormal(0, Sigma)`` for the chosen correlation."""
    L = np.linalg.cholesky(cfg.sigma)
    return rng.standard_normal((size, cfg.q)) @ L.T


def gen_gaussian_intensities(cfg: SimConfig, rng, size: int, hyper: ChannelHyper):
    """Peak locations ``mu`` and spreads ``sigma`` (each ``size x q``)."""
    rng = np.random.default_rng(rng)
    nu = _latent(cfg, rng, size)
    mu = stats.gamma.ppf(ndtr(nu), hyper.k1[None, :], scale=hyper.theta1[None, :])
    mu = np.maximum(mu, 1.0)
    median = stats.gamma.ppf(0.5, hyper.k1, scale=hyper.theta1)
    s = np.minimum(0.9 * mu, median[None, :])
    sigma = rng.uniform(0.5, s)
    return mu, sigma


def gen_gamma_intensities(cfg: SimConfig, rng, size: int, hyper: ChannelHyper):
    """Subject shapes ``k`` and scales ``theta`` (each ``size x q``)."""
    rng = np.random.default_rng(rng)
    nu = _latent(cfg, rng, size)
    k = hyper.k_lo[None, :] + (hyper.k_hi - hyper.k_lo)[None, :] * ndtr(nu)
    q3 = stats.gamma.ppf(0.75, hyper.a, scale=hyper.b)
    theta = np.empty((size, cfg.q))
    for j in range(cfg.q):
        out = rng.gamma(hyper.a[j], hyper.b[j], size)
        bad = out > q3[j]
        while np.any(bad):
            out[bad] = rng.gamma(hyper.a[j], hyper.b[j], int(bad.sum()))
            bad = out > q3[j]
        theta[:, j] = out
    return k, theta


def _sample_times(family, p1, p2, counts, rng):
    """Concatenated draws from each subject's density, ``counts[i]`` per subject."""
    a = np.repeat(p1, counts)
    b = np.repeat(p2, counts)
    if family == "gaussian":
        lo = ndtr(-a / b)
        u = lo + (1.0 - lo) * rng.uniform(size=a.size)
        return np.maximum(a + b * ndtri(np.minimum(u, 1.0 - 1e-16)), 0.0)
    return rng.gamma(a, b)


def gen_counts_and_arrivals(cfg: SimConfig, intensities, censor_times, rng):
    """Encounter times per subject and channel.

    Returns ``(full, observed, expected)`` where ``full[i][j]`` holds the
    retained draws in ``[0, E]``, ``observed[i][j]`` the part in
    ``[0, C_i]`` and ``expected`` the ``size x q`` matrix of ``m_ij``.
    """
    rng = np.random.default_rng(rng)
    p1, p2 = intensities
    size = p1.shape[0]
    iota = _latent(cfg, rng, size)
    m = stats.gamma.ppf(ndtr(iota), np.asarray(cfg.k2)[None, :], scale=np.asarray(cfg.theta2)[None, :])
    C = np.asarray(censor_times, dtype=float)
    full = [[None] * cfg.q for _ in range(size)]
    observed = [[None] * cfg.q for _ in range(size)]
    for j in range(cfg.q):
        counts = rng.poisson(m[:, j]) + 5
        t = _sample_times(cfg.family, p1[:, j], p2[:, j], counts, rng)
        ends = np.cumsum(counts)
        starts = ends - counts
        for i in range(size):
            ti = t[starts[i]:ends[i]]
            ti = np.sort(ti[ti <= cfg.horizon])
            full[i][j] = ti
            observed[i][j] = ti[: np.searchsorted(ti, C[i], side="right")]
    return full, observed, m


def true_features(family: str, p1, p2):
    """True peak, change point and features ``(log peak, logit(cp / peak))`` per channel.

    Gaussian: peak ``mu``, change point ``mu - sigma``.  Gamma: mode
    ``(k - 1) theta`` and the inflection point below it
    ``theta (k - 1 - sqrt(k - 1))``.  The feature matrix interleaves the two
    features channel by channel.
    """
    p1 = np.asarray(p1, float)
    p2 = np.asarray(p2, float)
    if family == "gaussian":
        peak, cp = p1, p1 - p2
    else:
        peak = (p1 - 1.0) * p2
        cp = p2 * (p1 - 1.0 - np.sqrt(p1 - 1.0))
    ratio = cp / peak
    Z = np.empty(p1.shape[:-1] + (2 * p1.shape[-1],))
    Z[..., 0::2] = np.log(peak)
    Z[..., 1::2] = np.log(ratio) - np.log1p(-ratio)
    if not np.all(np.isfinite(Z)):
        raise ValueError("non-finite true feature")
    return peak, cp, Z


def gen_event_times(Z, beta, alpha_c: float, rng) -> np.ndarray:
    """Inverse-CDF draws from the PO model with ``alpha(t) = t^3 exp(alpha_c)``."""
    Z = np.asarray(Z, dtype=float)
    eta = Z @ np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("non-finite linear predictor")
    rng = np.random.default_rng(rng)
    V = rng.uniform(size=eta.size)
    while np.any(V == 0):
        V[V == 0] = rng.uniform(size=int(np.sum(V == 0)))
    return np.exp((np.log(V) - np.log1p(-V) - eta - alpha_c) / 3.0)


@dataclass
class SimTruth:
    """Ground truth behind a simulated cohort (rows follow the cohort's patients)."""

    params: tuple          # (mu, sigma) or (k, theta), each size x q
    peak: np.ndarray
    change_point: np.ndarray
    Z: np.ndarray          # true features, size x 2q
    T: np.ndarray
    C: np.ndarray
    X: np.ndarray
    delta: np.ndarray
    expected_counts: np.ndarray
    full_times: list       # retained draws in [0, E] before censoring


@dataclass
class SimulatedCohort:
    cohort: CohortData
    truth: SimTruth
    hyper: ChannelHyper


def _patients(prefix, observed, C, X, D, labeled):
    out = []
    for i, chans in enumerate(observed):
        channels = tuple(EncounterChannel(j + 1, t) for j, t in enumerate(chans))
        if labeled[i]:
            out.append(Patient(f"{prefix}{i:06d}", float(C[i]), channels, float(X[i]), int(D[i])))
        else:
            out.append(Patient(f"{prefix}{i:06d}", float(C[i]), channels))
    return out


def simulate_cohort(cfg: SimConfig, rng, size: int | None = None, n_labeled: int | None = None,
                    hyper: ChannelHyper | None = None, prefix: str = "p") -> SimulatedCohort:
    """One cohort of ``size`` subjects (default ``n + N``), the first ``n_labeled`` labeled."""
    rng = np.random.default_rng(rng)
    size = cfg.n + cfg.N if size is None else size
    n_labeled = cfg.n if n_labeled is None else n_labeled
    if hyper is None:
        hyper = draw_hyperparameters(cfg, rng)
    C = gen_censoring(size, rng, cfg.horizon)
    if cfg.family == "gaussian":
        params = gen_gaussian_intensities(cfg, rng, size, hyper)
    else:
        params = gen_gamma_intensities(cfg, rng, size, hyper)
    full, observed, m = gen_counts_and_arrivals(cfg, params, C, rng)
    peak, cp, Z = true_features(cfg.family, *params)
    T = gen_event_times(Z, cfg.beta, cfg.alpha, rng)
    X = np.minimum(T, C)
    D = (T <= C).astype(int)
    labeled = np.arange(size) < n_labeled
    pats = _patients(prefix, observed, C, X, D, labeled)
    cohort = CohortData(tuple(p for p in pats if p.labeled), tuple(p for p in pats if not p.labeled),
                        cfg.q, horizon=cfg.horizon)
    truth = SimTruth(params, peak, cp, Z, T, C, X, D, m, full)
    return SimulatedCohort(cohort, truth, hyper)


def zero_encounter_rates(cfg: SimConfig, rng, size: int, hyper: ChannelHyper | None = None) -> np.ndarray:
    """Per-channel share of subjects with no observed encounter.

    Consumes the random stream in the same order as :func:`simulate_cohort`
    but never builds per-subject arrays, so it scales to very large ``size``.
    """
    rng = np.random.default_rng(rng)
    if hyper is None:
        hyper = draw_hyperparameters(cfg, rng)
    C = gen_censoring(size, rng, cfg.horizon)
    if cfg.family == "gaussian":
        p1, p2 = gen_gaussian_intensities(cfg, rng, size, hyper)
    else:
        p1, p2 = gen_gamma_intensities(cfg, rng, size, hyper)
    iota = _latent(cfg, rng, size)
    m = stats.gamma.ppf(ndtr(iota), np.asarray(cfg.k2)[None, :], scale=np.asarray(cfg.theta2)[None, :])
    rates = np.empty(cfg.q)
    for j in range(cfg.q):
        counts = rng.poisson(m[:, j]) + 5
        t = _sample_times(cfg.family, p1[:, j], p2[:, j], counts, rng)
        t[t > cfg.horizon] = np.inf
        first = np.minimum.reduceat(t, np.cumsum(counts) - counts)
        rates[j] = np.mean(first > C)
    return rates


# ---------------------------------------------------------------------------
# replication study
# ---------------------------------------------------------------------------

ARMS = (("true", False), ("true", True), ("estimated", False), ("estimated", True))


@dataclass
class ReplicationResult:
    rep: int
    rows: list = field(default_factory=list)  # one dict per arm
    censoring_rate: float = float("nan")
    seconds: float = 0.0


def _rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, rep]))


def _fit_arm(Z, Zv, labeled_X, labeled_D, labeled_C, valid, groups, select, n_knots, horizon):
    from .evaluation import cutoff_search
    from .po_model import PoData, fit_profile, predict
    from .selection import tune_lambda
    from .spline import place_knots

    basis = place_knots(labeled_X, n_knots, "percentile", horizon=horizon)
    data = PoData(Z, labeled_X, labeled_D, basis, censor_times=labeled_C)
    fit = fit_profile(data)
    if not fit.converged:
        raise RuntimeError(f"PO fit did not converge (max gradient {fit.max_gradient:.3g})")
    beta, se = fit.beta, np.sqrt(np.diag(fit.beta_cov)) if fit.beta_cov is not None else np.full(fit.beta.size, np.nan)
    size = fit.beta.size + fit.gamma.size
    used = fit
    extra = {}
    if select:
        sel = tune_lambda(fit, data, groups, criterion="bic")
        used = fit.with_params(sel.beta, sel.gamma)
        beta, size = sel.beta, sel.model_size
        extra["max_kkt"] = max(pt.kkt for pt in sel.path)
        extra["active_groups"] = [int(g) for g in sel.active_groups]
    pred = predict(used, Zv, valid.C)
    rep = cutoff_search(pred.pi_C, pred.T_hat, valid.C, valid.X, valid.delta, curves="best")
    return {
        "beta": beta, "se": se, "model_size": size,
        "c_delta_inclusive": rep.delta_auc_inclusive, "c_delta_strict": rep.delta_auc_strict,
        "ape": rep.best_ape, "cutoff": rep.best_u, "c_u": rep.best_c, "c_u_plus": rep.best_c_plus,
        **extra,
    }


def run_replication(cfg: SimConfig, rep: int, arms=ARMS, n_knots: int = 9) -> ReplicationResult:
    """Simulate one training cohort and validation set, then fit every requested arm."""
    from .fpca import FeatureBuilder, KernelConfig, fit_fpca

    t0 = time.perf_counter()
    rng = _rep_rng(cfg.seed, rep)
    hyper = None
    if cfg.fix_hyperparameters:
        hyper = draw_hyperparameters(cfg, _rep_rng(cfg.seed, HYPER_STREAM))
    else:
        hyper = draw_hyperparameters(cfg, rng)
    train = simulate_cohort(cfg, rng, hyper=hyper, prefix="t")
    valid = simulate_cohort(cfg, rng, size=cfg.n_valid, n_labeled=cfg.n_valid, hyper=hyper, prefix="v")
    tr, va = train.truth, valid.truth
    n = cfg.n
    result = ReplicationResult(rep, censoring_rate=float(1.0 - tr.delta.mean()))
    builder = None
    for kind, select in arms:
        row = {"rep": rep, "features": kind, "selection": select, "error": None}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                if kind == "true":
                    Z, Zv = tr.Z[:n], va.Z
                    groups = [[2 * j, 2 * j + 1] for j in range(cfg.q)]
                else:
                    if builder is None:
                        model = fit_fpca(train.cohort, KernelConfig(), pve=0.9, fit_on="pooled")
                        builder = FeatureBuilder(model).fit(train.cohort.patients)
                    fm = builder.transform(train.cohort.labeled)
                    Z, Zv = fm.Z, builder.transform(valid.cohort.labeled).Z
                    groups = fm.groups
                row.update(_fit_arm(Z, Zv, tr.X[:n], tr.delta[:n], tr.C[:n], va, groups, select,
                                    n_knots, cfg.horizon))
        except Exception as exc:  # recorded and excluded, never silent
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.warning("replication %d arm %s/%s failed: %s", rep, kind, select, row["error"])
        result.rows.append(row)
    result.seconds = time.perf_counter() - t0
    return result


@dataclass
class StudyResult:
    cfg: SimConfig
    reps: list

    def rows(self):
        for r in self.reps:
            for row in r.rows:
                yield r, row

    def failures(self) -> dict:
        out = {}
        for _, row in self.rows():
            if row["error"] is not None:
                key = f"{row['features']}/{'select' if row['selection'] else 'full'}"
                out[key] = out.get(key, 0) + 1
        return out

    def coefficient_table(self) -> list:
        """Bias, sd, mean se and 95% coverage of the first group's coefficients (true features)."""
        out = []
        truth = self.cfg.beta
        for kind, select in ARMS:
            ok = [row for _, row in self.rows()
                  if row["features"] == kind and row["selection"] == select and row["error"] is None]
            n_fail = sum(1 for _, row in self.rows()
                         if row["features"] == kind and row["selection"] == select and row["error"] is not None)
            if kind != "true" or (not ok and not n_fail):
                continue
            for k, name in ((0, "beta11"), (1, "beta12")):
                est = np.array([row["beta"][k] for row in ok])
                se = np.array([row["se"][k] for row in ok])
                cover = np.abs(est - truth[k]) <= 1.959963984540054 * se
                out.append({
                    "features": kind, "selection": select, "parameter": name, "true": truth[k],
                    "bias": float(est.mean() - truth[k]) if est.size else float("nan"),
                    "sd": float(est.std(ddof=1)) if est.size > 1 else float("nan"),
                    "mean_se": float(np.nanmean(se)) if se.size else float("nan"),
                    "coverage95": float(cover.mean()) if est.size else float("nan"),
                    "n_ok": len(ok), "n_failed": n_fail,
                })
        return out

    def accuracy_table(self) -> list:
        metrics = ("c_delta_inclusive", "c_delta_strict", "ape", "cutoff", "c_u", "c_u_plus", "model_size")
        out = []
        for kind, select in ARMS:
            ok = [row for _, row in self.rows()
                  if row["features"] == kind and row["selection"] == select and row["error"] is None]
            if not ok:
                continue
            for m in metrics:
                v = np.array([row[m] for row in ok], dtype=float)
                out.append({"features": kind, "selection": select, "metric": m,
                            "mean": float(np.nanmean(v)), "sd": float(np.nanstd(v, ddof=1)) if v.size > 1 else float("nan"),
                            "n_ok": len(ok)})
        return out

    def summary(self) -> dict:
        cens = np.array([r.censoring_rate for r in self.reps])
        return {
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.cfg).items()},
            "alpha_c": self.cfg.alpha,
            "replications": len(self.reps),
            "mean_censoring_rate": float(cens.mean()) if cens.size else float("nan"),
            "failures": self.failures(),
            "coefficients": self.coefficient_table(),
            "accuracy": self.accuracy_table(),
            "c_delta_definition": "AUC of pi_C for the event indicator (inclusive and strict ties)",
        }


def _table_csv(rows) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def replicates_csv(study: StudyResult) -> str:
    rows = []
    for r, row in study.rows():
        beta = row.get("beta")
        se = row.get("se")
        rows.append({
            "rep": r.rep, "features": row["features"], "selection": row["selection"],
            "censoring_rate": r.censoring_rate,
            "beta11": float(beta[0]) if beta is not None else float("nan"),
            "beta12": float(beta[1]) if beta is not None else float("nan"),
            "se11": float(se[0]) if se is not None else float("nan"),
            "se12": float(se[1]) if se is not None else float("nan"),
            "model_size": row.get("model_size", ""),
            "c_delta_inclusive": row.get("c_delta_inclusive", float("nan")),
            "c_delta_strict": row.get("c_delta_strict", float("nan")),
            "ape": row.get("ape", float("nan")),
            "c_u": row.get("c_u", float("nan")),
            "c_u_plus": row.get("c_u_plus", float("nan")),
            "max_kkt": row.get("max_kkt", ""),
            "active_groups": " ".join(str(g + 1) for g in row.get("active_groups", [])),
            "error": row["error"] or "",
        })
    return _table_csv(rows)


def _run_one(args):
    cfg, rep, arms = args
    return run_replication(cfg, rep, arms)


def run_replication_study(cfg: SimConfig, reps: int = 50, arms=ARMS, workers: int = 1) -> StudyResult:
    """Run ``reps`` independent replications; results are ordered by replication index.

    Every replication draws from its own stream seeded by ``(seed, rep)``, so
    the outcome does not depend on ``workers``.
    """
    jobs = [(cfg, r, tuple(arms)) for r in range(reps)]
    if workers <= 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    return StudyResult(cfg, results)
