"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``CRITERION k: PASS`` or ``CRITERION k: FAIL`` line
with the measured quantities, then asserts.  Criteria 4, 5 and 7 share one
50-replication study of the Gaussian, 30% censoring regime.  Criterion 10
(competitor arms and the clinical data set) is out of scope and reported as
skipped.
"""

import itertools
import math
import os
import time
import warnings

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from annotime.evaluation import apply_rule, ape, concordance
from annotime.po_model import PoData, fit_profile, loglik, score_and_hessian
from annotime.simulation import SimConfig, gen_event_times, run_replication_study, zero_encounter_rates
from annotime.spline import SplineBasis, alpha_integral, eval_basis, place_knots
from oracles import alpha_oracle, pair_concordance, simulate_po

REFERENCE_ZERO_RATES = (0.508, 0.802, 0.793, 0.767, 0.878, 0.758, 0.474, 0.594, 0.818, 0.755)


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


def fd(f, x, h=1e-5):
    out = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out.append((f(x + e) - f(x - e)) / (2 * h))
    return np.array(out)


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_criterion_1_likelihood_derivatives(report):
    t0 = time.perf_counter()
    worst_g = worst_h = 0.0
    for seed in range(100):
        rng = np.random.default_rng([1, seed])
        Z = rng.normal(size=(5, 2))
        X = rng.uniform(0.2, 10.0, 5)
        D = rng.integers(0, 2, 5)
        D[0] = 1
        basis = SplineBasis(4, [rng.uniform(1, 9)], 10.0)
        assert basis.n_basis == 5
        data = PoData(Z, X, D, basis)
        beta = rng.normal(size=2)
        gamma = rng.normal(0, 0.5, 5)
        der = score_and_hessian(data, beta, gamma)
        theta = np.concatenate([beta, gamma])

        def ll(th):
            return loglik(data, th[:2], th[2:])

        def grad(th):
            d = score_and_hessian(data, th[:2], th[2:])
            return np.concatenate([d.grad_beta, d.grad_gamma])

        g = np.concatenate([der.grad_beta, der.grad_gamma])
        H = np.block([[der.S_bb, der.S_bg], [der.S_bg.T, der.S_gg]])
        worst_g = max(worst_g, rel(g, fd(ll, theta)))
        worst_h = max(worst_h, rel(H, fd(grad, theta)))
    secs = time.perf_counter() - t0
    ok = worst_g < 1e-6 and worst_h < 1e-5 and secs < 10
    report(1, ok, f"max score rel err {worst_g:.2e}, max Hessian rel err {worst_h:.2e}, {secs:.1f} s")
    assert ok


def test_criterion_2_spline_oracle(report):
    rng = np.random.default_rng(2)
    _, X, _, _ = simulate_po(400, [1.0], -6.0, rng)
    basis = place_knots(X, 9, horizon=20.0)
    B = eval_basis(basis, np.linspace(0, 20, 1000))
    pou = float(np.max(np.abs(B.sum(axis=1) - 1)))
    worst = 0.0
    for _ in range(100):
        g = rng.normal(0, 1, basis.n_basis)
        t = rng.uniform(0.01, 20)
        want = alpha_oracle(basis.knots, 4, g, t, basis.breakpoints)
        worst = max(worst, abs(alpha_integral(basis, g, t) - want) / want)
    ok = pou < 1e-12 and worst < 1e-8
    report(2, ok, f"partition of unity err {pou:.1e}, alpha vs Simpson max rel err {worst:.1e}")
    assert ok


def test_criterion_3_self_consistency(report):
    beta_true = np.array([0.8, -0.5])
    alpha_c = -6.0
    u = np.linspace(1, 19, 181)
    m_true = alpha_c + math.log(3.0) + 2.0 * np.log(u)
    inside, sup_half, sup_full = [], [], []
    for r in range(50):
        rng = np.random.default_rng([3, r])
        Z, X, D, C = simulate_po(4000, beta_true, alpha_c, rng)
        fit = fit_profile(PoData(Z, X, D, place_knots(X, 9, horizon=20.0)))
        se = np.sqrt(np.diag(fit.beta_cov))
        inside.append(np.all(np.abs(fit.beta - beta_true) <= 3 * se))
        sup_full.append(np.max(np.abs(fit.m_hat(u) - m_true)))
        half = fit_profile(PoData(Z[:2000], X[:2000], D[:2000], place_knots(X[:2000], 9, horizon=20.0)),
                           variance=False)
        sup_half.append(np.max(np.abs(half.m_hat(u) - m_true)))
    rate = float(np.mean(inside))
    e1, e2 = float(np.mean(sup_half)), float(np.mean(sup_full))
    ok = rate >= 0.9 and e2 < e1
    report(3, ok, f"beta within 3 se in {rate:.0%} of runs; mean sup|m_hat - m| on [1,19]: "
                  f"n=2000 {e1:.3f}, n=4000 {e2:.3f}")
    assert ok


@pytest.fixture(scope="module")
def regime_study():
    cfg = SimConfig(family="gaussian", censoring=30, n=400, N=3600, seed=2024)
    t0 = time.perf_counter()
    study = run_replication_study(cfg, reps=50, arms=(("true", False), ("true", True)),
                                  workers=os.cpu_count() or 1)
    return study, time.perf_counter() - t0


def arm_rows(study, select):
    return [row for _, row in study.rows() if row["features"] == "true" and row["selection"] == select]


def test_criterion_4_coefficients(report, regime_study):
    study, secs = regime_study
    rows = arm_rows(study, False)
    ok_rows = [r for r in rows if r["error"] is None]
    b = np.array([r["beta"][0] for r in ok_rows])
    bias = float(b.mean() - study.cfg.beta[0])
    sd = float(b.std(ddof=1))
    ok = len(ok_rows) == 50 and abs(bias - 0.017) <= 0.10 and abs(sd - 0.271) <= 0.4 * 0.271 and secs <= 1800
    report(4, ok, f"bias {bias:+.3f} (target 0.017 +- 0.10), sd {sd:.3f} (target 0.271 +- 40%), "
                  f"{len(ok_rows)}/50 fits, study {secs:.0f} s")
    assert ok


def test_criterion_5_c_delta(report, regime_study):
    study, _ = regime_study
    rows = [r for r in arm_rows(study, False) if r["error"] is None]
    inc = float(np.mean([r["c_delta_inclusive"] for r in rows]))
    strict = float(np.mean([r["c_delta_strict"] for r in rows]))
    ok = abs(inc - 0.974) <= 0.01
    report(5, ok, f"mean C_Delta inclusive ties {inc:.4f}, strict ties {strict:.4f} (target 0.974 +- 0.01)")
    assert ok


def test_criterion_6_zero_encounter_rates(report):
    cfg = SimConfig(family="gaussian", correlation="independent")
    rates = zero_encounter_rates(cfg, np.random.default_rng(6), 500_000)
    err = np.abs(rates - np.array(REFERENCE_ZERO_RATES))
    ok = bool(np.all(err <= 0.02))
    report(6, ok, "rates " + " ".join(f"{r:.3f}" for r in rates) + f"; max abs err {err.max():.3f} (tol 0.02)")
    assert ok


def test_criterion_7_selection(report, regime_study):
    study, _ = regime_study
    rows = [r for r in arm_rows(study, True) if r["error"] is None]
    size = float(np.mean([r["model_size"] for r in rows]))
    kkt = float(max(r["max_kkt"] for r in rows))
    g1 = float(np.mean([0 in r["active_groups"] for r in rows]))
    ok = len(rows) == 50 and 13.0 - 1.5 <= size <= 14.1 + 1.5 and kkt < 1e-6
    report(7, ok, f"mean BIC model size {size:.2f} (band [11.5, 15.6]), max KKT residual {kkt:.1e}, "
                  f"group 1 kept in {g1:.0%}")
    assert ok


def test_criterion_8_evaluation_oracles(report):
    rng = np.random.default_rng(8)
    mismatches = checked = 0
    for n in (4, 5, 6):
        for _ in range(300):
            X = rng.choice([1.0, 2.0, 3.0, 4.0], n)
            X_hat = rng.choice([1.0, 2.0, 3.0, 4.0], n)
            D = rng.integers(0, 2, n)
            D_hat = rng.integers(0, 2, n)
            if not any(X[i] <= X[j] for i, j in itertools.combinations(range(n), 2)) or D.sum() == 0:
                continue
            rule = apply_rule(D_hat.astype(float), X_hat, X_hat, 0.5)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                got = concordance(rule, X, D)
            want = pair_concordance(X_hat, X, D_hat, D)
            ape_want = sum(abs(a - b) for a, b in zip(X_hat, X)) / n
            checked += 1
            # C_u+ is undefined (nan) when no comparable pair has an event; both sides must agree on that
            mismatches += (not np.array_equal(got, want, equal_nan=True)) or (ape(rule, X) != ape_want)
    X = rng.uniform(0, 20, 300)
    X_hat = rng.uniform(0, 20, 300)
    t = np.linspace(0, 20, 20001)
    inside = (np.minimum(X, X_hat)[:, None] < t) & (t <= np.maximum(X, X_hat)[:, None])
    gap = abs(np.trapezoid(inside.mean(axis=0), t) - ape(apply_rule(np.ones(300), X_hat, X_hat, 0.5), X))
    ok = mismatches == 0 and gap < 1e-3
    report(8, ok, f"{checked} fixtures, {mismatches} mismatches; APE time-integral gap {gap:.1e}")
    assert ok


def test_criterion_9_event_time_sampler(report):
    cfg = SimConfig()
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(5):
        z = rng.normal(size=cfg.beta.size)
        eta = float(z @ cfg.beta)
        T = gen_event_times(np.tile(z, (100_000, 1)), cfg.beta, cfg.alpha, rng)
        d = stats.kstest(T, lambda t: expit(eta + cfg.alpha + 3 * np.log(t))).statistic
        worst = max(worst, d)
    ok = worst < 0.01
    report(9, ok, f"max KS distance {worst:.4f} over 5 feature vectors at 1e5 draws")
    assert ok


def test_criterion_10_out_of_scope():
    pytest.skip("competitor arms and the clinical data set are not part of this package")
