import numpy as np
import pytest
from scipy import stats
from scipy.special import expit

from annotime.data_model import export_cohort, ingest_cohort
from annotime.simulation import (
    K2,
    THETA2,
    SimConfig,
    StudyResult,
    draw_hyperparameters,
    gen_censoring,
    gen_counts_and_arrivals,
    gen_event_times,
    gen_gamma_intensities,
    gen_gaussian_intensities,
    replicates_csv,
    run_replication,
    simulate_cohort,
    true_features,
    zero_encounter_rates,
)


def small(q=2, **kw):
    return SimConfig(q=q, k2=K2[:q], theta2=THETA2[:q], **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(family="weibull")
    with pytest.raises(ValueError):
        SimConfig(q=2)
    with pytest.raises(ValueError):
        small(censoring=50)
    assert small(censoring=50, alpha_c=3.0).alpha == 3.0
    assert SimConfig().beta.tolist()[:3] == [-4.0, -3.0, 0.0]


def test_censoring_mixture(rng):
    C = gen_censoring(100_000, rng, 20.0)
    assert np.all((C > 0) & (C <= 20))
    assert abs(np.mean(C == 20.0) - 0.091) < 0.01
    rest = C[C < 20]
    assert stats.kstest(rest / 20, "uniform").pvalue > 1e-3


def test_gaussian_intensity_constraints(rng):
    cfg = small(q=3)
    hyper = draw_hyperparameters(cfg, rng)
    mu, sigma = gen_gaussian_intensities(cfg, rng, 20_000, hyper)
    assert mu.min() >= 1.0
    assert np.all(sigma >= 0.5)
    assert np.all(mu - sigma > 0)
    median = stats.gamma.ppf(0.5, hyper.k1, scale=hyper.theta1)
    assert np.all(sigma <= median[None, :] + 1e-12)


def test_gamma_intensity_constraints(rng):
    cfg = small(q=3, family="gamma")
    hyper = draw_hyperparameters(cfg, rng)
    k, theta = gen_gamma_intensities(cfg, rng, 20_000, hyper)
    assert np.all((k > 2) & (k < 6))
    assert np.all((k >= hyper.k_lo) & (k <= hyper.k_hi))
    q3 = stats.gamma.ppf(0.75, hyper.a, scale=hyper.b)
    assert np.all(theta <= q3[None, :])


@pytest.mark.parametrize("corr, target", [("independent", 0.0), ("ar0.5", 0.5)])
def test_latent_correlation(corr, target):
    # with a fixed peak law the Spearman correlation of peaks equals that of the latent normals
    cfg = small(q=2, correlation=corr)
    rng = np.random.default_rng(3)
    hyper = draw_hyperparameters(cfg, rng)
    mu, _ = gen_gaussian_intensities(cfg, rng, 20_000, hyper)
    keep = np.all(mu > 1.0, axis=1)
    rho = stats.spearmanr(mu[keep, 0], mu[keep, 1])[0]
    pearson_latent = 2 * np.sin(np.pi * rho / 6)
    assert abs(pearson_latent - target) < 0.05


def test_arrivals_within_horizon_and_censoring(rng):
    cfg = small(q=2)
    sim = simulate_cohort(cfg, rng, size=300, n_labeled=100)
    for p, full in zip(sim.cohort.patients, sim.truth.full_times):
        for j, ch in enumerate(p.channels):
            assert np.all(full[j] <= cfg.horizon)
            assert np.all(ch.times <= p.censor_time)
            np.testing.assert_array_equal(ch.times, full[j][full[j] <= p.censor_time])


def test_expected_counts_identity(rng):
    # with a far horizon nothing is truncated, so E(M | m) = m + 5
    cfg = small(q=2, horizon=1e6)
    hyper = draw_hyperparameters(cfg, rng)
    params = gen_gaussian_intensities(cfg, rng, 20_000, hyper)
    full, _, m = gen_counts_and_arrivals(cfg, params, np.full(20_000, 1e6), rng)
    M = np.array([[t.size for t in row] for row in full])
    resid = M - m - 5
    assert np.all(np.abs(resid.mean(axis=0)) < 4 * np.sqrt(m.mean(axis=0) / 20_000) + 0.05)


def test_event_times_median_and_distribution(rng):
    T = gen_event_times(np.zeros((100_000, 2)), [1.0, 1.0], 0.0, rng)
    assert abs(np.median(T) - 1.0) < 0.01
    Z = np.full((100_000, 2), [0.4, -0.1])
    eta = Z @ np.array([-4.0, -3.0])
    T = gen_event_times(Z, [-4.0, -3.0], 1.1, rng)
    cdf = lambda t: expit(eta[0] + 1.1 + 3 * np.log(t))  # noqa: E731
    assert stats.kstest(T, cdf).statistic < 0.01


def test_true_features_match_numeric_modes(rng):
    t = np.linspace(1e-4, 40, 400_001)
    for mu, sd in ((6.0, 2.0), (3.0, 2.5)):
        f = stats.truncnorm.pdf(t, -mu / sd, np.inf, loc=mu, scale=sd)
        peak, cp, _ = true_features("gaussian", np.array([[mu]]), np.array([[sd]]))
        assert abs(t[np.argmax(f)] - peak[0, 0]) < 1e-3
        assert abs(t[np.argmax(np.diff(f))] - cp[0, 0]) < 1e-3
    for k, th in ((3.0, 2.0), (5.5, 1.3)):
        f = stats.gamma.pdf(t, k, scale=th)
        peak, cp, Z = true_features("gamma", np.array([[k]]), np.array([[th]]))
        assert abs(t[np.argmax(f)] - peak[0, 0]) < 1e-3
        assert abs(t[np.argmax(np.diff(f))] - cp[0, 0]) < 1e-3
        r = cp[0, 0] / peak[0, 0]
        np.testing.assert_allclose(Z[0], [np.log(peak[0, 0]), np.log(r / (1 - r))])


def test_censoring_rate_matches_model(rng):
    cfg = SimConfig()
    sim = simulate_cohort(cfg, rng)
    tr = sim.truth
    expected = np.mean(1.0 - expit(tr.Z @ cfg.beta + cfg.alpha + 3 * np.log(tr.C)))
    rate = 1.0 - tr.delta.mean()
    assert abs(rate - expected) < 3 * np.sqrt(expected * (1 - expected) / tr.C.size)
    assert np.array_equal(tr.X, np.minimum(tr.T, tr.C))


def test_heavier_censoring_regime():
    lo = simulate_cohort(small(censoring=30), np.random.default_rng(9), size=4000)
    hi = simulate_cohort(small(censoring=70), np.random.default_rng(9), size=4000)
    assert 1 - hi.truth.delta.mean() > 1 - lo.truth.delta.mean()


def test_zero_encounter_rates_consistent_with_cohort():
    cfg = small(q=3)
    sim = simulate_cohort(cfg, np.random.default_rng(21), size=2000, n_labeled=2000)
    want = [np.mean([p.channels[j].count == 0 for p in sim.cohort.patients]) for j in range(3)]
    np.testing.assert_array_equal(zero_encounter_rates(cfg, np.random.default_rng(21), 2000), want)


def test_ingest_round_trip(tmp_path):
    sim = simulate_cohort(small(q=2), np.random.default_rng(5), size=60, n_labeled=20)
    export_cohort(sim.cohort, tmp_path / "e.csv", tmp_path / "p.csv")
    back = ingest_cohort(tmp_path / "e.csv", tmp_path / "p.csv", n_channels=2)
    assert back.n == 20 and back.N == 40
    assert back.labeled == sim.cohort.labeled and back.unlabeled == sim.cohort.unlabeled


def test_replication_deterministic():
    cfg = small(q=2, n=150, N=50, n_valid=300, seed=4)
    arms = (("true", False), ("true", True), ("estimated", False))
    a = run_replication(cfg, 1, arms, n_knots=3)
    b = run_replication(cfg, 1, arms, n_knots=3)
    assert all(r["error"] is None for r in a.rows)
    for ra, rb in zip(a.rows, b.rows):
        np.testing.assert_array_equal(ra["beta"], rb["beta"])
        assert ra["ape"] == rb["ape"]
    assert a.rows[1]["max_kkt"] < 1e-6
    other = run_replication(cfg, 2, arms, n_knots=3)
    assert not np.array_equal(other.rows[0]["beta"], a.rows[0]["beta"])
    study = StudyResult(cfg, [a, other])
    s = study.summary()
    assert s["replications"] == 2 and s["failures"] == {}
    text = replicates_csv(study)
    assert text.splitlines()[0].startswith("rep,features,selection")
    assert len(text.splitlines()) == 1 + 2 * len(arms)
