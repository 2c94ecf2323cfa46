import numpy as np
import pytest
from scipy.stats import norm

from annotime.data_model import CohortData, make_patient
from annotime.fpca import (
    ChannelFpca,
    FeatureBuilder,
    FeatureMatrix,
    FpcaModel,
    KernelConfig,
    build_feature_matrix,
    default_bandwidth,
    eigendecompose,
    estimate_covariance,
    estimate_mean_density,
    estimate_scores,
    extract_features,
    fit_fpca,
    reconstruct_density,
    trapezoid_weights,
)

GRID = np.linspace(0, 1, 101)
W = trapezoid_weights(GRID)


def test_trapezoid_weights():
    assert W.sum() == pytest.approx(1.0)
    assert W[0] == pytest.approx(0.005) and W[1] == pytest.approx(0.01)


def test_point_mass_peaks_at_atom():
    mu = estimate_mean_density([np.full(50, 0.3)], 0.05, GRID)
    assert GRID[np.argmax(mu)] == pytest.approx(0.3)
    assert mu @ W == pytest.approx(1.0, abs=1e-3)


def test_uniform_density_reflection(rng):
    x = rng.uniform(size=10_000)
    mu = estimate_mean_density([x], default_bandwidth(x), GRID)
    assert np.max(np.abs(mu - 1.0)) < 0.1


def test_no_encounters_raises():
    with pytest.raises(ValueError):
        estimate_mean_density([np.zeros(0)], 0.1, GRID)
    with pytest.raises(ValueError):
        estimate_covariance([np.array([0.5])], np.ones(GRID.size), 0.1, GRID)


def test_covariance_vanishes_without_subject_effect(rng):
    times = [rng.uniform(size=5) for _ in range(2000)]
    mu = estimate_mean_density(times, 0.1, GRID)
    G = estimate_covariance(times, mu, 0.1, GRID)
    assert np.max(np.abs(G)) < 0.5
    np.testing.assert_allclose(G, G.T)


def test_covariance_matches_pair_loop(rng):
    times = [rng.uniform(size=m) for m in (3, 1, 4, 2)]
    grid = np.linspace(0, 1, 21)
    h = 0.15
    mu = estimate_mean_density(times, h, grid)

    def k(x):
        return sum(np.exp(-0.5 * ((grid - y) / h) ** 2) for y in (x, -x, 2 - x)) / (h * np.sqrt(2 * np.pi))

    g = np.zeros((21, 21))
    pairs = 0
    for s in times:
        for a in range(s.size):
            for b in range(s.size):
                if a != b:
                    g += np.outer(k(s[a]), k(s[b]))
                    pairs += 1
    np.testing.assert_allclose(estimate_covariance(times, mu, h, grid), g / pairs - np.outer(mu, mu), atol=1e-12)


def test_rank_one_operator():
    phi = np.sqrt(2) * np.cos(np.pi * GRID)
    phi /= np.sqrt(W @ phi**2)
    vals, phis, K = eigendecompose(2 * np.outer(phi, phi), GRID, 0.9)
    assert K == 1 and vals.size == 1
    assert vals[0] == pytest.approx(2.0, rel=1e-10)
    np.testing.assert_allclose(np.abs(phis[:, 0]), np.abs(phi), atol=1e-8)
    vals, phis, K = eigendecompose(np.zeros((101, 101)), GRID)
    assert K == 0 and vals.size == 0


def test_eigenfunctions_orthonormal(rng):
    A = rng.normal(size=(101, 6))
    G = A @ np.diag([5, 3, 2, 1, 0.5, 0.1]) @ A.T / 101
    vals, phis, K = eigendecompose(G, GRID, 0.9)
    gram = phis.T @ (W[:, None] * phis)
    np.testing.assert_allclose(gram, np.eye(vals.size), atol=1e-6)
    assert np.all(np.diff(vals) <= 0)
    share = np.cumsum(vals) / vals.sum()
    assert share[K - 1] >= 0.9 and (K == 1 or share[K - 2] < 0.9)
    assert eigendecompose(G, GRID, 1.0)[2] == vals.size
    with pytest.raises(ValueError):
        eigendecompose(G, GRID, 0.0)


def clusters(rng, n=200, C=10.0):
    pats = []
    for i in range(n):
        centre = 0.2 if i % 2 == 0 else 0.8
        t = np.clip(rng.normal(centre, 0.05, 6), 0, 1) * C
        pats.append(make_patient(f"p{i}", C, [t]))
    return pats


def test_two_cluster_scores_separate(rng):
    pats = clusters(rng)
    model = fit_fpca(CohortData((), tuple(pats), 1))
    ch = model.channels[0]
    assert ch.K >= 1
    s = np.array([estimate_scores(p, model, 1)[0] for p in pats])
    early, late = s[0::2], s[1::2]
    assert np.sign(early.mean()) == -np.sign(late.mean())
    assert np.all(np.sign(early) == np.sign(early[0]))
    # largest-magnitude entry of each eigenfunction is positive
    top = ch.eigenfunctions[np.argmax(np.abs(ch.eigenfunctions), axis=0), np.arange(ch.eigenfunctions.shape[1])]
    assert np.all(top > 0)


def test_zero_encounter_scores_and_reconstruction(rng):
    pats = clusters(rng)
    model = fit_fpca(CohortData((), tuple(pats), 1))
    empty = make_patient("z", 10.0, [[]])
    assert np.all(estimate_scores(empty, model, 1) == 0)
    sd = reconstruct_density(pats[0], model, j=1)
    assert np.all(sd.density >= 0)
    assert W @ sd.density * 10.0 == pytest.approx(1.0, rel=1e-12)
    assert sd.intensity_scale == 6


def single_channel(mean_density):
    return ChannelFpca(1, GRID, np.asarray(mean_density, float), None, np.zeros(0),
                       np.zeros((GRID.size, 0)), 0, 0.1, 0.2)


def test_unit_censor_time_is_identity():
    mu = np.exp(-GRID)
    mu /= W @ mu
    ch = single_channel(mu)
    sd = reconstruct_density(make_patient("a", 1.0, [[0.5]]), ch)
    np.testing.assert_allclose(sd.density, mu, rtol=1e-12)
    np.testing.assert_allclose(sd.times, GRID)


def test_peak_and_change_point_of_truncated_normal():
    C = 20.0
    dens = norm.pdf(GRID * C, 8.0, 2.0)
    ch = single_channel(dens / (W @ dens))
    p = make_patient("a", C, [[3.0, 9.0]])
    f = extract_features(reconstruct_density(p, ch), p)
    step = C * (GRID[1] - GRID[0])
    assert abs(f["peak_time"] - 8.0) <= step
    assert abs(f["change_point_time"] - 6.0) <= step
    assert f["first_arrival_time"] == 3.0 and f["count"] == 2
    assert f["logit_ratio"] == pytest.approx(np.log(f["change_point_time"] / (f["peak_time"] - f["change_point_time"])))


def test_monotone_decreasing_density():
    dens = np.exp(-3 * GRID)
    ch = single_channel(dens / (W @ dens))
    p = make_patient("a", 10.0, [[1.0]])
    f = extract_features(reconstruct_density(p, ch), p)
    assert f["peak_time"] == 0.0
    assert f["monotone_flag"]
    assert np.isfinite(f["log_peak"]) and np.isfinite(f["logit_ratio"])


def cohort_with(rng, q=1, n_lab=40, n_unl=60, with_baseline=True):
    lab, unl = [], []
    for i in range(n_lab + n_unl):
        C = rng.uniform(5, 15)
        chans = [np.sort(rng.uniform(0, C * rng.uniform(0.3, 1), rng.poisson(4) + 2)) for _ in range(q)]
        base = (rng.normal(), rng.integers(0, 2), rng.normal()) if with_baseline else ()
        if i < n_lab:
            lab.append(make_patient(f"p{i}", C, chans, event_time=C, event_indicator=0, baseline=base))
        else:
            unl.append(make_patient(f"p{i}", C, chans, baseline=base))
    return CohortData(tuple(lab), tuple(unl), q)


def test_feature_matrix_layout(rng):
    cohort = cohort_with(rng)
    fm = build_feature_matrix(cohort, fit_fpca(cohort))
    assert fm.Z.shape == (100, 6)
    assert fm.columns[:3] == ["u_1", "u_2", "u_3"]
    assert fm.groups == [[0], [1], [2], [3, 4, 5]]
    assert fm.group_names[-1] == "channel_1"
    assert fm.ids[:40] == [p.id for p in cohort.labeled]


def test_within_group_pca_spans_same_space(rng):
    cohort = cohort_with(rng, with_baseline=False)
    model = fit_fpca(cohort)
    raw = build_feature_matrix(cohort, model).Z
    pc = build_feature_matrix(cohort, model, pca_within_group=True, group_pve=1.0).Z
    assert pc.shape == raw.shape
    R = raw - raw.mean(axis=0)
    proj = pc @ np.linalg.lstsq(pc, R, rcond=None)[0]
    np.testing.assert_allclose(proj, R, atol=1e-8)


def test_degenerate_channel_layout(rng):
    cohort = cohort_with(rng, q=1, with_baseline=False)
    lab = [make_patient(p.id, p.censor_time, [p.channels[0].times, []], p.event_time, p.event_indicator)
           for p in cohort.labeled]
    unl = [make_patient(p.id, p.censor_time, [p.channels[0].times, []]) for p in cohort.unlabeled]
    c2 = CohortData(tuple(lab), tuple(unl), 2)
    model = fit_fpca(c2)
    assert model.channels[1].degenerate == "no_encounters"
    fm = FeatureBuilder(model, drop_constant=False).fit(c2.patients).transform(c2.patients)
    assert fm.columns[-2:] == ["ch2_log_first_arrival", "ch2_log_count"]
    assert fm.groups == [[0, 1, 2], [3, 4]]
    dropped = build_feature_matrix(c2, model)
    assert dropped.d < fm.d


def test_unknown_feature_name(rng):
    cohort = cohort_with(rng)
    with pytest.raises(ValueError):
        FeatureBuilder(fit_fpca(cohort), features=("nope",))


def test_feature_csv_round_trip(tmp_path, rng):
    cohort = cohort_with(rng)
    fm = build_feature_matrix(cohort, fit_fpca(cohort))
    fm.to_csv(tmp_path / "f.csv")
    back = FeatureMatrix.from_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(back.Z, fm.Z)
    assert (back.ids, back.columns, back.groups, back.group_names) == (fm.ids, fm.columns, fm.groups, fm.group_names)
    (tmp_path / "bad.csv").write_text("# group a: 0\npatient_id,x,y\np,1,2\n")
    with pytest.raises(ValueError, match="group map"):
        FeatureMatrix.from_csv(tmp_path / "bad.csv")


def test_model_dict_round_trip(rng):
    cohort = cohort_with(rng)
    model = fit_fpca(cohort, KernelConfig(grid_size=51), pve=0.8, fit_on="unlabeled")
    back = FpcaModel.from_dict(model.to_dict())
    a = build_feature_matrix(cohort, model)
    b = build_feature_matrix(cohort, back)
    np.testing.assert_allclose(b.Z, a.Z, rtol=1e-12)
    assert back.fit_on == "unlabeled" and back.channels[0].covariance is None
    with pytest.raises(ValueError):
        fit_fpca(cohort, fit_on="labeled")
    with pytest.raises(ValueError):
        KernelConfig(grid_size=5)
