import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resloc import hypothesis as hy
from resloc.models import NoiseConfig, measure

from oracles import (
    binomial_cdf,
    chi2_ppf_bisect,
    dense_predict,
    dense_update,
    pb_cdf_bruteforce,
    quantile_from_cdf,
)

NOISE = NoiseConfig((0.5, 0.5, 1e-4, 1e-4, math.pi / 1800), (1e-3, 1e-3, 2e-5),
                    (1.0, math.pi / 360, math.pi / 360), 0.1, tracking_diag=(0.6, 0.6, 2e-4, 2e-4, 1e-3))
DET = hy.DetectorConfig(window=10, beta=0.999, alpha_chi=0.997, alpha_d=4.0)
ANCHORS = {10: np.array([20.0, 0.0, 0.3]), 11: np.array([-5.0, 12.0, -1.0])}


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T / n + 0.1 * np.eye(n))


def random_state(rng, layout=(1, 2)):
    n = 5 * (1 + len(layout))
    mean = rng.normal(size=n) * 4
    mean[4::5] = rng.uniform(-3, 3, size=n // 5)
    mean[2::5] = rng.normal(size=n // 5)
    return hy.JointState(mean, random_spd(rng, n, 0.3), layout)


# -- joint state --------------------------------------------------------------


def test_joint_state_dimension_checked():
    with pytest.raises(ValueError):
        hy.JointState(np.zeros(10), np.eye(10), ())


def test_insert_and_remove_keep_ascending_layout():
    rng = np.random.default_rng(0)
    st_ = random_state(rng, (1, 5))
    before = st_.copy()
    st_.insert(3, np.arange(5.0), np.eye(5) * 2.0)
    assert st_.layout == (1, 3, 5)
    np.testing.assert_array_equal(st_.mean[10:15], np.arange(5.0))
    # blocks of the other sources are untouched
    np.testing.assert_array_equal(st_.pose(5)[0], before.pose(5)[0])
    st_.remove(3)
    np.testing.assert_array_equal(st_.mean, before.mean)
    np.testing.assert_array_equal(st_.cov, before.cov)


# -- prediction ---------------------------------------------------------------


def test_predict_identity_dynamics():
    st_ = hy.JointState(np.r_[1.0, 2.0, 0, 0, 0.4, 5.0, 6.0, 0, 0, -1.0], np.eye(10) * 0.2, (1,))
    h = hy.Hypothesis(st_.copy(), {1})
    hy.predict(h, np.zeros(3), {1: np.zeros(3)}, NOISE)
    np.testing.assert_allclose(h.mean, st_.mean, atol=1e-15)
    # velocity uncertainty leaks into position, but the heading only gains process noise
    assert h.cov[4, 4] == pytest.approx(0.2 + NOISE.process_diag[4])
    assert h.cov[0, 0] == pytest.approx(0.2 + NOISE.process_diag[0] + 0.2 * NOISE.sampling_period ** 2)


def test_predict_missing_neighbor_input_coasts_with_inflated_noise():
    st_ = hy.JointState(np.r_[0, 0, 0, 0, 0, 5.0, 0, 1.0, 0, 0], np.eye(10) * 0.2, (1,))
    h = hy.Hypothesis(st_.copy(), {1})
    hy.predict(h, np.zeros(3), {}, NOISE)
    q = np.r_[NOISE.process_diag, np.multiply(NOISE.tracking_diag, hy.MISSING_INPUT_NOISE_SCALE)]
    assert h.mean[5] == pytest.approx(5.1)
    np.testing.assert_allclose(np.diag(h.cov)[7:10], 0.2 + q[7:10])


@pytest.mark.parametrize("seed", range(5))
def test_predict_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    st_ = random_state(rng)
    h = hy.Hypothesis(st_.copy(), {1, 2})
    u = rng.normal(size=(3, 3))
    hy.predict(h, u[0], {1: u[1], 2: u[2]}, NOISE)
    q = np.r_[NOISE.process_diag, NOISE.tracking_diag, NOISE.tracking_diag]
    m, P = dense_predict(st_.mean, st_.cov, u, q, NOISE.sampling_period)
    np.testing.assert_allclose(h.mean, m, atol=1e-10)
    np.testing.assert_allclose(h.cov, P, atol=1e-10)


def test_predict_rejects_broken_covariance():
    st_ = hy.JointState(np.zeros(5), -np.eye(5), ())
    with pytest.raises(hy.FilterError):
        hy.predict(hy.Hypothesis(st_, ()), np.zeros(3), {}, NOISE)


# -- update -------------------------------------------------------------------


def test_update_without_applicable_measurements_is_noop():
    rng = np.random.default_rng(1)
    h = hy.Hypothesis(random_state(rng), {1, 2})
    m0, P0 = h.mean.copy(), h.cov.copy()
    # source 11 is not in the support, so nothing applies
    hy.update(h, {11: np.array([3.0, 0.1, 0.2])}, ANCHORS, NOISE)
    np.testing.assert_array_equal(h.mean, m0)
    np.testing.assert_array_equal(h.cov, P0)


def test_exact_measurement_shrinks_covariance_only():
    rng = np.random.default_rng(2)
    st_ = random_state(rng, (1,))
    h = hy.Hypothesis(st_.copy(), {1, 10})
    own = st_.mean[[0, 1, 4]]
    z = {10: measure(own, ANCHORS[10]), 1: measure(own, st_.mean[[5, 6, 9]])}
    hy.update(h, z, ANCHORS, NOISE)
    np.testing.assert_allclose(h.mean, st_.mean, atol=1e-12)
    assert np.trace(h.cov) < np.trace(st_.cov)


@pytest.mark.parametrize("seed", range(6))
def test_update_matches_dense_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    st_ = random_state(rng)
    h = hy.Hypothesis(st_.copy(), {1, 2, 10, 11})
    own = st_.mean[[0, 1, 4]]
    z = {}
    for s, tgt in ((1, st_.mean[[5, 6, 9]]), (2, st_.mean[[10, 11, 14]]), (10, ANCHORS[10]), (11, ANCHORS[11])):
        z[s] = measure(own, tgt) + rng.normal(size=3) * [0.5, 0.05, 0.05]
    hy.update(h, z, ANCHORS, NOISE)
    srcs = [("block", 1), ("block", 2), ("anchor", ANCHORS[10]), ("anchor", ANCHORS[11])]
    m, P = dense_update(st_.mean, st_.cov, srcs, [z[1], z[2], z[10], z[11]], NOISE.rf_diag)
    np.testing.assert_allclose(h.mean, m, atol=1e-10)
    np.testing.assert_allclose(h.cov, P, atol=1e-10)


def test_joint_filter_equals_dense_oracle_over_many_steps():
    """100 predict/update cycles without splitting track the flat EKF oracle."""
    rng = np.random.default_rng(5)
    st_ = random_state(rng, (1,))
    st_.cov = st_.cov + np.eye(10)
    h = hy.Hypothesis(st_.copy(), {1, 10})
    m, P = st_.mean.copy(), st_.cov.copy()
    q = np.r_[NOISE.process_diag, NOISE.tracking_diag]
    for _ in range(100):
        u = rng.normal(size=(2, 3)) * 0.1
        hy.predict(h, u[0], {1: u[1]}, NOISE)
        m, P = dense_predict(m, P, u, q, NOISE.sampling_period)
        own = m[[0, 1, 4]]
        z = {10: measure(own, ANCHORS[10]) + rng.normal(size=3) * 0.01,
             1: measure(own, m[[5, 6, 9]]) + rng.normal(size=3) * 0.01}
        hy.update(h, z, ANCHORS, NOISE)
        m, P = dense_update(m, P, [("block", 1), ("anchor", ANCHORS[10])], [z[1], z[10]], NOISE.rf_diag)
        np.testing.assert_allclose(h.mean, m, atol=1e-10)
        np.testing.assert_allclose(h.cov, P, atol=1e-10)


def test_update_keeps_covariance_symmetric_psd():
    rng = np.random.default_rng(9)
    for _ in range(20):
        st_ = random_state(rng)
        h = hy.Hypothesis(st_, {1, 2, 10})
        own = st_.mean[[0, 1, 4]]
        z = {10: measure(own, ANCHORS[10]) + rng.normal(size=3), 2: measure(own, st_.mean[[10, 11, 14]])}
        hy.update(h, z, ANCHORS, NOISE)
        np.testing.assert_array_equal(h.cov, h.cov.T)
        assert np.linalg.eigvalsh(h.cov).min() > -1e-9


# -- outlier windows ----------------------------------------------------------


def _prediction(zhat, z, S_diag=None):
    zhat = np.atleast_2d(np.asarray(zhat, float))
    z = np.atleast_2d(np.asarray(z, float))
    S = np.ones_like(zhat) if S_diag is None else np.atleast_2d(S_diag)
    return hy.Prediction([10], zhat, z, np.zeros((3, 5)), S)


def test_zero_residual_is_never_an_outlier():
    h = hy.Hypothesis(hy.JointState(np.zeros(5), np.eye(5)), {10})
    hy.record_outliers(h, _prediction([5, 0.1, 0.2], [5, 0.1, 0.2]), NOISE, DET)
    assert not h.windows[10].flags.any()


def test_large_residual_flagged_at_95_percent_gate():
    det = hy.DetectorConfig(window=5, alpha_chi=0.95)
    assert det.gate == pytest.approx(3.841, abs=1e-3)
    assert det.gate == pytest.approx(chi2_ppf_bisect(0.95, 1), rel=1e-9)
    h = hy.Hypothesis(hy.JointState(np.zeros(5), np.eye(5)), {10})
    sigma = math.sqrt(NOISE.rf_diag[0])
    hy.record_outliers(h, _prediction([5, 0, 0], [5 + 10 * sigma, 0, 0]), NOISE, det)
    assert h.windows[10].flags[0].tolist() == [True, False, False]


def test_window_is_a_ring_buffer():
    h = hy.Hypothesis(hy.JointState(np.zeros(5), np.eye(5)), {10})
    for k in range(DET.window + 3):
        hy.record_outliers(h, _prediction([5, 0, 0], [5 + (20 if k == 0 else 0), 0, 0]), NOISE, DET)
    w = h.windows[10]
    assert w.n == DET.window and w.full
    # the flagged first sample has been evicted
    assert not w.flags.any()
    flags, probs = w.ordered()
    assert flags.shape == (DET.window, 3) and np.all((probs >= 0) & (probs <= 1))


def test_outlier_probability_formula():
    S = np.array([1.0, 4.0])
    R = np.array([1.0, 1.0])
    p = hy.outlier_probability(S, R, 4.0)
    # P(|N(0, S)| > 2) for S = 1 and S = 4
    assert p[0] == pytest.approx(0.0455002638963584)
    assert p[1] == pytest.approx(0.3173105078629141)


# -- Poisson-binomial quantile --------------------------------------------------


@pytest.mark.parametrize(
    "probs, beta, expected",
    [([0.0] * 7, 0.999, 0), ([1.0] * 6, 0.5, 6), ([0.0027] * 10, 0.999, 1)],
)
def test_pb_quantile_examples(probs, beta, expected):
    assert hy.poisson_binomial_quantile(probs, beta) == expected


def test_pb_quantile_documented_cdf_values():
    cdf = binomial_cdf(10, 0.0027)
    # 0.9973**10 is 0.973326; the quoted 0.97334 only holds to about 1e-5
    assert cdf[0] == pytest.approx(0.97334, abs=5e-5)
    assert cdf[0] == pytest.approx(0.9973 ** 10, rel=1e-12)
    assert cdf[1] == pytest.approx(0.99966, abs=5e-5)


def test_pb_quantile_errors():
    with pytest.raises(ValueError):
        hy.poisson_binomial_quantile([], 0.9)
    with pytest.raises(ValueError):
        hy.poisson_binomial_quantile([0.2, 1.5], 0.9)
    with pytest.raises(ValueError):
        hy.poisson_binomial_quantile([0.2], 1.0)


@pytest.mark.parametrize("W", [1, 2, 5, 10, 15, 20])
@pytest.mark.parametrize("beta", [0.9, 0.99, 0.999])
def test_pb_quantile_equal_probs_matches_binomial(W, beta):
    for p in np.round(np.arange(0, 1.0001, 0.1), 10):
        want = quantile_from_cdf(binomial_cdf(W, float(p)), beta)
        assert hy.poisson_binomial_quantile([p] * W, beta) == want


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.sampled_from([0.5, 0.9, 0.99, 0.999]))
def test_pb_quantile_matches_bruteforce(probs, beta):
    cdf = pb_cdf_bruteforce(probs)
    got = hy.poisson_binomial_quantile(probs, beta)
    want = quantile_from_cdf(cdf, beta)
    if got != want:
        # only acceptable when the CDF sits on beta within rounding
        assert abs(cdf[min(got, want)] - beta) < 1e-12
    else:
        assert got == want


# -- rejection -----------------------------------------------------------------


def _filled(flags_range, p=0.0027, W=10):
    h = hy.Hypothesis(hy.JointState(np.zeros(5), np.eye(5)), {10, 11})
    for src in (10, 11):
        w = h.windows[src] = hy.SourceWindow(W)
        for k in range(W):
            f = src == 10 and k < flags_range
            w.push([f, False, False], [p, p, p])
    return h


def test_all_false_windows_are_consistent():
    assert hy.check_hypothesis(_filled(0), DET).consistent


def test_count_equal_to_quantile_is_consistent():
    # quantile is 1 for W=10, p=0.0027, beta=0.999
    assert hy.check_hypothesis(_filled(1), DET).consistent


def test_count_above_quantile_rejects_that_source():
    v = hy.check_hypothesis(_filled(2), DET)
    assert not v.consistent
    assert v.violating == frozenset({10})


def test_partial_window_never_rejects():
    h = hy.Hypothesis(hy.JointState(np.zeros(5), np.eye(5)), {10})
    w = h.windows[10] = hy.SourceWindow(10)
    for _ in range(9):
        w.push([True, True, True], [0.0, 0.0, 0.0])
    assert hy.check_hypothesis(h, DET).consistent


@settings(max_examples=60, deadline=None)
@given(st.lists(st.booleans(), min_size=10, max_size=10), st.integers(0, 9),
       st.lists(st.floats(0, 0.3), min_size=10, max_size=10))
def test_rejection_is_monotone_in_flags(flags, extra, probs):
    def verdict(fl):
        h = hy.Hypothesis(hy.JointState(np.zeros(5), np.eye(5)), {10})
        w = h.windows[10] = hy.SourceWindow(10)
        for f, p in zip(fl, probs):
            w.push([f, False, False], [p, p, p])
        return hy.check_hypothesis(h, DET).consistent
    more = list(flags)
    more[extra] = True
    if not verdict(flags):
        assert not verdict(more)


# -- splitting and tags ----------------------------------------------------------


def _table_with(support, layout=(1, 2)):
    rng = np.random.default_rng(3)
    st_ = random_state(rng, layout)
    table = hy.new_table(0, st_, support, anchors=(10, 11))
    return table, table.tags[0].members[0]


def test_split_three_sources_gives_two_inflated_children():
    table, h = _table_with({1, 2, 10})
    P = h.cov.copy()
    for s, c in ((1, 0), (2, 3), (10, 5)):
        w = h.windows[s] = hy.SourceWindow(DET.window)
        for k in range(c):
            w.push([True, False, False], [0.01] * 3)
    hy.split_hypothesis(table, h, DET)
    kids = table.tags[0].members
    assert len(kids) == 2
    assert sorted(sorted(k.support) for k in kids) == [[1, 2], [1, 10]]
    for k in kids:
        sub = [i for i in range(15) if i < 5 or (i // 5 - 1) < 2 and (1, 2)[i // 5 - 1] in k.state.layout]
        assert k.state.dim == 5 * (1 + len(k.state.layout))
        assert np.allclose(np.diag(k.cov)[:5], 4.0 * np.diag(P)[:5])
        assert sub  # own block always present


def test_child_blocks_marginalized():
    table, h = _table_with({1, 2, 10})
    hy.split_hypothesis(table, h, DET)
    no2 = next(k for k in table.tags[0].members if 2 not in k.support)
    assert no2.state.layout == (1,)
    np.testing.assert_allclose(no2.cov, 4.0 * h.cov[:10, :10])


def test_split_skips_duplicate_supports():
    table, h = _table_with({1, 2, 10})
    sib = hy.Hypothesis(h.state.copy(), {1, 10}, tag=0)
    table.tags[0].members.append(sib)
    h.windows[1] = hy.SourceWindow(DET.window)  # lowest count ties broken by id: 1 is kept
    hy.split_hypothesis(table, h, DET)
    sups = [frozenset(m.support) for m in table.tags[0].members]
    assert len(sups) == len(set(sups))
    assert frozenset({1, 2}) in sups and frozenset({1, 10}) in sups


def test_single_source_hypothesis_is_dropped():
    table, h = _table_with({10}, layout=())
    other = hy.Hypothesis(h.state.copy(), {11}, tag=0)
    table.tags[0].members.append(other)
    hy.split_hypothesis(table, h, DET)
    assert table.tags[0].members == [other]


def test_anchor_removal_applies_with_two_single_member_tags():
    table, h = _table_with({1, 10, 11}, layout=(1,))
    t1 = table.clone_tag(0)
    assert table.parents[t1] == 0
    for s, c in ((10, 2), (11, 6), (1, 9)):
        w = h.windows[s] = hy.SourceWindow(DET.window)
        for _ in range(c):
            w.push([True, False, False], [0.01] * 3)
    hy.initial_anchor_removal(table, h, {10, 11}, DET)
    # the neighbor has the largest count but only anchors are candidates
    assert h.support == frozenset({1, 10})
    assert 11 in h.excluded
    assert len(table.tags[0].members) == 1


def test_anchor_removal_tie_breaks_by_lowest_id():
    table, h = _table_with({1, 10, 11}, layout=(1,))
    table.clone_tag(0)
    hy.initial_anchor_removal(table, h, {10, 11}, DET)
    assert h.support == frozenset({1, 11})


def test_anchor_removal_falls_through_to_split():
    table, h = _table_with({1, 2, 10})
    table.clone_tag(0)
    table.tags[0].members.append(hy.Hypothesis(h.state.copy(), {1, 2}, tag=0))
    hy.initial_anchor_removal(table, h, {10}, DET)
    assert len(table.tags[0].members) >= 2
    assert h not in table.tags[0].members


def test_refresh_operational_union_of_members():
    table, h = _table_with({1, 2}, layout=(1, 2))
    h.support = frozenset({1, 2})
    sib = hy.Hypothesis(h.state.copy(), {2, 10}, tag=0)
    table.tags[0].members.append(sib)
    op = table.tags[0].operational
    op.support = frozenset({1, 2})
    hy.refresh_operational(table, {1, 2, 10})
    assert op.support == frozenset({1, 2, 10})
    # neighbor 1 leaves: removed from the support and its block marginalized
    hy.refresh_operational(table, {2, 10})
    assert op.support == frozenset({2, 10})
    assert 1 not in op.state.layout


def test_refresh_single_member():
    table, h = _table_with({1, 10}, layout=(1,))
    hy.refresh_operational(table, {1, 2, 10, 11})
    assert table.tags[0].operational.support == frozenset({1, 10})


def test_split_never_duplicates_and_respects_power_set_bound():
    rng = np.random.default_rng(21)
    table, h = _table_with({1, 2, 10, 11})
    for _ in range(30):
        members = table.tags[0].members
        victim = members[rng.integers(len(members))]
        if len(victim.support) > 1:
            hy.split_hypothesis(table, victim, DET)
        sups = [m.support for m in table.tags[0].members]
        assert len(sups) == len(set(sups))
        assert len(sups) <= 2 ** 4
        for m in table.tags[0].members:
            np.testing.assert_array_equal(m.cov, m.cov.T)
