import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resloc.models import (
    AgentState,
    AttackSignal,
    CorruptStateError,
    ImuInput,
    NoiseConfig,
    Pose,
    SingularGeometryError,
    measure,
    measure_jacobian,
    measurement_jacobian,
    predict_measurement,
    propagate,
    propagate_jacobian,
    propagate_state,
    propagation_jacobian,
    wrap_angle,
)

from oracles import F_block, H_pair, f_block, finite_difference, h_pair


def noise(Ts=1.0):
    return NoiseConfig((0.5, 0.5, 1e-4, 1e-4, math.pi / 1800), (1e-3, 1e-3, 2e-5),
                       (1.0, math.pi / 360, math.pi / 360), Ts)


finite = st.floats(-10, 10, allow_nan=False)
heading = st.floats(-math.pi, math.pi, allow_nan=False)


@pytest.mark.parametrize(
    "state, inp, Ts, expected",
    [
        ((0, 0, 1, 0, 0), (0, 0, 0), 1.0, (1, 0, 1, 0, 0)),
        ((0, 0, 1, 0, math.pi / 2), (0, 0, 0), 1.0, (0, 1, 1, 0, math.pi / 2)),
        ((0, 0, 0, 0, 0), (2, 0, 0.1), 0.5, (0, 0, 1, 0, 0.05)),
    ],
)
def test_propagate_state_examples(state, inp, Ts, expected):
    out = propagate_state(AgentState(*state), ImuInput(*inp), noise(Ts))
    np.testing.assert_allclose(out.as_array(), expected, atol=1e-12)


def test_propagate_rejects_non_finite():
    with pytest.raises(CorruptStateError):
        propagate_state(AgentState(0, 0, math.nan, 0, 0), ImuInput(0, 0, 0), noise())


@given(finite, finite, st.floats(0.01, 5))
def test_zero_velocity_zero_input_is_identity(x, y, Ts):
    s = AgentState(x, y, 0.0, 0.0, 0.3)
    out = propagate_state(s, ImuInput(0, 0, 0), noise(Ts))
    assert (out.x, out.y, out.theta) == (x, y, 0.3)


def test_propagation_jacobian_examples():
    s = AgentState(3, 4, 1, 0, 0)
    np.testing.assert_array_equal(propagation_jacobian(s, ImuInput(0, 0, 0), 0.0), np.eye(5))
    J = propagation_jacobian(s, ImuInput(0, 0, 0), 1.0)
    assert J[0, 4] == pytest.approx(0.0)
    assert J[1, 4] == pytest.approx(1.0)


def test_jacobians_match_finite_differences_bulk():
    rng = np.random.default_rng(7)
    worst_f = worst_h = 0.0
    for _ in range(1000):
        x = np.r_[rng.uniform(-10, 10, 2), rng.uniform(-2, 2, 2), rng.uniform(-math.pi, math.pi)]
        u = rng.normal(size=3)
        # keep theta away from the wrap seam so the difference quotient is smooth
        x[4] = np.clip(x[4], -3.0, 3.0)
        Jf = finite_difference(lambda s: propagate(s, u, 0.1), x)
        worst_f = max(worst_f, np.max(np.abs(Jf - propagate_jacobian(x, 0.1))))
        qo = np.r_[rng.uniform(-10, 10, 2), rng.uniform(-3.0, 3.0)]
        qt = np.r_[rng.uniform(-10, 10, 2), rng.uniform(-3.0, 3.0)]
        if np.hypot(*(qt[:2] - qo[:2])) < 0.5:
            continue
        z0 = measure(qo, qt)
        if min(abs(abs(z0[1]) - math.pi), abs(abs(z0[2]) - math.pi)) < 1e-2:
            continue

        def h(v):
            return measure(v[:3], v[3:])

        Jh = finite_difference(h, np.r_[qo, qt])
        worst_h = max(worst_h, np.max(np.abs(Jh - measure_jacobian(qo, qt))))
    assert worst_f <= 1e-6
    assert worst_h <= 1e-6


def test_jacobians_match_geometric_oracle():
    rng = np.random.default_rng(11)
    for _ in range(200):
        x = rng.normal(size=5) * 3
        np.testing.assert_allclose(propagate_jacobian(x, 0.1), F_block(x, 0.1), atol=1e-14)
        np.testing.assert_allclose(propagate(x, np.ones(3), 0.1), f_block(x, np.ones(3), 0.1), atol=1e-12)
        qo, qt = rng.normal(size=3) * 5, rng.normal(size=3) * 5
        np.testing.assert_allclose(measure_jacobian(qo, qt), H_pair(qo, qt), atol=1e-12)
        np.testing.assert_allclose(measure(qo, qt), h_pair(qo, qt), atol=1e-12)


@pytest.mark.parametrize(
    "obs, tgt, eps, expected",
    [
        ((0, 0, 0), (3, 4, 0), (0, 0), (5.0, wrap_angle(math.pi + math.atan2(4, 3)), math.atan2(4, 3))),
        ((0, 0, 0), (1, 0, 0), (0, 0), (1.0, math.pi, 0.0)),
        ((0, 0, 0), (3, 4, 0), (2, 0), (math.sqrt(41), wrap_angle(math.pi + math.atan2(4, 5)), math.atan2(4, 5))),
    ],
)
def test_predict_measurement_examples(obs, tgt, eps, expected):
    z = predict_measurement(Pose(*obs), Pose(*tgt), AttackSignal(*eps), "RF0", "anchor")
    assert (z.range, z.aoa, z.aod) == pytest.approx(expected, abs=1e-12)
    assert z.source_kind == "anchor"


def test_predict_measurement_coincident_raises():
    with pytest.raises(SingularGeometryError):
        predict_measurement(Pose(1, 1, 0), Pose(1, 1, 2))
    with pytest.raises(SingularGeometryError):
        # the spoofing offset can also collapse the effective geometry
        predict_measurement(Pose(0, 0, 0), Pose(-2, 0, 0), AttackSignal(2, 0))


def test_measurement_jacobian_examples():
    J = measurement_jacobian(Pose(0, 0, 0), Pose(1, 0, 0))
    assert J[0, 0] == -1.0 and J[0, 3] == 1.0
    assert J[1, 2] == -1.0 and J[2, 5] == -1.0
    with pytest.raises(SingularGeometryError):
        measurement_jacobian(Pose(2, 2, 0), Pose(2, 2, 1))


@given(st.tuples(finite, finite, heading), st.tuples(finite, finite, heading), finite, finite)
def test_measurement_translation_invariant(o, t, dx, dy):
    if math.hypot(t[0] - o[0], t[1] - o[1]) < 1e-3:
        return
    z1 = measure(np.array(o), np.array(t))
    z2 = measure(np.array([o[0] + dx, o[1] + dy, o[2]]), np.array([t[0] + dx, t[1] + dy, t[2]]))
    assert z1[0] == pytest.approx(z2[0], rel=1e-9, abs=1e-9)
    for a, b in zip(z1[1:], z2[1:]):
        assert abs(wrap_angle(a - b)) < 1e-6


@given(st.tuples(finite, finite, heading), st.tuples(finite, finite, heading))
def test_angles_in_half_open_interval(o, t):
    if math.hypot(t[0] - o[0], t[1] - o[1]) < 1e-6:
        return
    z = measure(np.array(o), np.array(t))
    assert z[0] >= 0
    assert -math.pi < z[1] <= math.pi and -math.pi < z[2] <= math.pi


@pytest.mark.parametrize("a, expected", [(0.0, 0.0), (1.5 * math.pi, -0.5 * math.pi), (-math.pi, math.pi),
                                         (math.pi, math.pi), (7 * math.pi, math.pi), (-3 * math.pi, math.pi)])
def test_wrap_angle_examples(a, expected):
    assert wrap_angle(a) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=300)
@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_angle_range_and_congruence(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    k = (a - w) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-9
    arr = wrap_angle(np.array([a, a]))
    assert np.all(arr == pytest.approx(w, abs=1e-9))


def test_pose_heading_wrapped_on_construction():
    assert Pose(0, 0, 3 * math.pi / 2).theta == pytest.approx(-math.pi / 2)


@pytest.mark.parametrize(
    "kw",
    [
        dict(process_diag=(0.5, 0.5, 1e-4, 1e-4, 0.0)),
        dict(imu_diag=(1e-3, -1e-3, 2e-5)),
        dict(sampling_period=0.0),
        dict(rf_diag=(1.0, 0.1)),
    ],
)
def test_noise_config_rejects_bad_values(kw):
    base = dict(process_diag=(0.5, 0.5, 1e-4, 1e-4, 1e-3), imu_diag=(1e-3, 1e-3, 2e-5),
                rf_diag=(1.0, 0.01, 0.01), sampling_period=0.1)
    base.update(kw)
    with pytest.raises(ValueError):
        NoiseConfig(**base)
