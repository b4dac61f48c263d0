"""Planar motion and RF measurement models with analytic Jacobians.

State layout of one agent block is ``(x, y, v_x, v_y, theta)`` with the
velocity expressed in the body frame. An RF measurement is
``(range, aoa, aod)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

STATE_DIM = 5
POSE_IDX = (0, 1, 4)
MEAS_DIM = 3


class CorruptStateError(ValueError):
    """Raised when a model is fed non-finite values."""


class SingularGeometryError(ValueError):
    """Raised when observer and target positions coincide."""


def wrap_angle(a):
    """Wrap an angle (scalar or array) to the half-open interval (-pi, pi]."""
    if isinstance(a, np.ndarray):
        # np.mod lands in [0, 2*pi), so the result is in (-pi, pi]
        return math.pi - np.mod(math.pi - a, TWO_PI)
    if -math.pi < a <= math.pi:
        return a
    r = a - TWO_PI * math.ceil((a - math.pi) / TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    elif r > math.pi:
        r -= TWO_PI
    return r


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v_x: float
    v_y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v_x, self.v_y, self.theta])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "AgentState":
        return cls(*(float(v) for v in a[:STATE_DIM]))

    @property
    def pose(self) -> Pose:
        return Pose(self.x, self.y, self.theta)


@dataclass(frozen=True)
class ImuInput:
    a_x: float = 0.0
    a_y: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.a_x, self.a_y, self.omega])


@dataclass(frozen=True)
class AttackSignal:
    eps_x: float = 0.0
    eps_y: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.eps_x, self.eps_y])

    @property
    def active(self) -> bool:
        return self.eps_x != 0.0 or self.eps_y != 0.0


@dataclass(frozen=True)
class RfMeasurement:
    source_id: object
    range: float
    aoa: float
    aod: float
    source_kind: str = "agent"

    def as_array(self) -> np.ndarray:
        return np.array([self.range, self.aoa, self.aod])


@dataclass(frozen=True)
class NoiseConfig:
    """Diagonal noise parameterization.

    ``tracking_diag`` is the process noise applied to neighbor blocks; it
    defaults to ``process_diag`` when omitted.
    """

    process_diag: tuple
    imu_diag: tuple
    rf_diag: tuple
    sampling_period: float
    tracking_diag: tuple = field(default=None)

    def __post_init__(self):
        for name in ("process_diag", "imu_diag", "rf_diag", "tracking_diag"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(x) for x in v))
        if self.tracking_diag is None:
            object.__setattr__(self, "tracking_diag", self.process_diag)
        if len(self.process_diag) != STATE_DIM or len(self.tracking_diag) != STATE_DIM:
            raise ValueError("process noise needs 5 variances")
        if len(self.imu_diag) != 3 or len(self.rf_diag) != MEAS_DIM:
            raise ValueError("IMU and RF noise need 3 variances each")
        if self.sampling_period <= 0:
            raise ValueError("sampling period must be positive")
        if min(self.process_diag + self.tracking_diag + self.imu_diag + self.rf_diag) <= 0:
            raise ValueError("all variances must be strictly positive")

    @property
    def Q(self) -> np.ndarray:
        return np.array(self.process_diag)

    @property
    def Q_track(self) -> np.ndarray:
        return np.array(self.tracking_diag)

    @property
    def R_rf(self) -> np.ndarray:
        return np.array(self.rf_diag)

    @property
    def R_imu(self) -> np.ndarray:
        return np.array(self.imu_diag)


# -- array-level kernels used by the filter and the simulator ---------------


def propagate(x: np.ndarray, u: np.ndarray, Ts: float) -> np.ndarray:
    """Discrete motion model on raw arrays; heading is wrapped."""
    c = math.cos(x[4])
    s = math.sin(x[4])
    out = np.empty(5)
    out[0] = x[0] + Ts * (c * x[2] - s * x[3])
    out[1] = x[1] + Ts * (s * x[2] + c * x[3])
    out[2] = x[2] + Ts * u[0]
    out[3] = x[3] + Ts * u[1]
    out[4] = wrap_angle(x[4] + Ts * u[2])
    return out


def propagate_jacobian(x: np.ndarray, Ts: float) -> np.ndarray:
    c = math.cos(x[4])
    s = math.sin(x[4])
    F = np.eye(5)
    F[0, 2] = Ts * c
    F[0, 3] = -Ts * s
    F[0, 4] = Ts * (-s * x[2] - c * x[3])
    F[1, 2] = Ts * s
    F[1, 3] = Ts * c
    F[1, 4] = Ts * (c * x[2] - s * x[3])
    return F


def measure(q_obs: np.ndarray, q_tgt: np.ndarray, eps=None) -> np.ndarray:
    """Range/AOA/AOD from observer pose to target pose (both ``(x, y, theta)``)."""
    dx = q_tgt[0] - q_obs[0]
    dy = q_tgt[1] - q_obs[1]
    if eps is not None:
        dx += eps[0]
        dy += eps[1]
    r = math.hypot(dx, dy)
    if r == 0.0:
        raise SingularGeometryError("coincident positions, bearing undefined")
    b = math.atan2(dy, dx)
    return np.array([r, wrap_angle(math.pi + b - q_obs[2]), wrap_angle(b - q_tgt[2])])


def measure_jacobian(q_obs: np.ndarray, q_tgt: np.ndarray) -> np.ndarray:
    """3x6 Jacobian w.r.t. ``(x_o, y_o, theta_o, x_t, y_t, theta_t)``."""
    dx = q_tgt[0] - q_obs[0]
    dy = q_tgt[1] - q_obs[1]
    r2 = dx * dx + dy * dy
    if r2 == 0.0:
        raise SingularGeometryError("zero range, Jacobian singular")
    r = math.sqrt(r2)
    J = np.zeros((3, 6))
    J[0, 0] = -dx / r
    J[0, 1] = -dy / r
    J[0, 3] = dx / r
    J[0, 4] = dy / r
    db = np.array([dy / r2, -dx / r2, -dy / r2, dx / r2])
    J[1, [0, 1, 3, 4]] = db
    J[2, [0, 1, 3, 4]] = db
    J[1, 2] = -1.0
    J[2, 5] = -1.0
    return J


# -- typed surface ----------------------------------------------------------


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise CorruptStateError("non-finite value in model input")


def propagate_state(state: AgentState, inp: ImuInput, noise: NoiseConfig) -> AgentState:
    x = state.as_array()
    u = inp.as_array()
    _finite(x, u)
    return AgentState.from_array(propagate(x, u, noise.sampling_period))


def propagation_jacobian(state: AgentState, inp: ImuInput, Ts: float) -> np.ndarray:
    # the model is affine in the input, so the state Jacobian ignores it
    return propagate_jacobian(state.as_array(), Ts)


def predict_measurement(observer: Pose, target: Pose, eps: AttackSignal = AttackSignal(),
                        source_id=None, source_kind: str = "agent") -> RfMeasurement:
    z = measure(observer.as_array(), target.as_array(), eps.as_array())
    return RfMeasurement(source_id, float(z[0]), float(z[1]), float(z[2]), source_kind)


def measurement_jacobian(observer: Pose, target: Pose) -> np.ndarray:
    return measure_jacobian(observer.as_array(), target.as_array())
