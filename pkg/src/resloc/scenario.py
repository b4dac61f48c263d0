"""Scenario files: schema, validation and the typed configuration."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .exchange import ExchangeConfig
from .hypothesis import DetectorConfig
from .models import NoiseConfig, Pose

SCHEMA_VERSION = 1

_vec = lambda n: {"type": "array", "items": {"type": "number"}, "minItems": n, "maxItems": n}

SCHEMA: dict = {
    "type": "object",
    "required": ["schema_version", "steps", "seed", "comm_range", "noise", "agents", "anchors"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "steps": {"type": "integer"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "realizations": {"type": "integer"},
        "comm_range": {"type": "number"},
        "noise": {
            "type": "object",
            "required": ["process_diag", "imu_diag", "rf_diag", "sampling_period"],
            "properties": {
                "process_diag": _vec(5),
                "tracking_diag": _vec(5),
                "imu_diag": _vec(3),
                "rf_diag": _vec(3),
                "sampling_period": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "truth": {
            "type": "object",
            "properties": {
                "position_gain": {"type": "number"},
                "heading_gain": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "initial_estimate_diag": _vec(5),
        "input_drop_prob": {"type": "number"},
        "agents": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "trajectory"],
                "properties": {
                    "id": {"type": "string"},
                    "trajectory": {
                        "type": "object",
                        "required": ["type", "center", "radius", "period"],
                        "properties": {
                            "type": {"const": "circle"},
                            "center": _vec(2),
                            "radius": {"type": "number"},
                            "period": {"type": "number"},
                            "phase": {"type": "number"},
                            "direction": {"enum": [1, -1]},
                        },
                        "additionalProperties": False,
                    },
                    "initial_state": _vec(5),
                },
                "additionalProperties": False,
            },
        },
        "anchors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "pose"],
                "properties": {"id": {"type": "string"}, "pose": _vec(3)},
                "additionalProperties": False,
            },
        },
        "attack": {
            "type": ["object", "null"],
            "properties": {
                "start_step": {"type": "integer"},
                "targets": {
                    "type": "object",
                    "additionalProperties": {
                        "oneOf": [
                            _vec(2),
                            {
                                "type": "object",
                                "required": ["profile"],
                                "properties": {
                                    "profile": {"type": "array", "minItems": 1, "items": _vec(3)}
                                },
                                "additionalProperties": False,
                            },
                        ]
                    },
                },
            },
            "required": ["start_step", "targets"],
            "additionalProperties": False,
        },
        "detector": {
            "type": "object",
            "properties": {
                "window": {"type": "integer"},
                "beta": {"type": "number"},
                "alpha_chi": {"type": "number"},
                "alpha_d": {"type": "number"},
            },
            "additionalProperties": False,
        },
        "exchange": {
            "type": "object",
            "properties": {
                "alpha_T": {"type": "number"},
                "rdp_epsilon": {"type": "number"},
                "tau_n": {"type": "integer"},
                "sharing": {"enum": ["pairwise", "full"]},
            },
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    """Scenario failed validation; ``issues`` holds ``(code, message)`` pairs."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(f"{c}: {m}" for c, m in self.issues))


# stable error codes
E_SCHEMA = "E100"
E_DUPLICATE_ID = "E101"
E_VARIANCE = "E102"
E_RANGE = "E103"
E_STEPS = "E104"
E_ATTACK_TARGET = "E105"
E_ATTACK_DIRECTIONS = "E106"
E_ATTACK_START = "E107"
E_DETECTOR = "E108"
E_EXCHANGE = "E109"
E_TRAJECTORY = "E110"
E_REALIZATIONS = "E111"
E_MISC = "E112"


@dataclass(frozen=True)
class CircleTrajectory:
    center: tuple
    radius: float
    period: float
    phase: float = 0.0
    direction: int = 1


@dataclass(frozen=True)
class AgentSpec:
    id: str
    trajectory: CircleTrajectory
    initial_state: tuple | None = None


@dataclass(frozen=True)
class AnchorSpec:
    id: str
    pose: Pose


@dataclass(frozen=True)
class AttackSpec:
    """Bias per targeted source, piecewise constant in steps from ``start_step``."""

    start_step: int = 0
    targets: dict = field(default_factory=dict)

    def signal(self, source_id: str, k: int):
        """Attack vector on measurements of ``source_id`` at step ``k`` (or None)."""
        prof = self.targets.get(source_id)
        if prof is None or k < self.start_step:
            return None
        eps = None
        for k0, ex, ey in prof:
            if k >= k0:
                eps = (ex, ey)
        if eps is None or (eps[0] == 0.0 and eps[1] == 0.0):
            return None
        return np.array(eps)

    @property
    def enabled(self) -> bool:
        return bool(self.targets)


@dataclass(frozen=True)
class TruthConfig:
    """Feedback gains (1/s) that keep the true agents near their nominal paths."""

    position_gain: float = 3.0
    heading_gain: float = 3.0


@dataclass(frozen=True)
class ScenarioConfig:
    agents: tuple
    anchors: tuple
    comm_range: float
    noise: NoiseConfig
    detector: DetectorConfig
    exchange: ExchangeConfig
    steps: int
    attack: AttackSpec
    seed: int
    realizations: int = 1
    truth: TruthConfig = TruthConfig()
    initial_estimate_diag: tuple | None = None
    input_drop_prob: float = 0.0
    name: str = "scenario"
    raw: dict = field(default=None, compare=False, repr=False)

    @property
    def agent_ids(self) -> list:
        return [a.id for a in self.agents]

    @property
    def anchor_ids(self) -> list:
        return [a.id for a in self.anchors]

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "steps": self.steps,
            "seed": self.seed,
            "realizations": self.realizations,
            "comm_range": self.comm_range,
            "noise": {
                "process_diag": list(self.noise.process_diag),
                "tracking_diag": list(self.noise.tracking_diag),
                "imu_diag": list(self.noise.imu_diag),
                "rf_diag": list(self.noise.rf_diag),
                "sampling_period": self.noise.sampling_period,
            },
            "truth": {"position_gain": self.truth.position_gain, "heading_gain": self.truth.heading_gain},
            "input_drop_prob": self.input_drop_prob,
            "agents": [],
            "anchors": [{"id": a.id, "pose": [a.pose.x, a.pose.y, a.pose.theta]} for a in self.anchors],
            "attack": None,
            "detector": {
                "window": self.detector.window,
                "beta": self.detector.beta,
                "alpha_chi": self.detector.alpha_chi,
                "alpha_d": self.detector.alpha_d,
            },
            "exchange": {
                "alpha_T": self.exchange.alpha_T,
                "rdp_epsilon": self.exchange.rdp_epsilon,
                "tau_n": self.exchange.tau_n,
                "sharing": self.exchange.sharing,
            },
        }
        if self.initial_estimate_diag is not None:
            d["initial_estimate_diag"] = list(self.initial_estimate_diag)
        for a in self.agents:
            t = a.trajectory
            e = {
                "id": a.id,
                "trajectory": {
                    "type": "circle",
                    "center": list(t.center),
                    "radius": t.radius,
                    "period": t.period,
                    "phase": t.phase,
                    "direction": t.direction,
                },
            }
            if a.initial_state is not None:
                e["initial_state"] = list(a.initial_state)
            d["agents"].append(e)
        if self.attack.enabled:
            d["attack"] = {
                "start_step": self.attack.start_step,
                "targets": {k: {"profile": [list(p) for p in v]} for k, v in self.attack.targets.items()},
            }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, seed=None, realizations=None, steps=None) -> "ScenarioConfig":
        kw = {}
        if seed is not None:
            kw["seed"] = int(seed)
        if realizations is not None:
            kw["realizations"] = int(realizations)
        if steps is not None:
            kw["steps"] = int(steps)
        return replace(self, **kw)


def _directions(vectors, tol=1e-9) -> list:
    dirs: list = []
    for ex, ey in vectors:
        n = math.hypot(ex, ey)
        if n == 0.0:
            continue
        u = (ex / n, ey / n)
        if not any(abs(u[0] - d[0]) < tol and abs(u[1] - d[1]) < tol for d in dirs):
            dirs.append(u)
    return dirs


def _profile(entry) -> list:
    if isinstance(entry, dict):
        return [(int(k), float(ex), float(ey)) for k, ex, ey in entry["profile"]]
    return [(0, float(entry[0]), float(entry[1]))]


def validate(data: dict) -> list:
    """Return ``(code, message)`` issues; an empty list means the file is valid."""
    issues = []
    v = jsonschema.Draft7Validator(SCHEMA)
    for err in sorted(v.iter_errors(data), key=lambda e: list(e.path)):
        where = "/".join(str(p) for p in err.path) or "<root>"
        issues.append((E_SCHEMA, f"{where}: {err.message}"))
    if issues:
        return issues

    agent_ids = [a["id"] for a in data["agents"]]
    anchor_ids = [a["id"] for a in data["anchors"]]
    all_ids = agent_ids + anchor_ids
    dup = sorted({i for i in all_ids if all_ids.count(i) > 1})
    if dup:
        issues.append((E_DUPLICATE_ID, f"duplicate ids: {dup}"))
    noise = data["noise"]
    for key in ("process_diag", "tracking_diag", "imu_diag", "rf_diag"):
        vals = noise.get(key)
        if vals is not None and (min(vals) <= 0 or not all(math.isfinite(x) for x in vals)):
            issues.append((E_VARIANCE, f"noise.{key} must contain finite, strictly positive variances"))
    if not noise["sampling_period"] > 0:
        issues.append((E_VARIANCE, "noise.sampling_period must be > 0"))
    if "initial_estimate_diag" in data and min(data["initial_estimate_diag"]) <= 0:
        issues.append((E_VARIANCE, "initial_estimate_diag must be strictly positive"))
    if not data["comm_range"] > 0:
        issues.append((E_RANGE, "comm_range must be > 0"))
    if data["steps"] < 1:
        issues.append((E_STEPS, "steps must be >= 1"))
    if data.get("realizations", 1) < 1:
        issues.append((E_REALIZATIONS, "realizations must be >= 1"))
    p = data.get("input_drop_prob", 0.0)
    if not 0.0 <= p < 1.0:
        issues.append((E_MISC, "input_drop_prob must lie in [0, 1)"))
    for a in data["agents"]:
        t = a["trajectory"]
        if not t["radius"] > 0 or not t["period"] > 0:
            issues.append((E_TRAJECTORY, f"agent {a['id']}: radius and period must be > 0"))
    truth = data.get("truth", {})
    for key in ("position_gain", "heading_gain"):
        g = truth.get(key, 0.0)
        if g < 0 or g * noise["sampling_period"] >= 1.0:
            issues.append((E_MISC, f"truth.{key} must satisfy 0 <= gain * sampling_period < 1"))

    attack = data.get("attack")
    if attack:
        if attack["start_step"] < 0:
            issues.append((E_ATTACK_START, "attack.start_step must be >= 0"))
        vectors = []
        for src, entry in attack["targets"].items():
            if src not in all_ids:
                issues.append((E_ATTACK_TARGET, f"attack target {src!r} does not exist"))
            prof = _profile(entry)
            if any(k < 0 for k, _, _ in prof):
                issues.append((E_ATTACK_START, f"attack profile of {src!r} has negative steps"))
            vectors.extend((ex, ey) for _, ex, ey in prof)
        if len(_directions(vectors)) > 2:
            issues.append((E_ATTACK_DIRECTIONS,
                           "attack uses more than two distinct bias directions; "
                           "a joint attack is limited to two directions"))

    det = data.get("detector", {})
    try:
        DetectorConfig(**det)
    except (ValueError, TypeError) as exc:
        issues.append((E_DETECTOR, f"detector: {exc}"))
    ex = data.get("exchange", {})
    try:
        ExchangeConfig(**ex)
    except (ValueError, TypeError) as exc:
        issues.append((E_EXCHANGE, f"exchange: {exc}"))
    return issues


def from_dict(data: dict) -> ScenarioConfig:
    issues = validate(data)
    if issues:
        raise ConfigError(issues)
    n = data["noise"]
    noise = NoiseConfig(
        process_diag=n["process_diag"],
        imu_diag=n["imu_diag"],
        rf_diag=n["rf_diag"],
        sampling_period=float(n["sampling_period"]),
        tracking_diag=n.get("tracking_diag"),
    )
    agents = []
    for a in data["agents"]:
        t = a["trajectory"]
        traj = CircleTrajectory(
            center=tuple(float(c) for c in t["center"]),
            radius=float(t["radius"]),
            period=float(t["period"]),
            phase=float(t.get("phase", 0.0)),
            direction=int(t.get("direction", 1)),
        )
        init = a.get("initial_state")
        agents.append(AgentSpec(a["id"], traj, tuple(init) if init is not None else None))
    anchors = tuple(AnchorSpec(a["id"], Pose(*a["pose"])) for a in data["anchors"])
    att = data.get("attack")
    if att:
        attack = AttackSpec(int(att["start_step"]),
                            {k: _profile(v) for k, v in sorted(att["targets"].items())})
    else:
        attack = AttackSpec()
    truth = TruthConfig(**data.get("truth", {}))
    init = data.get("initial_estimate_diag")
    return ScenarioConfig(
        agents=tuple(agents),
        anchors=anchors,
        comm_range=float(data["comm_range"]),
        noise=noise,
        detector=DetectorConfig(**data.get("detector", {})),
        exchange=ExchangeConfig(**data.get("exchange", {})),
        steps=int(data["steps"]),
        attack=attack,
        seed=int(data["seed"]),
        realizations=int(data.get("realizations", 1)),
        truth=truth,
        initial_estimate_diag=tuple(init) if init is not None else None,
        input_drop_prob=float(data.get("input_drop_prob", 0.0)),
        name=data.get("name", "scenario"),
        raw=copy.deepcopy(data),
    )


def read_scenario_json(path) -> dict:
    """Parse a scenario file; unreadable or malformed files raise ConfigError."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError([("E100", f"scenario file not found: {path}")]) from None
    except OSError as exc:
        raise ConfigError([("E100", f"cannot read scenario {path}: {exc.strerror or exc}")]) from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("E100", f"{path}: not valid JSON ({exc})")]) from None


def load_scenario(path) -> ScenarioConfig:
    return from_dict(read_scenario_json(path))


def default_scenario_dict() -> dict:
    text = resources.files("resloc").joinpath("data/default_scenario.json").read_text()
    return json.loads(text)


def default_scenario() -> ScenarioConfig:
    return from_dict(default_scenario_dict())


def disable_attack(cfg: ScenarioConfig) -> ScenarioConfig:
    return replace(cfg, attack=AttackSpec())


def with_sharing(cfg: ScenarioConfig, sharing: str) -> ScenarioConfig:
    return replace(cfg, exchange=replace(cfg.exchange, sharing=sharing))


def as_jsonable(obj: Any):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))
