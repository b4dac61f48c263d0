"""Discrete-time world, the per-agent estimation pipeline and Monte-Carlo runs.

Node indices are integers: agents ``0..N-1`` in ascending id order, anchors
``N..N+M-1``. All randomness for step ``k`` of realization ``r`` comes from a
Philox generator keyed by ``(seed, r, k, stream)``, and every draw fills a
fixed-shape block covering all node pairs, so a given pair always reads the
same entry regardless of who happens to be in range.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import exchange as ex
from . import hypothesis as hy
from .models import POSE_IDX, STATE_DIM, ImuInput, Pose, measure, propagate, wrap_angle
from .scenario import CircleTrajectory, ScenarioConfig

log = logging.getLogger(__name__)

STREAM_WORLD = 0
STREAM_INIT = 1
NEIGHBOR_VELOCITY_VAR = 4.0
TRIANGULATION_SCALE = 10.0


# -- nominal motion -----------------------------------------------------------


def circle_rate(spec: CircleTrajectory) -> float:
    return spec.direction * 2.0 * math.pi / spec.period


def circle_speed(spec: CircleTrajectory, Ts: float) -> float:
    """Chord speed that makes the discrete model land exactly on the circle."""
    w = circle_rate(spec)
    return 2.0 * spec.radius * abs(math.sin(w * Ts / 2.0)) / Ts


def nominal_trajectory(spec: CircleTrajectory, k: int, Ts: float):
    """Pose at step ``k`` and the input that keeps the agent on its circle.

    Positions are the vertices of the polygon inscribed in the circle; with
    heading along each chord and forward speed :func:`circle_speed`, the
    discrete motion model with input ``(0, 0, omega)`` visits them exactly.
    """
    w = circle_rate(spec)
    phi = spec.phase + w * Ts * k
    x = spec.center[0] + spec.radius * math.cos(phi)
    y = spec.center[1] + spec.radius * math.sin(phi)
    theta = wrap_angle(phi + spec.direction * math.pi / 2.0 + w * Ts / 2.0)
    return Pose(x, y, theta), ImuInput(0.0, 0.0, w)


def nominal_state(spec: CircleTrajectory, k: int, Ts: float) -> np.ndarray:
    pose, _ = nominal_trajectory(spec, k, Ts)
    return np.array([pose.x, pose.y, circle_speed(spec, Ts), 0.0, pose.theta])


def tracking_input(x: np.ndarray, spec: CircleTrajectory, k: int, Ts: float, gains) -> np.ndarray:
    """Input steering the true agent back toward its nominal circle.

    Acts on the true state only (never on estimates). Without it the
    process noise would random-walk the agents out of each other's range.
    """
    pose_k, u_n = nominal_trajectory(spec, k, Ts)
    pose_k1, _ = nominal_trajectory(spec, k + 1, Ts)
    V = circle_speed(spec, Ts)
    th = x[4]
    c, s = math.cos(th), math.sin(th)
    px = x[0] + Ts * (c * x[2] - s * x[3])
    py = x[1] + Ts * (s * x[2] + c * x[3])
    omega = u_n.omega + gains.heading_gain * wrap_angle(pose_k.theta - th)
    th1 = th + Ts * omega
    wx = V * math.cos(pose_k1.theta) + gains.position_gain * (pose_k1.x - px)
    wy = V * math.sin(pose_k1.theta) + gains.position_gain * (pose_k1.y - py)
    c1, s1 = math.cos(th1), math.sin(th1)
    vbx = c1 * wx + s1 * wy
    vby = -s1 * wx + c1 * wy
    return np.array([(vbx - x[2]) / Ts, (vby - x[3]) / Ts, omega])


# -- world --------------------------------------------------------------------


def step_rng(seed: int, realization: int, step: int, stream: int = STREAM_WORLD) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(realization), int(step), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Measurements:
    """Issued measurements at one step, indexed ``[observer agent][source node]``."""

    clean: dict
    spoofed: dict


@dataclass
class StepObservation:
    k: int
    truth: np.ndarray
    in_range: list
    measurements: Measurements
    imu: np.ndarray
    applied: np.ndarray
    delivered: np.ndarray


@dataclass
class TruthLog:
    states: list = field(default_factory=list)
    measurements: list = field(default_factory=list)

    def append(self, obs: StepObservation) -> None:
        self.states.append(obs.truth.copy())
        self.measurements.append(obs.measurements)


class World:
    def __init__(self, cfg: ScenarioConfig, realization: int = 0):
        self.cfg = cfg
        self.realization = realization
        order = sorted(range(len(cfg.agents)), key=lambda i: cfg.agents[i].id)
        self.agents = [cfg.agents[i] for i in order]
        self.anchors = sorted(cfg.anchors, key=lambda a: a.id)
        self.n = len(self.agents)
        self.m = len(self.anchors)
        self.names = [a.id for a in self.agents] + [a.id for a in self.anchors]
        self.index = {name: i for i, name in enumerate(self.names)}
        self.anchor_poses = {self.n + b: a.pose.as_array() for b, a in enumerate(self.anchors)}
        Ts = cfg.noise.sampling_period
        self.k = 0
        self.truth = np.array([
            np.asarray(a.initial_state, float) if a.initial_state is not None
            else nominal_state(a.trajectory, 0, Ts)
            for a in self.agents
        ])
        self._q_sd = np.sqrt(cfg.noise.Q)
        self._imu_sd = np.sqrt(cfg.noise.R_imu)
        self._rf_sd = np.sqrt(cfg.noise.R_rf)

    def rng(self, k: int, stream: int = STREAM_WORLD) -> np.random.Generator:
        return step_rng(self.cfg.seed, self.realization, k, stream)

    def neighborhoods(self) -> list:
        """In-range node indices per agent (agents and anchors)."""
        rho = self.cfg.comm_range
        pos = self.truth[:, :2]
        out = []
        for i in range(self.n):
            near = []
            for j in range(self.n):
                if j != i and math.hypot(*(pos[j] - pos[i])) < rho:
                    near.append(j)
            for a, p in self.anchor_poses.items():
                if math.hypot(p[0] - pos[i, 0], p[1] - pos[i, 1]) < rho:
                    near.append(a)
            out.append(near)
        return out

    def attack_vector(self, node: int, k: int):
        return self.cfg.attack.signal(self.names[node], k)

    def target_pose(self, node: int) -> np.ndarray:
        if node < self.n:
            return self.truth[node, list(POSE_IDX)]
        return self.anchor_poses[node]


def step_world(world: World, rng: np.random.Generator | None = None) -> StepObservation:
    """Measure at the current step, apply the inputs and advance the truth."""
    k = world.k
    if rng is None:
        rng = world.rng(k)
    n, total = world.n, world.n + world.m
    cfg = world.cfg
    Ts = cfg.noise.sampling_period
    # fixed draw layout, independent of who is in range
    w_truth = rng.standard_normal((n, STATE_DIM)) * world._q_sd
    w_imu = rng.standard_normal((n, 3)) * world._imu_sd
    w_rf = rng.standard_normal((n, total, 3)) * world._rf_sd
    drop = rng.random((n, n))

    in_range = world.neighborhoods()
    clean, spoofed = {}, {}
    for i in range(n):
        qi = world.truth[i, list(POSE_IDX)]
        ci, si = {}, {}
        for j in in_range[i]:
            qj = world.target_pose(j)
            z0 = measure(qi, qj)
            eps = world.attack_vector(j, k)
            z = z0 if eps is None else measure(qi, qj, eps)
            z = z + w_rf[i, j]
            z[1:] = wrap_angle(z[1:])
            ci[j] = z0
            si[j] = z
        clean[i] = ci
        spoofed[i] = si

    applied = np.array([
        tracking_input(world.truth[i], world.agents[i].trajectory, k, Ts, cfg.truth)
        for i in range(n)
    ])
    imu = applied + w_imu
    delivered = drop >= cfg.input_drop_prob
    obs = StepObservation(k, world.truth.copy(), in_range, Measurements(clean, spoofed),
                          imu, applied, delivered)
    nxt = np.empty_like(world.truth)
    for i in range(n):
        nxt[i] = propagate(world.truth[i], applied[i], Ts) + w_truth[i]
        nxt[i, 4] = wrap_angle(nxt[i, 4])
    world.truth = nxt
    world.k = k + 1
    return obs


# -- estimator helpers ----------------------------------------------------------


class RealizationFailed(RuntimeError):
    pass


def triangulate(state: hy.JointState, z: np.ndarray, noise, scale: float = TRIANGULATION_SCALE):
    """Neighbor block from one range/AOA/AOD measurement and the own estimate.

    Returns ``(mean5, cov5, cross)`` where ``cross`` is the covariance between
    the current joint state and the new block (first-order propagation).
    """
    mu = state.mean
    r, aoa, aod = z
    b = aoa - math.pi + mu[4]
    cb, sb = math.cos(b), math.sin(b)
    mean = np.array([mu[0] + r * cb, mu[1] + r * sb, 0.0, 0.0, wrap_angle(b - aod)])
    # Jacobians w.r.t. the own pose (x, y, theta) and the measurement (r, aoa, aod)
    Gx = np.zeros((5, 3))
    Gx[0, 0] = Gx[1, 1] = 1.0
    Gx[0, 2] = -r * sb
    Gx[1, 2] = r * cb
    Gx[4, 2] = 1.0
    Gz = np.zeros((5, 3))
    Gz[0, 0], Gz[1, 0] = cb, sb
    Gz[0, 1], Gz[1, 1] = -r * sb, r * cb
    Gz[4, 1] = 1.0
    Gz[4, 2] = -1.0
    pidx = list(POSE_IDX)
    P_pose = state.cov[np.ix_(pidx, pidx)]
    cov = Gx @ P_pose @ Gx.T + Gz @ np.diag(scale * noise.R_rf) @ Gz.T
    cov[2, 2] += NEIGHBOR_VELOCITY_VAR
    cov[3, 3] += NEIGHBOR_VELOCITY_VAR
    cross = state.cov[:, pidx] @ Gx.T
    return mean, cov, cross


def sync_support(h: hy.Hypothesis, in_range, measurements: dict, noise, n_agents: int) -> set:
    """Align ``h`` with the sources in range; returns sources added this step."""
    target = frozenset(in_range) - h.excluded
    if h.support - target:
        hy._restrict(h, h.support & target)
    fresh = set()
    for s in sorted(target - h.support):
        if s < n_agents and s not in h.state.layout:
            mean, cov, cross = triangulate(h.state, measurements[s], noise)
            h.state.insert(s, mean, cov, cross)
            fresh.add(s)
    h.support = target
    return fresh


def _usable(measurements: dict, fresh: set) -> dict:
    if not fresh:
        return measurements
    return {s: z for s, z in measurements.items() if s not in fresh}


def _pose6(state: hy.JointState, j) -> list:
    o = state.offset(j)
    return [o, o + 1, o + 4, 0, 1, 4]


def _packet_pose6(ph: ex.PacketHypothesis, recipient) -> list:
    bi = STATE_DIM * ph.blocks.index(recipient)
    return [0, 1, 4, bi, bi + 1, bi + 4]


class AgentEstimator:
    """The hypothesis table of one agent plus a naive single-filter baseline.

    The baseline uses every measurement, never rejects anything and always
    exchanges its complete joint state, whatever sharing mode the table uses.
    """

    def __init__(self, idx: int, init_mean: np.ndarray, init_cov: np.ndarray, anchors):
        st = hy.JointState(init_mean, init_cov, ())
        self.idx = idx
        self.table = hy.new_table(idx, st, (), anchors)
        self.naive = hy.Hypothesis(st.copy(), ())
        self.inputs_prev = None
        self.neighbor_inputs: dict = {}
        self.rejections = 0

    def all_filters(self):
        yield from self.table.hypotheses()
        yield from self.table.operationals()
        yield self.naive


def _local_step(est: AgentEstimator, k: int, obs: StepObservation, world: World, cfg: ScenarioConfig) -> int:
    noise, det = cfg.noise, cfg.detector
    i = est.idx
    if k > 0:
        for h in est.all_filters():
            hy.predict(h, est.inputs_prev, est.neighbor_inputs, noise)
    in_range = obs.in_range[i]
    z = obs.measurements.spoofed[i]
    anchors_in_range = {s for s in in_range if s >= world.n}
    apose = world.anchor_poses
    n = world.n
    for h in list(est.table.hypotheses()):
        fresh = sync_support(h, in_range, z, noise, n)
        pred = hy.predict_measurements(h, _usable(z, fresh), apose, noise)
        hy.record_outliers(h, pred, noise, det)
        hy.update(h, z, apose, noise, pred)
    for h in est.table.operationals():
        fresh = sync_support(h, in_range, z, noise, n)
        hy.update(h, _usable(z, fresh), apose, noise)
    fresh = sync_support(est.naive, in_range, z, noise, n)
    hy.update(est.naive, _usable(z, fresh), apose, noise)

    rejected = 0
    for h in list(est.table.hypotheses()):
        entry = est.table.tags.get(h.tag)
        if entry is None or not any(m is h for m in entry.members):
            continue
        verdict = hy.check_hypothesis(h, det)
        if not verdict.consistent:
            hy.initial_anchor_removal(est.table, h, anchors_in_range, det)
            rejected += 1
    hy.refresh_operational(est.table, in_range)
    est.rejections += rejected
    return rejected


def _build_packets(estimators, obs: StepObservation, world: World, cfg: ScenarioConfig):
    packets, naive_packets = {}, {}
    for est in estimators:
        i = est.idx
        for j in obs.in_range[i]:
            if j >= world.n:
                continue
            try:
                packets[i, j] = ex.select_transmit_set(est.table, j, cfg.exchange, obs.imu[i])
            except ex.NoSharedSupport:
                pass
            nv = est.naive
            if j in nv.support and j in nv.state.layout:
                naive_packets[i, j] = ex.extract(nv, i, j, "full")
    return packets, naive_packets


def _fuse(est: AgentEstimator, received: dict, naive_received: dict, in_range, world: World,
          cfg: ScenarioConfig) -> None:
    i = est.idx
    table = est.table
    row_tags = sorted(table.tags)
    costs = {t: {} for t in row_tags}
    chosen = {t: {} for t in row_tags}
    assignments = {}
    for j in sorted(received):
        pkt = received[j]
        local = []
        for t in row_tags:
            op = table.tags[t].operational
            if j in op.support and j in op.state.layout:
                local.append(op.state.marginal(_pose6(op.state, j)))
            else:
                local.append(None)
        rec = []
        for ph in pkt.hypotheses:
            idx = _packet_pose6(ph, i)
            rec.append((ph.mean[idx], ph.cov[np.ix_(idx, idx)]))
        a = ex.match_received(local, rec, angle_dims=(2, 5))
        assignments[j] = a
        for r, c in a.pairs:
            t = row_tags[r]
            costs[t][j] = float(a.cost[r, c])
            chosen[t][j] = pkt.hypotheses[c]

    anchors_in_range = {s for s in in_range if s >= world.n}
    c_self = ex.self_weight(table, anchors_in_range)
    for t in row_tags:
        entry = table.tags[t]
        targets = [entry.operational] + list(entry.members)
        for h in targets:
            js = [j for j in sorted(costs[t]) if j in h.support and j in h.state.layout]
            if not js:
                continue
            if h is entry.operational:
                use = {j: costs[t][j] for j in js}
            else:
                # member weights follow the member's own distance to the matched packet
                use = {j: _member_cost(h, chosen[t][j], i, j) for j in js}
            w = ex.split_weights(c_self, use)
            _apply_ci(h, [(chosen[t][j], w[j]) for j in js], c_self, i)

    counts = {j: len(pkt) for j, pkt in received.items()}
    ex.maybe_increment_tags(table, counts, assignments, cfg.exchange, row_tags)

    # naive baseline: plain CI with whatever the neighbors send
    nv = est.naive
    use, chosen_n = {}, {}
    for j in sorted(naive_received):
        if j not in nv.support or j not in nv.state.layout:
            continue
        ph = naive_received[j]
        idx = _packet_pose6(ph, i)
        m_loc, P_loc = nv.state.marginal(_pose6(nv.state, j))
        use[j] = ex.mahalanobis(m_loc, P_loc, ph.mean[idx], ph.cov[np.ix_(idx, idx)], (2, 5))
        chosen_n[j] = ph
    if use:
        w = ex.split_weights(0.5, use)
        _apply_ci(nv, [(chosen_n[j], w[j]) for j in sorted(use)], 0.5, i)


def _member_cost(h: hy.Hypothesis, ph: ex.PacketHypothesis, owner, j) -> float:
    m_loc, P_loc = h.state.marginal(_pose6(h.state, j))
    idx = _packet_pose6(ph, owner)
    return ex.mahalanobis(m_loc, P_loc, ph.mean[idx], ph.cov[np.ix_(idx, idx)], (2, 5))


def _apply_ci(h: hy.Hypothesis, items, c_self: float, owner) -> None:
    st = h.state
    received = [((ph.mean, ph.cov), ex.embedding(st.layout, ph.blocks, owner), w) for ph, w in items]
    mean, cov = ex.ci_fuse((st.mean, st.cov), received, c_self, ex.heading_dims(st.dim))
    st.mean = mean
    st.cov = cov


# -- results --------------------------------------------------------------------


@dataclass
class RunResult:
    """Per-step logs of one realization.

    ``tag_mean[i][t]`` and ``tag_cov[i][t]`` hold the operational pose of tag
    ``t`` of agent ``i`` (NaN while the tag does not exist).
    """

    realization: int
    names: list
    steps: int
    truth: np.ndarray
    tag_mean: list
    tag_cov: list
    tag_parent: list
    tag_count: np.ndarray
    hyp_count: np.ndarray
    rejections: np.ndarray
    naive_mean: np.ndarray
    naive_cov: np.ndarray
    failed: bool = False
    failure: str | None = None
    failure_step: int | None = None
    packets: bytes | None = None
    replay_mismatches: int = 0

    @property
    def n_agents(self) -> int:
        return self.truth.shape[1]

    def agent_index(self, name) -> int:
        return self.names.index(name) if not isinstance(name, int) else name

    def second_tag_step(self, agent, after: int = 0):
        """First step ``>= after`` at which the agent holds two or more tags."""
        i = self.agent_index(agent)
        ks = np.flatnonzero(self.tag_count[after:, i] >= 2)
        return None if ks.size == 0 else int(ks[0]) + after

    def any_split(self) -> bool:
        return bool(self.rejections.sum() > 0)


def _initial_estimators(world: World, cfg: ScenarioConfig) -> list:
    rng = world.rng(0, STREAM_INIT)
    q = cfg.noise.Q
    init = np.asarray(cfg.initial_estimate_diag, float) if cfg.initial_estimate_diag else q
    draws = rng.standard_normal((world.n, STATE_DIM)) * np.sqrt(q)
    anchors = list(world.anchor_poses)
    out = []
    for i in range(world.n):
        m = world.truth[i] + draws[i]
        m[4] = wrap_angle(m[4])
        out.append(AgentEstimator(i, m, np.diag(init), anchors))
    return out


def run_realization(cfg: ScenarioConfig, realization: int = 0, record_packets: bool = False,
                    replay: list | None = None) -> RunResult:
    """Simulate one realization and log operational hypotheses every step.

    ``replay`` is a decoded packet stream (``(step, packet)`` pairs); when
    given, the recorded packets are fused instead of the freshly computed
    ones and differences are counted in ``replay_mismatches``.
    """
    world = World(cfg, realization)
    K, N = cfg.steps, world.n
    ests = _initial_estimators(world, cfg)
    truth = np.full((K, N, STATE_DIM), np.nan)
    tag_mean = [dict() for _ in range(N)]
    tag_cov = [dict() for _ in range(N)]
    tag_count = np.zeros((K, N), dtype=int)
    hyp_count = np.zeros((K, N), dtype=int)
    rejections = np.zeros((K, N), dtype=int)
    naive_mean = np.full((K, N, 3), np.nan)
    naive_cov = np.full((K, N, 3, 3), np.nan)
    records = [] if record_packets else None
    replay_map: dict = {}
    if replay is not None:
        for step, pkt in replay:
            replay_map[(step, pkt.sender, pkt.recipient)] = pkt
    mismatches = 0
    failed, failure, failure_step = False, None, None

    for k in range(K):
        obs = step_world(world)
        truth[k] = obs.truth
        try:
            for est in ests:
                rejections[k, est.idx] = _local_step(est, k, obs, world, cfg)
            packets, naive_packets = _build_packets(ests, obs, world, cfg)
            if replay is not None:
                fresh_keys = {(k, s, r) for (s, r) in packets}
                for key in fresh_keys | {x for x in replay_map if x[0] == k}:
                    a = packets.get(key[1:])
                    b = replay_map.get(key)
                    if a is None or b is None or a.to_bytes() != b.to_bytes():
                        mismatches += 1
                packets = {(s, r): p for (kk, s, r), p in replay_map.items() if kk == k}
            if records is not None:
                for key in sorted(packets):
                    records.append((k, packets[key]))
            for est in ests:
                i = est.idx
                recv = {s: p for (s, r), p in packets.items() if r == i}
                nrecv = {s: p for (s, r), p in naive_packets.items() if r == i}
                _fuse(est, recv, nrecv, obs.in_range[i], world, cfg)
        except (hy.FilterError, ex.FusionError, np.linalg.LinAlgError, ValueError) as exc:
            failed, failure, failure_step = True, f"{type(exc).__name__}: {exc}", k
            log.warning("realization %d failed at step %d: %s", realization, k, exc)
            break

        for est in ests:
            i = est.idx
            for t, entry in est.table.tags.items():
                if t not in tag_mean[i]:
                    tag_mean[i][t] = np.full((K, 3), np.nan)
                    tag_cov[i][t] = np.full((K, 3, 3), np.nan)
                m, P = entry.operational.state.pose()
                tag_mean[i][t][k] = m
                tag_cov[i][t][k] = P
            tag_count[k, i] = est.table.tag_count
            hyp_count[k, i] = sum(len(e.members) for e in est.table.tags.values())
            m, P = est.naive.state.pose()
            naive_mean[k, i] = m
            naive_cov[k, i] = P
            # inputs used to predict the next step
            est.inputs_prev = obs.imu[i]
            est.neighbor_inputs = {
                j: obs.imu[j] for j in obs.in_range[i] if j < N and obs.delivered[i, j]
            }

    return RunResult(
        realization=realization,
        names=world.names[:N],
        steps=K,
        truth=truth,
        tag_mean=tag_mean,
        tag_cov=tag_cov,
        tag_parent=[dict(e.table.parents) for e in ests],
        tag_count=tag_count,
        hyp_count=hyp_count,
        rejections=rejections,
        naive_mean=naive_mean,
        naive_cov=naive_cov,
        failed=failed,
        failure=failure,
        failure_step=failure_step,
        packets=ex.encode_stream(records) if records is not None else None,
        replay_mismatches=mismatches,
    )


@dataclass
class MonteCarloResult:
    config: ScenarioConfig
    runs: list

    @property
    def failures(self) -> list:
        return [(r.realization, r.failure_step, r.failure) for r in self.runs if r.failed]

    @property
    def ok_runs(self) -> list:
        return [r for r in self.runs if not r.failed]


def _run_one(args):
    cfg, r, record = args
    return run_realization(cfg, r, record_packets=record)


def default_workers() -> int:
    env = os.environ.get("RESLOC_WORKERS")
    if env:
        return max(1, int(env))
    return 1


def run_monte_carlo(cfg: ScenarioConfig, workers: int | None = None, record_packets: bool = False,
                    realizations=None) -> MonteCarloResult:
    """Run ``cfg.realizations`` independent realizations.

    Results are merged in realization order, so the output is identical for
    any number of worker processes.
    """
    idx = list(range(cfg.realizations)) if realizations is None else list(realizations)
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(cfg, r, record_packets) for r in idx]
    if workers == 1 or len(jobs) <= 1:
        runs = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_one, jobs))
    return MonteCarloResult(cfg, runs)
