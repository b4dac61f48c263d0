"""Per-agent multi-hypothesis EKF bank.

Each hypothesis carries a joint Gaussian over the agent's own 5-state and one
5-state block per tracked neighbor agent, the set of measurement sources it
trusts, and windows of per-component outlier flags used for rejection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy.special import erfc
from scipy.stats import chi2

from . import kernels
from .models import (
    POSE_IDX,
    STATE_DIM,
    NoiseConfig,
    SingularGeometryError,
    wrap_angle,
)

PSD_TOL = 1e-9
MISSING_INPUT_NOISE_SCALE = 10.0


class FilterError(RuntimeError):
    """Covariance lost positive semi-definiteness or became singular."""


@dataclass(frozen=True)
class DetectorConfig:
    window: int = 25
    beta: float = 0.999
    alpha_chi: float = 0.997
    alpha_d: float = 4.0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.beta < 1.0 or not 0.0 < self.alpha_chi < 1.0:
            raise ValueError("beta and alpha_chi must lie in (0, 1)")
        if self.alpha_d <= 1.0:
            raise ValueError("alpha_d must exceed 1")

    @property
    def gate(self) -> float:
        return _chi2_1dof(self.alpha_chi)


_GATES: dict = {}


def _chi2_1dof(alpha: float) -> float:
    g = _GATES.get(alpha)
    if g is None:
        g = _GATES[alpha] = float(chi2.ppf(alpha, 1))
    return g


# -- joint state ------------------------------------------------------------


class JointState:
    """Mean/covariance over ``[own | neighbor blocks in ascending id order]``."""

    __slots__ = ("mean", "cov", "layout")

    def __init__(self, mean, cov, layout=()):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.layout = tuple(layout)
        if self.mean.shape[0] != STATE_DIM * (1 + len(self.layout)):
            raise ValueError("dimension does not match layout")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def offset(self, src) -> int:
        """Start index of a neighbor block."""
        return STATE_DIM * (1 + self.layout.index(src))

    def copy(self) -> "JointState":
        return JointState(self.mean.copy(), self.cov.copy(), self.layout)

    def pose(self, src=None):
        """Pose marginal ``(x, y, theta)`` of the own block or a neighbor block."""
        o = 0 if src is None else self.offset(src)
        idx = [o + i for i in POSE_IDX]
        return self.mean[idx], self.cov[np.ix_(idx, idx)]

    def marginal(self, indices) -> tuple:
        idx = list(indices)
        return self.mean[idx], self.cov[np.ix_(idx, idx)]

    def remove(self, src) -> None:
        """Marginalize a neighbor block out."""
        o = self.offset(src)
        keep = np.r_[0:o, o + STATE_DIM:self.dim]
        self.mean = self.mean[keep]
        self.cov = self.cov[np.ix_(keep, keep)]
        self.layout = tuple(s for s in self.layout if s != src)

    def insert(self, src, mean5, cov_block, cross=None) -> None:
        """Add a neighbor block keeping ascending layout order.

        ``cross`` is the covariance between the current state and the new block.
        """
        layout = sorted(self.layout + (src,))
        pos = layout.index(src)
        o = STATE_DIM * (1 + pos)
        n = self.dim
        mean = np.insert(self.mean, o, mean5)
        cov = np.zeros((n + STATE_DIM, n + STATE_DIM))
        old = np.r_[0:o, o + STATE_DIM:n + STATE_DIM]
        cov[np.ix_(old, old)] = self.cov
        cov[o:o + STATE_DIM, o:o + STATE_DIM] = cov_block
        if cross is not None:
            cov[old, o:o + STATE_DIM] = cross
            cov[o:o + STATE_DIM, old] = cross.T
        self.mean = mean
        self.cov = cov
        self.layout = tuple(layout)


def check_psd(cov: np.ndarray, tol: float = PSD_TOL) -> None:
    if not np.all(np.isfinite(cov)):
        raise FilterError("non-finite covariance")
    if np.max(np.abs(cov - cov.T)) > tol * max(1.0, np.max(np.abs(cov))):
        raise FilterError("covariance not symmetric")
    n = cov.shape[0]
    try:
        np.linalg.cholesky(cov + tol * np.eye(n))
    except np.linalg.LinAlgError:
        if np.linalg.eigvalsh(cov).min() < -tol:
            raise FilterError("covariance lost positive semi-definiteness") from None


# -- outlier windows --------------------------------------------------------


class SourceWindow:
    """Ring buffer of W samples of (flag, P_out) for the three components."""

    __slots__ = ("flags", "probs", "n", "pos")

    def __init__(self, W: int):
        self.flags = np.zeros((W, 3), dtype=bool)
        self.probs = np.zeros((W, 3))
        self.n = 0
        self.pos = 0

    def push(self, flag3, prob3) -> None:
        self.flags[self.pos] = flag3
        self.probs[self.pos] = prob3
        W = self.flags.shape[0]
        self.pos = (self.pos + 1) % W
        if self.n < W:
            self.n += 1

    @property
    def full(self) -> bool:
        return self.n == self.flags.shape[0]

    def counts(self) -> np.ndarray:
        return self.flags[: self.n].sum(axis=0) if self.n < self.flags.shape[0] else self.flags.sum(axis=0)

    def ordered(self):
        """Samples oldest first."""
        W = self.flags.shape[0]
        if self.n < W:
            return self.flags[: self.n], self.probs[: self.n]
        idx = np.r_[self.pos:W, 0:self.pos]
        return self.flags[idx], self.probs[idx]

    def copy(self) -> "SourceWindow":
        w = SourceWindow.__new__(SourceWindow)
        w.flags = self.flags.copy()
        w.probs = self.probs.copy()
        w.n = self.n
        w.pos = self.pos
        return w


class OutlierWindow(dict):
    """Mapping source -> :class:`SourceWindow`."""

    def copy(self) -> "OutlierWindow":
        return OutlierWindow({k: v.copy() for k, v in self.items()})

    def total_count(self, src) -> int:
        w = self.get(src)
        return 0 if w is None else int(w.counts().sum())


# -- hypotheses -------------------------------------------------------------


class Hypothesis:
    """Gaussian joint state plus the measurement support it trusts.

    ``excluded`` records sources removed by splitting: they stay out of the
    support even when they leave and re-enter range.
    """

    __slots__ = ("state", "support", "excluded", "tag", "windows", "is_operational")

    def __init__(self, state: JointState, support=(), tag: int = 0, excluded=(),
                 is_operational: bool = False, windows: OutlierWindow | None = None):
        self.state = state
        self.support = frozenset(support)
        self.excluded = frozenset(excluded)
        self.tag = tag
        self.windows = OutlierWindow() if windows is None else windows
        self.is_operational = is_operational

    def copy(self) -> "Hypothesis":
        return Hypothesis(self.state.copy(), self.support, self.tag, self.excluded,
                          self.is_operational, self.windows.copy())

    @property
    def mean(self):
        return self.state.mean

    @property
    def cov(self):
        return self.state.cov

    def __repr__(self):
        op = " op" if self.is_operational else ""
        return f"Hypothesis(tag={self.tag}{op}, support={sorted(self.support)}, dim={self.state.dim})"


@dataclass
class TagEntry:
    operational: Hypothesis
    members: list


class HypothesisTable:
    """Tag -> (operational hypothesis, member hypotheses) for one agent."""

    def __init__(self, owner, anchors: Iterable = ()):
        self.owner = owner
        self.anchors = frozenset(anchors)
        self.tags: dict[int, TagEntry] = {}
        self.next_tag = 0
        self.excess_counters: dict = {}
        self.parents: dict = {}

    @property
    def tag_count(self) -> int:
        return len(self.tags)

    def add_tag(self, operational: Hypothesis, members: list) -> int:
        t = self.next_tag
        self.next_tag += 1
        operational.tag = t
        operational.is_operational = True
        for m in members:
            m.tag = t
            m.is_operational = False
        self.tags[t] = TagEntry(operational, list(members))
        return t

    def hypotheses(self):
        """All member hypotheses, tags in ascending order."""
        for t in sorted(self.tags):
            yield from self.tags[t].members

    def operationals(self):
        return [self.tags[t].operational for t in sorted(self.tags)]

    def clone_tag(self, t: int) -> int:
        entry = self.tags[t]
        new = self.add_tag(entry.operational.copy(), [m.copy() for m in entry.members])
        self.parents[new] = t
        return new


def new_table(owner, state: JointState, support, anchors=()) -> HypothesisTable:
    table = HypothesisTable(owner, anchors)
    member = Hypothesis(state.copy(), support)
    op = Hypothesis(state.copy(), support, is_operational=True)
    table.add_tag(op, [member])
    return table


# -- EKF --------------------------------------------------------------------


def predict(h: Hypothesis, own_input, neighbor_inputs: Mapping, noise: NoiseConfig) -> Hypothesis:
    """EKF prediction of every block with its own IMU input."""
    st = h.state
    n = st.dim
    nb = n // STATE_DIM
    inputs = np.zeros((nb, 3))
    qdiag = np.empty(n)
    inputs[0] = own_input
    qdiag[0:5] = noise.process_diag
    qt = noise.tracking_diag
    for b, src in enumerate(st.layout, start=1):
        o = STATE_DIM * b
        ub = neighbor_inputs.get(src)
        if ub is None:
            qdiag[o:o + 5] = np.multiply(qt, MISSING_INPUT_NOISE_SCALE)
        else:
            inputs[b] = ub
            qdiag[o:o + 5] = qt
    mean, P = kernels.predict_joint(st.mean, st.cov, inputs, qdiag, noise.sampling_period)
    st.mean = mean
    st.cov = P
    if not np.all(np.isfinite(mean)):
        raise FilterError("non-finite mean after prediction")
    check_psd(P)
    return h


class Prediction:
    """Predicted measurements of one hypothesis for the sources it uses."""

    __slots__ = ("sources", "zhat", "z", "H", "S_diag")

    def __init__(self, sources, zhat, z, H, S_diag):
        self.sources = sources
        self.zhat = zhat
        self.z = z
        self.H = H
        self.S_diag = S_diag

    def innovation(self) -> np.ndarray:
        nu = self.z - self.zhat
        nu[:, 1:] = wrap_angle(nu[:, 1:])
        return nu


def predict_measurements(h: Hypothesis, measurements: Mapping, anchor_poses: Mapping,
                         noise: NoiseConfig) -> Prediction:
    """Predict measurements ``source -> (r, aoa, aod)`` applicable to ``h``."""
    st = h.state
    mean = st.mean
    srcs = [s for s in sorted(measurements) if s in h.support
            and (s in anchor_poses or s in st.layout)]
    m = len(srcs)
    offsets = np.empty(m, dtype=np.int64)
    targets = np.zeros((m, 3))
    z = np.empty((m, 3))
    for k, s in enumerate(srcs):
        if s in anchor_poses:
            offsets[k] = -1
            targets[k] = anchor_poses[s]
        else:
            offsets[k] = st.offset(s)
        z[k] = measurements[s]
    if m:
        try:
            zhat, H, S_diag = kernels.measurement_model(mean, st.cov, offsets, targets, noise.rf_diag)
        except ValueError:
            raise SingularGeometryError("zero range, Jacobian singular") from None
    else:
        zhat, H, S_diag = np.zeros((0, 3)), np.zeros((0, st.dim)), np.zeros((0, 3))
    return Prediction(srcs, zhat, z, H, S_diag)


def update(h: Hypothesis, measurements: Mapping, anchor_poses: Mapping, noise: NoiseConfig,
           prediction: Prediction | None = None) -> Hypothesis:
    """EKF update with stacked range/AOA/AOD blocks; angle innovations wrapped."""
    if prediction is None:
        prediction = predict_measurements(h, measurements, anchor_poses, noise)
    if not prediction.sources:
        return h
    st = h.state
    H = prediction.H
    nu = prediction.innovation().ravel()
    m = nu.shape[0]
    R = np.tile(noise.rf_diag, m // 3)
    try:
        mean, P = kernels.joseph_update(st.mean, st.cov, H, nu, R)
    except np.linalg.LinAlgError:
        raise FilterError("innovation covariance not positive definite") from None
    st.mean = mean
    st.cov = P
    return h


# -- outlier detection ------------------------------------------------------


def outlier_probability(S_diag: np.ndarray, R: np.ndarray, gate: float) -> np.ndarray:
    """P(|zhat - z| > sqrt(gate * R)) for a zero-mean Gaussian with variance S."""
    x = np.sqrt(gate * R / S_diag)
    return erfc(x / math.sqrt(2.0))


def record_outliers(h: Hypothesis, prediction: Prediction, noise: NoiseConfig,
                    cfg: DetectorConfig) -> Hypothesis:
    """Push per-component outlier flags and probabilities into the windows."""
    if not prediction.sources:
        return h
    gate = cfg.gate
    R = noise.R_rf
    nu = prediction.innovation()
    flags = nu * nu / R > gate
    probs = outlier_probability(prediction.S_diag, R, gate)
    for k, s in enumerate(prediction.sources):
        w = h.windows.get(s)
        if w is None:
            w = h.windows[s] = SourceWindow(cfg.window)
        w.push(flags[k], probs[k])
    return h


def poisson_binomial_quantile(probs, beta: float) -> int:
    """Smallest count ``o`` with P(sum of Bernoullis <= o) >= beta."""
    p = np.asarray(probs, dtype=float)
    if p.size == 0:
        raise ValueError("empty probability list")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return kernels.pb_quantile(p, beta)


@dataclass(frozen=True)
class Verdict:
    consistent: bool
    violating: frozenset = frozenset()


CONSISTENT = Verdict(True)


def check_hypothesis(h: Hypothesis, cfg: DetectorConfig) -> Verdict:
    """Reject when a full window holds more outliers than the allowed quantile."""
    bad = []
    for s in sorted(h.windows):
        w = h.windows[s]
        if not w.full or s not in h.support:
            continue
        if not w.flags.any():
            continue
        if kernels.window_violations(w.flags, w.probs, cfg.beta).any():
            bad.append(s)
    if not bad:
        return CONSISTENT
    return Verdict(False, frozenset(bad))


# -- table maintenance ------------------------------------------------------


def _restrict(h: Hypothesis, support: frozenset) -> None:
    """Shrink support and marginalize blocks of agents no longer supported."""
    for src in list(h.state.layout):
        if src not in support:
            h.state.remove(src)
    for src in list(h.windows):
        if src not in support:
            del h.windows[src]
    h.support = frozenset(support)


def _tag_of(table: HypothesisTable, h: Hypothesis) -> TagEntry:
    entry = table.tags.get(h.tag)
    if entry is None or not any(m is h for m in entry.members):
        raise KeyError("hypothesis not in table")
    return entry


def _drop_member(table: HypothesisTable, entry: TagEntry, h: Hypothesis) -> None:
    entry.members = [m for m in entry.members if m is not h]
    if not entry.members:
        del table.tags[h.tag]


def split_hypothesis(table: HypothesisTable, rejected: Hypothesis, cfg: DetectorConfig) -> HypothesisTable:
    """Replace a rejected hypothesis by children that each drop one source.

    The source with the lowest windowed outlier count is never dropped, which
    gives ``|O| - 1`` children. Children duplicating the support of another
    hypothesis in the same tag are skipped.
    """
    entry = _tag_of(table, rejected)
    support = sorted(rejected.support)
    if len(support) <= 1:
        if len(entry.members) == 1 and table.tag_count == 1:
            # keep the agent with at least one estimate
            _reset(rejected, cfg)
            return table
        _drop_member(table, entry, rejected)
        return table
    keep = min(support, key=lambda s: (rejected.windows.total_count(s), s))
    existing = {m.support for m in entry.members if m is not rejected}
    children = []
    for s in support:
        if s == keep:
            continue
        sup = rejected.support - {s}
        if sup in existing:
            continue
        child = Hypothesis(rejected.state.copy(), rejected.support, rejected.tag,
                           rejected.excluded | {s})
        _restrict(child, sup)
        child.windows = OutlierWindow()
        child.state.cov = child.state.cov * cfg.alpha_d
        children.append(child)
        existing.add(sup)
    pos = next(i for i, m in enumerate(entry.members) if m is rejected)
    entry.members[pos:pos + 1] = children
    if not entry.members:
        del table.tags[rejected.tag]
        if not table.tags:
            # every child duplicated nothing and none was created; keep parent
            rejected.windows = OutlierWindow()
            table.tags[rejected.tag] = entry
            entry.members = [rejected]
    return table


def _reset(h: Hypothesis, cfg: DetectorConfig) -> None:
    h.windows = OutlierWindow()
    h.state.cov = h.state.cov * cfg.alpha_d


def anchor_removal_applies(table: HypothesisTable, violating: Hypothesis, anchors_in_range) -> bool:
    return (table.tag_count > 1
            and all(len(e.members) == 1 for e in table.tags.values())
            and bool(set(anchors_in_range) & violating.support))


def initial_anchor_removal(table: HypothesisTable, violating: Hypothesis, anchors_in_range,
                           cfg: DetectorConfig) -> HypothesisTable:
    """Drop the most outlying in-range anchor instead of splitting.

    Falls through to :func:`split_hypothesis` when the preconditions fail.
    """
    if not anchor_removal_applies(table, violating, anchors_in_range):
        return split_hypothesis(table, violating, cfg)
    cands = sorted(set(anchors_in_range) & violating.support)
    worst = min(cands, key=lambda s: (-violating.windows.total_count(s), s))
    violating.excluded = violating.excluded | {worst}
    _restrict(violating, violating.support - {worst})
    _reset(violating, cfg)
    return table


def refresh_operational(table: HypothesisTable, neighborhood) -> HypothesisTable:
    """Operational support = union of member supports, within the neighborhood."""
    nbh = frozenset(neighborhood)
    for entry in table.tags.values():
        union = frozenset().union(*(m.support for m in entry.members)) & nbh
        op = entry.operational
        if union != op.support:
            _restrict(op, op.support & union)
            op.support = frozenset(union)
        shared = frozenset.intersection(*(m.excluded for m in entry.members))
        op.excluded = shared
    return table
