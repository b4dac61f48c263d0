"""Selecting, matching and fusing hypotheses exchanged between agents."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import chi2

from . import kernels
from .geometry import quickhull, rdp_reduce
from .hypothesis import HypothesisTable, Hypothesis
from .models import POSE_IDX, STATE_DIM, wrap_angle

SHARING_MODES = ("pairwise", "full")


class NoSharedSupport(ValueError):
    """No hypothesis of the sender uses measurements of the recipient."""


class FusionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ExchangeConfig:
    alpha_T: float = 0.99
    rdp_epsilon: float = 0.5
    tau_n: int = 5
    sharing: str = "pairwise"

    def __post_init__(self):
        if not 0.0 < self.alpha_T < 1.0:
            raise ValueError("alpha_T must lie in (0, 1)")
        if self.rdp_epsilon < 0:
            raise ValueError("rdp_epsilon must be >= 0")
        if self.tau_n < 1:
            raise ValueError("tau_n must be >= 1")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {SHARING_MODES}")

    @property
    def gate(self) -> float:
        return chi2_gate(self.alpha_T, 3)


@lru_cache(maxsize=64)
def chi2_gate(alpha: float, dof: int) -> float:
    return float(chi2.ppf(alpha, dof))


# -- packets ----------------------------------------------------------------


@dataclass
class PacketHypothesis:
    """Gaussian over consecutive 5-blocks; ``blocks[0]`` is the sender."""

    blocks: tuple
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class TransmitPacket:
    sender: int
    recipient: int
    hypotheses: list
    sender_inputs: np.ndarray | None = None
    source_indices: list = field(default_factory=list)

    def __len__(self):
        return len(self.hypotheses)

    # wire format: little-endian; u32 counts/ids, f64 values, row-major covariances
    def to_bytes(self) -> bytes:
        out = [struct.pack("<IIB", self.sender, self.recipient, self.sender_inputs is not None)]
        if self.sender_inputs is not None:
            out.append(struct.pack("<3d", *np.asarray(self.sender_inputs, dtype=float)))
        out.append(struct.pack("<I", len(self.hypotheses)))
        for h in self.hypotheses:
            nb = len(h.blocks)
            out.append(struct.pack(f"<I{nb}I", nb, *h.blocks))
            n = h.mean.shape[0]
            out.append(struct.pack("<I", n))
            out.append(np.ascontiguousarray(h.mean, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(h.cov, dtype="<f8").tobytes())
        body = b"".join(out)
        return struct.pack("<I", len(body)) + body

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple:
        """Decode one length-prefixed packet; returns ``(packet, next_offset)``."""
        (size,) = struct.unpack_from("<I", buf, offset)
        p = offset + 4
        end = p + size
        sender, recipient, has_inp = struct.unpack_from("<IIB", buf, p)
        p += 9
        inputs = None
        if has_inp:
            inputs = np.array(struct.unpack_from("<3d", buf, p))
            p += 24
        (nh,) = struct.unpack_from("<I", buf, p)
        p += 4
        hyps = []
        for _ in range(nh):
            (nb,) = struct.unpack_from("<I", buf, p)
            p += 4
            blocks = struct.unpack_from(f"<{nb}I", buf, p)
            p += 4 * nb
            (n,) = struct.unpack_from("<I", buf, p)
            p += 4
            mean = np.frombuffer(buf, dtype="<f8", count=n, offset=p).astype(float)
            p += 8 * n
            cov = np.frombuffer(buf, dtype="<f8", count=n * n, offset=p).astype(float).reshape(n, n)
            p += 8 * n * n
            hyps.append(PacketHypothesis(tuple(blocks), mean, cov))
        if p != end:
            raise ValueError("malformed packet: length mismatch")
        return cls(sender, recipient, hyps, inputs), end


def encode_stream(records) -> bytes:
    """Serialize ``(step, packet)`` pairs."""
    return b"".join(struct.pack("<I", step) + pkt.to_bytes() for step, pkt in records)


def decode_stream(buf: bytes) -> list:
    out = []
    p = 0
    while p < len(buf):
        (step,) = struct.unpack_from("<I", buf, p)
        pkt, p = TransmitPacket.from_bytes(buf, p + 4)
        out.append((step, pkt))
    return out


# -- transmit selection ------------------------------------------------------


@dataclass
class DistanceMatrix:
    D: np.ndarray
    B: np.ndarray
    index: list


def _pose_error(a: np.ndarray, b: np.ndarray, angle_dims=(2,)) -> np.ndarray:
    e = a - b
    for k in angle_dims:
        e[k] = wrap_angle(e[k])
    return e


def mahalanobis_matrix(hyps: Sequence, alpha_T: float = 0.99, index=None) -> DistanceMatrix:
    """Pairwise Mahalanobis distances between 3-dim pose marginals."""
    n = len(hyps)
    D = np.zeros((n, n))
    for a in range(n):
        ma, Pa = hyps[a]
        for b in range(a + 1, n):
            mb, Pb = hyps[b]
            e = _pose_error(np.asarray(ma, float), np.asarray(mb, float))
            try:
                d = float(e @ np.linalg.solve(np.asarray(Pa) + np.asarray(Pb), e))
            except np.linalg.LinAlgError:
                raise FusionError("singular summed covariance") from None
            D[a, b] = D[b, a] = max(d, 0.0)
    gate = chi2_gate(alpha_T, 3)
    return DistanceMatrix(D, D > gate, list(range(n)) if index is None else list(index))


def cluster(D: np.ndarray, B: np.ndarray, I: Sequence[int]) -> list[int]:
    """Merge hypotheses with identical gate rows, keeping the most distant one.

    ``D`` and ``B`` are indexed by the original hypothesis indices; only the
    rows/columns in ``I`` take part.
    """
    I = list(I)
    if len(I) < 2:
        return I
    sub_B = B[np.ix_(I, I)]
    sub_D = D[np.ix_(I, I)]
    groups: dict = {}
    for r, i in enumerate(I):
        groups.setdefault(sub_B[r].tobytes(), []).append(r)
    drop = set()
    for rows in groups.values():
        if len(rows) < 2:
            continue
        spread = sub_D[rows].max(axis=1)
        keep = rows[int(np.argmax(spread))]
        drop.update(I[r] for r in rows if r != keep)
    return [i for i in I if i not in drop]


def reduce_hypotheses(poses: Sequence, alpha_T: float, epsilon: float) -> list[int]:
    """Cluster -> Quickhull -> RDP -> Cluster over pose marginals.

    ``poses`` holds ``(mean3, cov3)`` per candidate; returns surviving indices
    in ascending order.
    """
    n = len(poses)
    if n == 0:
        return []
    dm = mahalanobis_matrix(poses, alpha_T)
    I = cluster(dm.D, dm.B, range(n))
    pts = [np.asarray(poses[i][0])[:2] for i in I]
    hull_pos = quickhull(pts)
    I_ch = [I[k] for k in hull_pos]
    rdp_pos = rdp_reduce([np.asarray(poses[i][0])[:2] for i in I_ch], epsilon)
    I_rdp = [I_ch[k] for k in rdp_pos]
    return sorted(cluster(dm.D, dm.B, I_rdp))


def candidate_hypotheses(table: HypothesisTable, recipient) -> list[Hypothesis]:
    return [h for h in table.hypotheses() if recipient in h.support and recipient in h.state.layout]


def extract(h: Hypothesis, sender, recipient, sharing: str = "pairwise") -> PacketHypothesis:
    st = h.state
    if sharing == "full":
        return PacketHypothesis((sender,) + st.layout, st.mean.copy(), st.cov.copy())
    o = st.offset(recipient)
    idx = np.r_[0:STATE_DIM, o:o + STATE_DIM]
    return PacketHypothesis((sender, recipient), st.mean[idx], st.cov[np.ix_(idx, idx)])


def select_transmit_set(sender_table: HypothesisTable, recipient, cfg: ExchangeConfig,
                        sender_inputs=None) -> TransmitPacket:
    """Algorithm-1 reduction of the hypotheses supported by ``recipient``."""
    cands = candidate_hypotheses(sender_table, recipient)
    if not cands:
        raise NoSharedSupport(f"no hypothesis uses measurements of {recipient}")
    poses = [h.state.pose() for h in cands]
    keep = reduce_hypotheses(poses, cfg.alpha_T, cfg.rdp_epsilon)
    sender = sender_table.owner
    hyps = [extract(cands[i], sender, recipient, cfg.sharing) for i in keep]
    return TransmitPacket(sender, recipient, hyps, sender_inputs, keep)


# -- matching ---------------------------------------------------------------


@dataclass
class Assignment:
    X: np.ndarray
    cost: np.ndarray
    pairs: list

    def matched_col(self, row: int):
        for r, c in self.pairs:
            if r == row:
                return c
        return None

    def unmatched_cols(self) -> list[int]:
        used = {c for _, c in self.pairs}
        return [c for c in range(self.X.shape[1]) if c not in used]


def mahalanobis(ma, Pa, mb, Pb, angle_dims=()) -> float:
    e = np.asarray(ma, float) - np.asarray(mb, float)
    for k in angle_dims:
        e[k] = wrap_angle(e[k])
    return float(e @ np.linalg.solve(Pa + Pb, e))


def match_received(local_ops: Sequence, received: Sequence, angle_dims=()) -> Assignment:
    """Minimum-cost association of local tags (rows) to received hypotheses.

    A ``None`` entry in ``local_ops`` marks a tag that cannot be matched.
    The rectangular cost matrix is padded with a sentinel so partial
    assignments fall out of the square problem.
    """
    nt, nr = len(local_ops), len(received)
    C = np.full((nt, nr), np.inf)
    for t, loc in enumerate(local_ops):
        if loc is None:
            continue
        for r, (mr, Pr) in enumerate(received):
            C[t, r] = mahalanobis(loc[0], loc[1], mr, Pr, angle_dims)
    X = np.zeros((nt, nr), dtype=int)
    finite = np.isfinite(C)
    if nt == 0 or nr == 0 or not finite.any():
        return Assignment(X, C, [])
    sentinel = 10.0 * max(float(C[finite].max()), 1.0)
    n = max(nt, nr)
    M = np.full((n, n), sentinel)
    M[:nt, :nr] = np.where(finite, C, sentinel)
    rows, cols = linear_sum_assignment(M)
    pairs = []
    for r, c in zip(rows, cols):
        if r < nt and c < nr and finite[r, c]:
            X[r, c] = 1
            pairs.append((int(r), int(c)))
    return Assignment(X, C, pairs)


# -- covariance intersection -------------------------------------------------


def self_weight(table: HypothesisTable, anchors_in_range) -> float:
    """0.25 when two or more tags share an anchor-bearing operational support."""
    anchors = frozenset(anchors_in_range)
    seen = {}
    for op in table.operationals():
        if op.support & anchors:
            seen[op.support] = seen.get(op.support, 0) + 1
    return 0.25 if any(v >= 2 for v in seen.values()) else 0.5


def split_weights(c_self: float, matched_costs: Mapping) -> dict:
    """Neighbor weights proportional to their matched Mahalanobis costs."""
    if not matched_costs:
        return {}
    total = sum(matched_costs.values())
    rest = 1.0 - c_self
    if total <= 0.0 or not math.isfinite(total):
        return {j: rest / len(matched_costs) for j in matched_costs}
    return {j: rest * c / total for j, c in matched_costs.items()}


def ci_weights(table: HypothesisTable, matched_costs: Mapping, anchors_in_range) -> tuple:
    c_self = self_weight(table, anchors_in_range)
    return c_self, split_weights(c_self, matched_costs)


def ci_fuse(local: tuple, received: Sequence, self_weight: float, angle_dims=()) -> tuple:
    """Information-form covariance intersection of partial-state estimates.

    ``received`` entries are ``((mean, cov), S, weight)`` where ``S`` is either
    an ``n x d`` embedding matrix or an integer array mapping each received
    dimension to a local dimension (``-1`` for dimensions the receiver does
    not track; those are marginalized out first).
    """
    mu, P = local
    mu = np.asarray(mu, float)
    P = np.asarray(P, float)
    n = mu.shape[0]
    try:
        info = kernels.spd_inverse(P)
    except np.linalg.LinAlgError:
        raise FusionError("local covariance not invertible") from None
    Y = self_weight * info
    y = self_weight * (info @ mu)
    angle_arr = np.asarray(sorted(set(angle_dims)), dtype=np.intp)
    is_angle = np.zeros(n, dtype=bool)
    is_angle[angle_arr] = True
    for (mr, Pr), S, w in received:
        mr = np.asarray(mr, float)
        Pr = np.asarray(Pr, float)
        S = np.asarray(S)
        if S.ndim == 2:
            try:
                Ir = kernels.spd_inverse(Pr)
            except np.linalg.LinAlgError:
                raise FusionError("received covariance not invertible") from None
            m_adj = mr.copy()
            Y += w * (S @ Ir @ S.T)
            y += w * (S @ Ir @ m_adj)
            continue
        keep = S >= 0
        if keep.all():
            tgt = S.astype(np.intp)
            m_sel = mr.copy()
            P_sel = Pr
        else:
            sel = np.flatnonzero(keep)
            tgt = S[sel].astype(np.intp)
            m_sel = mr[sel]
            P_sel = Pr[sel[:, None], sel]
        if angle_arr.size:
            wrap_k = np.flatnonzero(is_angle[tgt])
            if wrap_k.size:
                a = tgt[wrap_k]
                m_sel[wrap_k] = mu[a] + wrap_angle(m_sel[wrap_k] - mu[a])
        try:
            Ir = kernels.spd_inverse(P_sel)
        except np.linalg.LinAlgError:
            raise FusionError("received covariance not invertible") from None
        Y[tgt[:, None], tgt] += w * Ir
        y[tgt] += w * (Ir @ m_sel)
    try:
        P_new = kernels.spd_inverse(Y)
    except np.linalg.LinAlgError:
        raise FusionError("fused information not invertible") from None
    P_new = 0.5 * (P_new + P_new.T)
    mu_new = P_new @ y
    if angle_arr.size:
        mu_new[angle_arr] = wrap_angle(mu_new[angle_arr])
    return mu_new, P_new


def embedding(local_layout: tuple, blocks: tuple, owner) -> np.ndarray:
    """Index map from packet dimensions into a local joint state.

    ``local_layout`` is the receiver's neighbor-block order, ``blocks`` the
    packet's block ids and ``owner`` the receiver id.
    """
    out = np.full(STATE_DIM * len(blocks), -1, dtype=int)
    for b, src in enumerate(blocks):
        if src == owner:
            o = 0
        elif src in local_layout:
            o = STATE_DIM * (1 + local_layout.index(src))
        else:
            continue
        out[STATE_DIM * b:STATE_DIM * b + STATE_DIM] = np.arange(o, o + STATE_DIM)
    return out


def heading_dims(n: int) -> tuple:
    return tuple(range(4, n, STATE_DIM))


# -- tag logic --------------------------------------------------------------


def nearest_tag_for_unmatched(assignment: Assignment, row_tags: Sequence[int]):
    """Tag to clone: the closest row to the best unmatched received column."""
    cols = assignment.unmatched_cols()
    best = None
    for c in cols:
        col = assignment.cost[:, c]
        if not np.isfinite(col).any():
            continue
        r = int(np.nanargmin(np.where(np.isfinite(col), col, np.nan)))
        if best is None or col[r] < best[0]:
            best = (col[r], r)
    if best is None:
        return row_tags[0] if row_tags else None
    return row_tags[best[1]]


def maybe_increment_tags(table: HypothesisTable, received_counts: Mapping, matched: Mapping,
                         cfg: ExchangeConfig, row_tags: Sequence[int] | None = None) -> HypothesisTable:
    """Clone a tag when neighbors keep sending more hypotheses than tags.

    ``matched`` maps neighbor -> :class:`Assignment` whose rows follow
    ``row_tags`` (ascending tag ids by default).
    """
    if row_tags is None:
        row_tags = sorted(table.tags)
    T = table.tag_count
    if T == 1:
        for j in sorted(received_counts):
            if received_counts[j] > 1:
                a = matched.get(j)
                src = nearest_tag_for_unmatched(a, row_tags) if a is not None else row_tags[0]
                table.clone_tag(row_tags[0] if src is None else src)
                table.excess_counters.clear()
                return table
        return table
    fire = None
    for j in sorted(received_counts):
        if received_counts[j] > T:
            table.excess_counters[j] = table.excess_counters.get(j, 0) + 1
            if table.excess_counters[j] > cfg.tau_n and fire is None:
                fire = j
        else:
            table.excess_counters[j] = 0
    for j in list(table.excess_counters):
        if j not in received_counts:
            table.excess_counters[j] = 0
    if fire is not None:
        a = matched.get(fire)
        src = nearest_tag_for_unmatched(a, row_tags) if a is not None else None
        if src is None:
            src = row_tags[0]
        table.clone_tag(src)
        table.excess_counters[fire] = 0
    return table
