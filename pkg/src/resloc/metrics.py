"""NEES/ANEES and RMS over Monte-Carlo runs, plus the four evaluation cases.

Tags are not comparable across realizations (a tag number means nothing
outside its own run), so every run is reduced to two tracks per agent before
averaging:

* ``truth``: the tag whose time-averaged position error is smallest;
* ``spoof``: the remaining tag with the largest time-averaged error.

Before a tag exists its track falls back to the tag it was cloned from, so
both curves coincide until the split and branch afterwards.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .models import wrap_angle
from .scenario import AttackSpec, ConfigError, ScenarioConfig, disable_attack, with_sharing

TRUTH = "truth"
SPOOF = "spoof"
NAIVE = "naive"

CASE_NAMES = {
    1: "no_attack_pairwise",
    2: "no_attack_full",
    3: "attack_pairwise",
    4: "attack_full",
}

# attack applied by cases 3 and 4 when the base scenario carries none
REFERENCE_ATTACK = AttackSpec(20, {"RF0": [(20, 5.0, 0.0)], "RF1": [(20, 5.0, 0.0)]})


SINGULAR_RCOND = 1e-15


class SingularCovarianceError(ValueError):
    """Covariance handed to the NEES is not invertible."""


def _pose_error(true_pose, est_mean):
    e = np.asarray(true_pose, dtype=float)[..., :3] - np.asarray(est_mean, dtype=float)
    e = np.array(e, dtype=float)
    e[..., 2] = wrap_angle(e[..., 2])
    return e


def nees(true_pose, est_mean, est_cov) -> float:
    """Normalized estimation error squared of one 3-dim pose estimate."""
    if hasattr(true_pose, "as_array"):
        true_pose = true_pose.as_array()
    e = _pose_error(true_pose, est_mean)
    P = np.asarray(est_cov, dtype=float)
    if not 1.0 / np.linalg.cond(P) > SINGULAR_RCOND:
        raise SingularCovarianceError("estimate covariance is singular")
    return float(e @ np.linalg.solve(P, e))


def nees_series(true_poses, means, covs) -> np.ndarray:
    """Per-step NEES of a (K, 3) track; NaN where the track is missing."""
    e = _pose_error(true_poses, means)
    out = np.full(e.shape[0], np.nan)
    ok = np.all(np.isfinite(e), axis=1)
    if ok.any():
        x = np.linalg.solve(np.asarray(covs)[ok], e[ok][..., None])[..., 0]
        out[ok] = np.einsum("ki,ki->k", e[ok], x)
    return out


def _truth_pose(run, agent):
    # truth holds full states (x, y, vx, vy, theta)
    return run.truth[:, agent][:, [0, 1, 4]]


def _run_list(runs) -> list:
    if hasattr(runs, "ok_runs"):
        return list(runs.ok_runs)
    return [r for r in runs if not getattr(r, "failed", False)]


# -- tag association ------------------------------------------------------------


def tag_track(run, agent: int, tag: int):
    """Mean and covariance of ``tag``; earlier steps are taken from its ancestors."""
    mean = run.tag_mean[agent][tag].copy()
    cov = run.tag_cov[agent][tag].copy()
    exists = np.flatnonzero(np.isfinite(mean[:, 0]))
    parent = run.tag_parent[agent].get(tag)
    if exists.size and exists[0] > 0 and parent is not None and parent != tag:
        pm, pc = tag_track(run, agent, parent)
        k0 = exists[0]
        mean[:k0] = pm[:k0]
        cov[:k0] = pc[:k0]
    return mean, cov


def mean_position_error(run, agent: int, tag: int) -> float:
    m = run.tag_mean[agent][tag]
    tr = _truth_pose(run, agent)
    d = np.hypot(tr[:, 0] - m[:, 0], tr[:, 1] - m[:, 1])
    return float(np.nanmean(d)) if np.isfinite(d).any() else math.inf


def classify_tags(run, agent: int) -> dict:
    """Map ``truth``/``spoof`` to a tag of ``agent`` (``spoof`` only after a split)."""
    tags = sorted(run.tag_mean[agent])
    if not tags:
        return {}
    err = {t: mean_position_error(run, agent, t) for t in tags}
    truth = min(tags, key=lambda t: (err[t], t))
    out = {TRUTH: truth}
    others = [t for t in tags if t != truth]
    if others:
        out[SPOOF] = max(others, key=lambda t: (err[t], -t))
    return out


def class_tracks(run, agent: int, rule=classify_tags) -> dict:
    """``{class: (mean (K,3), cov (K,3,3))}`` including the naive baseline."""
    out = {c: tag_track(run, agent, t) for c, t in rule(run, agent).items()}
    out[NAIVE] = (run.naive_mean[:, agent], run.naive_cov[:, agent])
    return out


# -- aggregates -------------------------------------------------------------------


@dataclass
class NeesSeries:
    """Per-step NEES averaged over realizations, one curve per track class."""

    agent: int
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    realizations: int = 0

    def time_average(self, cls: str, start: int = 0, stop: int | None = None) -> float:
        v = self.values.get(cls)
        if v is None:
            return math.nan
        v = v[start:stop]
        return float(np.nanmean(v)) if np.isfinite(v).any() else math.nan


@dataclass
class RmsSeries:
    """Per-step RMS of x, y and heading errors over realizations."""

    agent: int
    values: dict = field(default_factory=dict)  # class -> (K, 3)
    counts: dict = field(default_factory=dict)
    realizations: int = 0

    def time_rms(self, cls: str, component: int = 0, start: int = 0, stop: int | None = None) -> float:
        v = self.values.get(cls)
        if v is None:
            return math.nan
        v = v[start:stop, component]
        ok = np.isfinite(v)
        return float(np.sqrt(np.mean(v[ok] ** 2))) if ok.any() else math.nan


def _nanmean_stack(rows, K):
    if not rows:
        return np.full(K, np.nan), np.zeros(K, dtype=int)
    a = np.vstack(rows)
    cnt = np.isfinite(a).sum(axis=0)
    with np.errstate(invalid="ignore"):
        s = np.nansum(a, axis=0) / np.where(cnt > 0, cnt, 1)
    s[cnt == 0] = np.nan
    return s, cnt


def anees(runs, agent: int, rule=classify_tags) -> NeesSeries:
    """ANEES curves of ``agent`` for the truth, spoof and naive tracks."""
    runs = _run_list(runs)
    K = runs[0].steps if runs else 0
    rows = {TRUTH: [], SPOOF: [], NAIVE: []}
    for run in runs:
        tr = _truth_pose(run, agent)
        for cls, (m, P) in class_tracks(run, agent, rule).items():
            rows[cls].append(nees_series(tr, m, P))
    out = NeesSeries(agent, realizations=len(runs))
    for cls, r in rows.items():
        if r:
            out.values[cls], out.counts[cls] = _nanmean_stack(r, K)
    return out


def rms(runs, agent: int, rule=classify_tags) -> RmsSeries:
    """Per-step RMS of the truth-track and naive pose errors of ``agent``."""
    runs = _run_list(runs)
    K = runs[0].steps if runs else 0
    sq = {TRUTH: [], NAIVE: []}
    for run in runs:
        tr = _truth_pose(run, agent)
        tracks = class_tracks(run, agent, rule)
        for cls in sq:
            if cls in tracks:
                sq[cls].append(_pose_error(tr, tracks[cls][0]) ** 2)
    out = RmsSeries(agent, realizations=len(runs))
    for cls, r in sq.items():
        if not r:
            continue
        a = np.stack(r)
        cnt = np.isfinite(a[..., 0]).sum(axis=0)
        with np.errstate(invalid="ignore"):
            ms = np.nansum(a, axis=0) / np.where(cnt > 0, cnt, 1)[:, None]
        ms[cnt == 0] = np.nan
        out.values[cls] = np.sqrt(ms)
        out.counts[cls] = cnt
    return out


def split_onsets(runs, agent: int, after: int) -> list:
    """Steps after ``after`` at which ``agent`` first holds two tags (None if never)."""
    out = []
    for run in _run_list(runs):
        k = run.second_tag_step(agent, after)
        out.append(None if k is None else k - after)
    return out


# -- the four evaluation cases ------------------------------------------------------


def case_matrix(cfg: ScenarioConfig) -> dict:
    """The four evaluation variants keyed by case number.

    1/2: no attack with pairwise/full sharing; 3/4: attack with pairwise/full
    sharing. A base scenario without an attack gets the reference attack
    (5 m x-bias on RF0 and RF1 from step 20) in cases 3 and 4.
    """
    attack = cfg.attack
    if not attack.enabled:
        missing = [s for s in REFERENCE_ATTACK.targets if s not in cfg.anchor_ids]
        if missing:
            raise ConfigError([("E105", f"reference attack targets missing from scenario: {missing}")])
        attack = REFERENCE_ATTACK
    quiet = disable_attack(cfg)
    loud = replace(cfg, attack=attack)
    return {
        1: with_sharing(quiet, "pairwise"),
        2: with_sharing(quiet, "full"),
        3: with_sharing(loud, "pairwise"),
        4: with_sharing(loud, "full"),
    }


# -- export -------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def metric_rows(runs, names) -> dict:
    """Rows ``(step, agent, tag_class, value)`` for every exported metric."""
    out = {"anees": [], "rms_x": [], "rms_y": [], "rms_theta": []}
    for a, name in enumerate(names):
        ns = anees(runs, a)
        rs = rms(runs, a)
        for cls in (TRUTH, SPOOF, NAIVE):
            v = ns.values.get(cls)
            if v is None:
                continue
            for k, x in enumerate(v):
                if cls == SPOOF and not np.isfinite(x):
                    continue
                out["anees"].append((k, name, cls, x))
        for c, key in enumerate(("rms_x", "rms_y", "rms_theta")):
            for cls in (TRUTH, NAIVE):
                v = rs.values.get(cls)
                if v is None:
                    continue
                for k, x in enumerate(v[:, c]):
                    out[key].append((k, name, cls, x))
    return out


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "agent", "tag_class", "value"))
    for k, name, cls, v in rows:
        w.writerow((k, name, cls, _fmt(v)))
    return buf.getvalue()


def summarize(runs, cfg: ScenarioConfig, tail: float = 0.25) -> dict:
    """Time-averaged ANEES and RMS over the final ``tail`` of the run, per agent."""
    ok = _run_list(runs)
    names = list(cfg.agent_ids)
    K = cfg.steps
    start = int(math.floor((1.0 - tail) * K))
    agents = {}
    for a, name in enumerate(names):
        ns = anees(ok, a) if ok else NeesSeries(a)
        rs = rms(ok, a) if ok else RmsSeries(a)
        entry = {
            "anees_tail": {c: _json_num(ns.time_average(c, start)) for c in (TRUTH, SPOOF, NAIVE)},
            "rms_tail": {
                c: {comp: _json_num(rs.time_rms(c, j, start)) for j, comp in enumerate(("x", "y", "theta"))}
                for c in (TRUTH, NAIVE)
            },
        }
        if cfg.attack.enabled:
            ons = split_onsets(ok, a, cfg.attack.start_step)
            hit = [o for o in ons if o is not None]
            entry["second_tag_fraction"] = _json_num(len(hit) / len(ons)) if ons else None
            entry["mean_onset"] = _json_num(float(np.mean(hit))) if hit else None
        entry["split_fraction"] = _json_num(np.mean([r.any_split() for r in ok])) if ok else None
        agents[name] = entry
    return {"tail_start_step": start, "realizations_ok": len(ok), "agents": agents}


def _json_num(v):
    if v is None:
        return None
    v = float(v)
    return None if math.isnan(v) or math.isinf(v) else v


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
