"""Command-line front end: ``resloc {run,cases,validate,replay}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__, exchange, kernels, metrics, sim
from .hypothesis import FilterError
from .scenario import ConfigError, ScenarioConfig, load_scenario, read_scenario_json, validate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("resloc")


class OutputError(OSError):
    pass


def _load(args) -> ScenarioConfig:
    cfg = load_scenario(args.scenario)
    return cfg.with_overrides(seed=args.seed, realizations=args.realizations, steps=args.steps)


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory not writable: {out} ({exc.strerror or exc})") from None
    return out


def manifest(cfg: ScenarioConfig, mc: sim.MonteCarloResult, extra=None) -> dict:
    """Everything needed to reproduce a run bit for bit."""
    d = {
        "resloc_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "realizations": cfg.realizations,
        "steps": cfg.steps,
        "failures": [
            {"realization": r, "step": k, "reason": why} for r, k, why in mc.failures
        ],
        "scenario": cfg.to_dict(),
    }
    if extra:
        d.update(extra)
    return d


def write_metrics(out: Path, cfg: ScenarioConfig, mc: sim.MonteCarloResult, record_packets=False) -> list:
    rows = metrics.metric_rows(mc, cfg.agent_ids)
    written = []
    for name, r in rows.items():
        p = out / f"{name}.csv"
        p.write_text(metrics.rows_to_csv(r))
        written.append(p)
    p = out / "summary.json"
    p.write_text(metrics.dumps_json(metrics.summarize(mc, cfg)))
    written.append(p)
    p = out / "manifest.json"
    p.write_text(metrics.dumps_json(manifest(cfg, mc)))
    written.append(p)
    if record_packets:
        pdir = out / "packets"
        pdir.mkdir(exist_ok=True)
        for run in mc.runs:
            if run.packets is not None:
                f = pdir / f"r{run.realization:04d}.bin"
                f.write_bytes(run.packets)
                written.append(f)
    return rows, written


def _all_failed(mc) -> bool:
    return bool(mc.runs) and not mc.ok_runs


def cmd_run(args) -> int:
    cfg = _load(args)
    out = _prepare_out(args.out)
    log.info("running %d realizations of %s (%d steps)", cfg.realizations, cfg.name, cfg.steps)
    mc = sim.run_monte_carlo(cfg, workers=args.workers, record_packets=args.record_packets)
    write_metrics(out, cfg, mc, args.record_packets)
    for r, k, why in mc.failures:
        log.warning("realization %d failed at step %s: %s", r, k, why)
    if _all_failed(mc):
        print("error: every realization failed", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("wrote results to %s", out)
    return EXIT_OK


def cmd_cases(args) -> int:
    cfg = _load(args)
    out = _prepare_out(args.out)
    cases = metrics.case_matrix(cfg)
    chosen = sorted(cases) if args.case == "all" else [int(args.case)]
    combined = []
    failed = False
    for c in chosen:
        ccfg = cases[c]
        sub = _prepare_out(out / f"case{c}_{metrics.CASE_NAMES[c]}")
        log.info("case %d (%s)", c, metrics.CASE_NAMES[c])
        mc = sim.run_monte_carlo(ccfg, workers=args.workers, record_packets=args.record_packets)
        rows, _ = write_metrics(sub, ccfg, mc, args.record_packets)
        combined.extend((c,) + row for row in rows["anees"] if row[2] != metrics.NAIVE)
        failed |= _all_failed(mc)
    lines = ["case,step,agent,tag_class,value"]
    for c, k, name, cls, v in combined:
        lines.append(f"{c},{k},{name},{cls},{metrics._fmt(v)}")
    (out / "anees_cases.csv").write_text("\n".join(lines) + "\n")
    if failed:
        print("error: every realization of at least one case failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_validate(args) -> int:
    path = Path(args.scenario)
    issues = validate(read_scenario_json(path))
    if issues:
        for code, msg in issues:
            print(f"{code} {msg}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{path}: valid")
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _load(args)
    pdir = Path(args.packets)
    files = sorted(pdir.glob("r*.bin")) if pdir.is_dir() else [pdir]
    if args.realization is not None:
        files = [f for f in files if f.stem == f"r{args.realization:04d}"]
    if not files:
        print(f"error: no packet recordings found in {pdir}", file=sys.stderr)
        return EXIT_CONFIG
    total = 0
    for f in files:
        try:
            r = int(f.stem[1:])
            stream = exchange.decode_stream(f.read_bytes())
        except (OSError, ValueError) as exc:
            print(f"error: cannot decode {f}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        res = sim.run_realization(cfg, r, replay=stream)
        total += res.replay_mismatches
        print(f"realization {r}: {len(stream)} packets replayed, {res.replay_mismatches} mismatches"
              + (f", failed at step {res.failure_step}" if res.failed else ""))
        if res.failed:
            return EXIT_RUNTIME
    return EXIT_OK if total == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resloc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"resloc {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", required=True, metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--realizations", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--verbose", "-v", action="count", default=0)
    runner = argparse.ArgumentParser(add_help=False)
    runner.add_argument("--out", required=True, metavar="DIR")
    runner.add_argument("--record-packets", action="store_true")
    runner.add_argument("--workers", type=int, default=None,
                        help="worker processes (default: $RESLOC_WORKERS or 1)")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("run", parents=[common, runner], help="Monte-Carlo run with metric export")
    s.set_defaults(func=cmd_run)
    s = sub.add_parser("cases", parents=[common, runner], help="the four evaluation cases")
    s.add_argument("--case", choices=["1", "2", "3", "4", "all"], default="all")
    s.set_defaults(func=cmd_cases)
    s = sub.add_parser("validate", parents=[common], help="check a scenario without running it")
    s.set_defaults(func=cmd_validate)
    s = sub.add_parser("replay", parents=[common], help="re-run fusion from recorded packets")
    s.add_argument("--packets", required=True, metavar="PATH",
                   help="directory written by --record-packets, or one .bin file")
    s.add_argument("--realization", type=int)
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for code, msg in exc.issues:
            print(f"{code} {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FilterError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
