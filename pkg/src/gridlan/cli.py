"""``gridlan`` command line: validate, boot, run, bench latency|speedup, calibrate.

Exit codes: 0 success, 1 usage or config error, 2 runtime error.  Seed and
output directory fall back to ``GRIDLAN_SEED`` / ``GRIDLAN_OUT`` when the
flags are absent.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .calibration import CalibrationTargets, InfeasibleTarget, calibrate_paper
from .lifecycle import InjectionError
from .runner import (Injection, RunManifest, build_sim, env_out, env_seed, header,
                     latency_rows, latency_text, run_manifest, speedup_text,
                     transcripts_text, write_report)
from .scheduler import SubmissionError
from .topology import ConfigError, TopologyError, load_topology, resolve_config_path
from .workload import (PlacementError, TurboModel, WorkloadProfile, comparison_run,
                       ideal_t1, speedup_curve)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_cores(spec: str) -> list[int]:
    """``1..26``, ``1,2,4`` or a mix like ``1..4,8,16``."""
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise UsageError(f"empty core list {spec!r}")
    return out


def _injections(args) -> list[Injection]:
    kills = args.kill or []
    ats = args.at or []
    if len(kills) != len(ats):
        raise UsageError("every --kill needs a matching --at")
    return [Injection(t, a, args.kill_kind) for t, a in zip(kills, ats)]


def _add_injection_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kill", action="append", metavar="ID",
                   help="client id (host) or <client>.vm (node) to fail; repeatable")
    p.add_argument("--at", action="append", type=float, metavar="SECONDS",
                   help="failure time for the matching --kill")
    p.add_argument("--kill-kind", default="network-fault",
                   choices=["network-fault", "power-off"])
    p.add_argument("--scenario", help="scenario JSON (injections, schedules, start time)")


def cmd_validate(args) -> int:
    try:
        load_topology(args.config)
    except ConfigError as exc:
        for m in exc.problems:
            print(f"error: {m}", file=sys.stderr)
        return EXIT_USAGE
    except TopologyError as exc:
        for v in exc.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_USAGE
    print(f"{args.config}: ok")
    return EXIT_OK


def cmd_boot(args) -> int:
    seed = args.seed if args.seed is not None else env_seed(0)
    m = RunManifest(config=args.config, scenario=args.scenario, seed=seed,
                    injections=_injections(args))
    sim, _ = build_sim(m)
    sim.boot()
    sim.run(until_s=args.until)
    sys.stdout.write(header(seed, str(resolve_config_path(args.config))) + transcripts_text(sim))
    return EXIT_OK


def cmd_run(args) -> int:
    m = RunManifest.load(args.manifest) if args.manifest else RunManifest()
    for key in ("config", "jobs", "scenario", "policy"):
        v = getattr(args, key)
        if v is not None:
            setattr(m, key, v)
    if args.until is not None:
        m.until_s = args.until
    if args.trace:
        m.trace = True
    m.seed = args.seed if args.seed is not None else env_seed(m.seed)
    m.out = args.out if args.out is not None else env_out(m.out)
    m.injections = m.injections + _injections(args)
    sim, paths = run_manifest(m)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_bench_latency(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    topo = load_topology(args.config)
    seed = args.seed if args.seed is not None else env_seed(0)
    body = latency_text(latency_rows(topo, args.trials, seed, mpi=args.mpi))
    hdr = header(seed, str(resolve_config_path(args.config)))
    sys.stdout.write(hdr + body)
    if args.out or env_out(""):
        write_report(Path(args.out or env_out("")), "latency.csv", hdr, body)
    return EXIT_OK


def cmd_bench_speedup(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    topo = load_topology(args.config)
    seed = args.seed if args.seed is not None else env_seed(0)
    cores = parse_cores(args.cores) if args.cores else list(range(1, topo.total_vcores + 1))
    turbo = TurboModel.from_topology(topo, enabled=not args.no_turbo)
    cal = None
    if args.work is not None:
        profile = WorkloadProfile(args.work, name="npb-ep")
    else:
        cal = calibrate_paper(topo)
        profile = cal.profile()
    samples = speedup_curve(topo, profile, cores, args.trials, turbo, seed=seed,
                            workers=args.workers)
    t1 = ideal_t1(topo, profile, turbo)
    hdr = header(seed, str(resolve_config_path(args.config)))
    body = speedup_text(samples, t1)
    out = args.out or env_out("")
    if out:
        write_report(Path(out), "speedup.csv", hdr, body)
    else:
        sys.stdout.write(hdr + body)
    if args.comparison:
        server_cores = topo.server.comparison_cores or 64
        clock = cal.comparison_base_clock if cal else 1.0
        boost = cal.comparison_boost if cal else 0.0
        cmp_samples = comparison_run(server_cores, profile, range(1, server_cores + 1),
                                     clock, boost)
        cmp_body = speedup_text(cmp_samples, cmp_samples[0].elapsed_s)
        if out:
            write_report(Path(out), "comparison.csv", hdr, cmp_body)
        else:
            sys.stdout.write(cmp_body)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    topo = load_topology(args.config)
    targets = CalibrationTargets(grid_cores=args.grid_cores, grid_elapsed_s=args.target_time,
                                 comparison_cores=args.comparison_cores,
                                 parity_cores=args.parity_cores)
    result = calibrate_paper(topo, targets)
    text = json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    out = args.out or env_out("")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "calibration.json").write_text(text, encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gridlan", description="Local-grid control-plane simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="check a topology config")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)

    b = sub.add_parser("boot", help="boot every client and print node transcripts")
    b.add_argument("--config", default="paper")
    b.add_argument("--seed", type=int)
    b.add_argument("--until", type=float, default=600.0, metavar="SECONDS")
    _add_injection_flags(b)
    b.set_defaults(func=cmd_boot)

    r = sub.add_parser("run", help="boot, apply the scenario and run jobs")
    r.add_argument("--manifest")
    r.add_argument("--config")
    r.add_argument("--jobs")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--until", type=float, metavar="SECONDS")
    r.add_argument("--policy", choices=["first-fit", "random-scatter"])
    r.add_argument("--trace", action="store_true", help="also write trace.tsv")
    _add_injection_flags(r)
    r.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="latency and speed-up experiments")
    bsub = bench.add_subparsers(dest="kind", required=True, parser_class=_Parser)
    lat = bsub.add_parser("latency", help="ping every host and node from the server")
    lat.add_argument("--config", default="paper")
    lat.add_argument("--trials", type=int, default=1000)
    lat.add_argument("--seed", type=int)
    lat.add_argument("--out")
    lat.add_argument("--mpi", action="store_true", help="add the MPI overhead term")
    lat.set_defaults(func=cmd_bench_latency)
    sp = bsub.add_parser("speedup", help="random-scatter EP runs per core count")
    sp.add_argument("--config", default="paper")
    sp.add_argument("--cores", help="e.g. 1..26 or 1,2,4,8")
    sp.add_argument("--trials", type=int, default=200)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--work", type=float, help="total core-seconds; calibrated if omitted")
    sp.add_argument("--no-turbo", action="store_true")
    sp.add_argument("--comparison", action="store_true",
                    help="also emit the single-machine comparison curve")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench_speedup)

    c = sub.add_parser("calibrate", help="fit work and comparison clock to the anchors")
    c.add_argument("--config", default="paper")
    c.add_argument("--target-time", type=float, default=212.0)
    c.add_argument("--grid-cores", type=int, default=26)
    c.add_argument("--comparison-cores", type=int, default=64)
    c.add_argument("--parity-cores", type=int, default=38)
    c.add_argument("--out")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        for m in exc.problems:
            print(f"error: {m}", file=sys.stderr)
        return EXIT_USAGE
    except TopologyError as exc:
        for v in exc.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_USAGE
    except (InjectionError, InfeasibleTarget) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SubmissionError, PlacementError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, KeyError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
