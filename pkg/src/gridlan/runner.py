"""Whole-grid simulation runs: wiring, input files and report writers."""
from __future__ import annotations

import csv
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

from . import __version__
from .lifecycle import BootTimings, Lifecycle
from .netmodel import LatencyModel, ping_probe
from .scheduler import JobScript, JobStatus, Scheduler, SubmissionError
from .simcore import Engine, Rng, seconds_to_us, us_to_seconds
from .topology import (ConfigError, Topology, Window, _hhmm, config_digest, load_topology,
                       node_id, parse_json_text, resolve_config_path)
from .workload import CpuPool, SpeedupSample, TurboModel, WorkloadProfile

DEFAULT_MAX_S = 30 * 86_400


@dataclass(frozen=True)
class Injection:
    target: str
    at_s: float
    kind: str = "network-fault"


@dataclass
class Scenario:
    injections: list[Injection] = field(default_factory=list)
    schedules: dict[str, list[Window]] = field(default_factory=dict)
    start_time_of_day_s: int = 0
    policy: Optional[str] = None


@dataclass
class RunManifest:
    config: str = "paper"
    jobs: Optional[str] = None
    scenario: Optional[str] = None
    seed: int = 0
    out: str = "out"
    until_s: Optional[float] = None
    trace: bool = False
    policy: str = "first-fit"
    injections: list[Injection] = field(default_factory=list)

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        data = _read_json(path)
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: manifest must be an object"])
        known = {f.name for f in dataclasses.fields(cls)} - {"injections"}
        bad = sorted(set(data) - known)
        if bad:
            raise ConfigError([f"{path}: unknown manifest keys {bad}"])
        base = Path(path).parent
        m = cls(**data)
        # relative paths resolve against the manifest's directory
        for key in ("config", "jobs", "scenario"):
            v = getattr(m, key)
            if v and not Path(v).is_absolute() and (base / v).exists():
                setattr(m, key, str(base / v))
        return m


def _read_json(path: str) -> Any:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
    return parse_json_text(text, path)


def load_scenario(path: str) -> Scenario:
    data = _read_json(path)
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: scenario must be an object"])
    sc = Scenario()
    for i, raw in enumerate(data.get("injections", [])):
        try:
            sc.injections.append(Injection(str(raw["target"]), float(raw["at_s"]),
                                           str(raw.get("kind", "network-fault"))))
        except (KeyError, TypeError, ValueError):
            problems.append(f"{path}: injections[{i}]: need target, at_s and optional kind")
    for cid, wins in (data.get("schedules") or {}).items():
        parsed = []
        for j, w in enumerate(wins):
            loc = f"{path}: schedules.{cid}[{j}]"
            if not isinstance(w, list) or len(w) != 2:
                problems.append(f"{loc}: expected [start, end]")
                continue
            s, e = _hhmm(w[0], loc, problems), _hhmm(w[1], loc, problems)
            if s is not None and e is not None:
                parsed.append(Window(s, e))
        sc.schedules[cid] = parsed
    if "start_time_of_day" in data:
        v = _hhmm(data["start_time_of_day"], f"{path}: start_time_of_day", problems)
        sc.start_time_of_day_s = v or 0
    sc.policy = data.get("policy")
    unknown = set(data) - {"injections", "schedules", "start_time_of_day", "policy"}
    problems.extend(f"{path}: unknown scenario key {k!r}" for k in sorted(unknown))
    if problems:
        raise ConfigError(problems)
    return sc


def with_schedules(topo: Topology, schedules: dict[str, list[Window]]) -> Topology:
    if not schedules:
        return topo
    ids = set(topo.client_ids)
    unknown = sorted(set(schedules) - ids)
    if unknown:
        raise ConfigError([f"schedules: unknown clients {unknown}"])
    clients = tuple(dataclasses.replace(c, schedule=tuple(schedules[c.id]))
                    if c.id in schedules else c for c in topo.clients)
    return dataclasses.replace(topo, clients=clients)


def load_jobs(path: str) -> list[JobScript]:
    data = _read_json(path)
    if isinstance(data, list):
        data = {"jobs": data}
    if not isinstance(data, dict):
        raise ConfigError([f"{path}: jobs file must be an object or list"])
    profiles = {}
    problems = []
    for name, raw in (data.get("workloads") or {}).items():
        try:
            profiles[name] = WorkloadProfile.from_dict(raw, name)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{path}: workloads.{name}: {exc}")
    jobs = []
    for i, raw in enumerate(data.get("jobs", [])):
        loc = f"{path}: jobs[{i}]"
        try:
            wl = raw["workload"]
            if isinstance(wl, dict):
                profile = WorkloadProfile.from_dict(wl)
            elif wl in profiles:
                profile = profiles[wl]
            else:
                problems.append(f"{loc}.workload: unknown workload {wl!r}")
                continue
            procs = raw["procs"]
            if not isinstance(procs, int) or isinstance(procs, bool):
                problems.append(f"{loc}.procs: expected integer")
                continue
            jobs.append(JobScript(str(raw["job_id"]), str(raw.get("queue", "gridlan")), procs,
                                  profile, str(raw.get("user", "")),
                                  float(raw.get("submit_at_s", 0.0))))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"{loc}: missing or invalid field {exc}")
    if problems:
        raise ConfigError(problems)
    return jobs


class GridSim:
    """Engine, network, lifecycle, CPU pool and scheduler wired together."""

    def __init__(self, topology: Topology, seed: int = 0, policy: str = "first-fit",
                 trace: bool = False, timings: Optional[BootTimings] = None,
                 turbo: Optional[TurboModel] = None, day_offset_s: int = 0,
                 auto_requeue: bool = True, jitter: bool = True) -> None:
        self.topology = topology
        self.seed = seed
        self.rng = Rng(seed)
        self.engine = Engine(trace=trace)
        self.model = LatencyModel.from_topology(topology, jitter=jitter)
        self.lifecycle = Lifecycle(self.engine, topology, self.model, self.rng.fork("net"),
                                   timings)
        self.turbo = turbo or TurboModel.from_topology(topology)
        self.pool = CpuPool(self.engine, self.turbo)
        self.scheduler = Scheduler(self.engine, topology, self.pool, self.lifecycle.net,
                                   self.rng.fork("scheduler"), policy, day_offset_s)
        self.lifecycle.on_ready.append(self.scheduler.on_node_ready)
        self.lifecycle.on_down.append(self.scheduler.on_node_down)
        self.lifecycle.on_health.append(self.scheduler.on_health)
        if auto_requeue:
            self.lifecycle.on_sweep.append(lambda t: self.scheduler.requeue_unfinished())
        self.pending_submissions = 0
        self.last_injection_us = 0
        self.rejected: list[tuple[str, str]] = []

    def boot(self) -> None:
        self.lifecycle.start_all()
        self.lifecycle.start_sweeps()
        self.scheduler.watch_schedules()

    def check_job(self, job: JobScript) -> None:
        s = self.scheduler
        if job.queue_name not in s.queues:
            raise SubmissionError(f"job {job.job_id}: unknown queue {job.queue_name!r}")
        if s.users and job.user not in s.users:
            raise SubmissionError(f"job {job.job_id}: user {job.user!r} is not authorized")
        if job.procs <= 0:
            raise SubmissionError(f"job {job.job_id}: procs must be positive")

    def submit_at(self, job: JobScript) -> None:
        self.check_job(job)
        self.pending_submissions += 1

        def fire(ev) -> None:
            self.pending_submissions -= 1
            try:
                self.scheduler.submit(job)
            except SubmissionError as exc:
                self.rejected.append((job.job_id, str(exc)))

        self.engine.schedule(seconds_to_us(job.submit_at_s), self.topology.server.id,
                             "qsub", fire)

    def inject(self, inj: Injection) -> None:
        at = seconds_to_us(inj.at_s)
        self.lifecycle.inject_failure(inj.target, at, inj.kind)
        self.last_injection_us = max(self.last_injection_us, at)

    def settled(self) -> bool:
        if self.pending_submissions or self.engine.now < self.last_injection_us:
            return False
        return all(r.status is JobStatus.COMPLETED for r in self.scheduler.jobs.values())

    def run(self, until_s: Optional[float] = None, max_s: float = DEFAULT_MAX_S) -> None:
        if until_s is not None:
            self.engine.run_until(seconds_to_us(until_s))
            return
        step = seconds_to_us(self.lifecycle.timings.sweep_period_s)
        limit = seconds_to_us(max_s)
        while self.engine.now < limit:
            self.engine.run_until(min(self.engine.now + step, limit))
            if self.settled():
                break


# -- reports -------------------------------------------------------------------

def header(seed: int, config: str) -> str:
    return f"# gridlan {__version__} seed={seed} config_sha256={config_digest(config)}\n"


def _csv(rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def transcripts_text(sim: GridSim) -> str:
    lines = ["client_id\ttime_s\tstate"]
    for cid in sim.topology.client_ids:
        for e in sim.lifecycle.transcript(cid):
            lines.append(f"{cid}\t{us_to_seconds(e.time_us):.6f}\t{e.label()}")
    return "\n".join(lines) + "\n"


def journal_text(sim: GridSim) -> str:
    return _csv([["job_id", "event", "time_s", "detail"],
                 *(e.csv_row() for e in sim.scheduler.journal)])


def health_text(sim: GridSim) -> str:
    return _csv([["node_id", "sweep_s", "status", "updated_s"],
                 *([r.node_id, f"{us_to_seconds(r.last_sweep):.6f}", r.status,
                    f"{us_to_seconds(r.updated_at):.6f}"] for r in sim.lifecycle.health_log)])


def trace_text(sim: GridSim) -> str:
    return "fire_at_us\tseq\ttarget\tpayload_kind\n" + "".join(
        line + "\n" for line in sim.engine.trace or ())


def latency_rows(topo: Topology, trials: int, seed: int, mpi: bool = False,
                 model: Optional[LatencyModel] = None) -> list[list[Any]]:
    model = model or LatencyModel.from_topology(topo)
    rng = Rng(seed)
    rows = []
    for cid in topo.client_ids:
        for kind, ep in (("host", cid), ("node", node_id(cid))):
            r = ping_probe(model, ep, trials=trials, rng=rng.fork(f"latency/{ep}"), mpi=mpi)
            rows.append([cid, kind, trials, f"{r.mean:.3f}", f"{r.stddev:.3f}"])
    return rows


def latency_text(rows: list[list[Any]]) -> str:
    return _csv([["endpoint", "kind", "trials", "mean_us", "stddev_us"], *rows])


def speedup_text(samples: Sequence[SpeedupSample], t1: float) -> str:
    return _csv([["n_cores", "trial", "elapsed_s", "placement", "t1_over_n"],
                 *([s.n_cores, s.trial, f"{s.elapsed_s:.6f}", s.placement,
                    f"{t1 / s.n_cores:.6f}"] for s in samples)])


def write_report(out: Path, name: str, hdr: str, body: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    p = out / name
    p.write_text(hdr + body, encoding="utf-8")
    return p


def build_sim(manifest: RunManifest) -> tuple[GridSim, list[JobScript]]:
    topo = load_topology(manifest.config)
    scenario = load_scenario(manifest.scenario) if manifest.scenario else Scenario()
    topo = with_schedules(topo, scenario.schedules)
    policy = scenario.policy or manifest.policy
    sim = GridSim(topo, seed=manifest.seed, policy=policy, trace=manifest.trace,
                  day_offset_s=scenario.start_time_of_day_s)
    jobs = load_jobs(manifest.jobs) if manifest.jobs else []
    for inj in [*scenario.injections, *manifest.injections]:
        sim.inject(inj)
    for job in jobs:
        sim.submit_at(job)
    return sim, jobs


def run_manifest(manifest: RunManifest) -> tuple[GridSim, list[Path]]:
    sim, _ = build_sim(manifest)
    sim.boot()
    sim.run(manifest.until_s)
    hdr = header(manifest.seed, str(resolve_config_path(manifest.config)))
    out = Path(manifest.out)
    paths = [
        write_report(out, "transcripts.tsv", hdr, transcripts_text(sim)),
        write_report(out, "journal.csv", hdr, journal_text(sim)),
        write_report(out, "health.csv", hdr, health_text(sim)),
    ]
    if manifest.trace:
        paths.append(write_report(out, "trace.tsv", hdr, trace_text(sim)))
    return sim, paths


def env_seed(default: int) -> int:
    v = os.environ.get("GRIDLAN_SEED")
    return int(v) if v not in (None, "") else default


def env_out(default: str) -> str:
    return os.environ.get("GRIDLAN_OUT") or default
