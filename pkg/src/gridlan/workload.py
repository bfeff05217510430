"""Execution-time model for grid jobs and the speed-up benchmark harness.

A job of ``procs`` processes owns ``total_work`` core-seconds at reference
clock 1.0, split evenly across processes and, for communicating profiles,
across rounds.  A process computing on a client advances at that client's
current clock, which depends on how many processes are computing there at
that instant (dynamic turbo).  Communicating profiles gather to process 0
after each round and wait for its release before the next round.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional, Sequence

from .netmodel import LatencyModel, Message, Network
from .simcore import US_PER_S, Engine, Rng
from .topology import Topology, node_id

PATTERNS = ("none", "all-to-master")
COMPARISON_ID = "comparison"


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadProfile:
    total_work: float
    rounds: int = 0
    comm_message_bytes: int = 0
    pattern: str = "none"
    name: str = "ep"

    def __post_init__(self) -> None:
        if not (self.total_work >= 0 and math.isfinite(self.total_work)):
            raise ValueError("total_work must be finite and non-negative")
        if self.rounds < 0 or self.comm_message_bytes < 0:
            raise ValueError("rounds and comm_message_bytes must be non-negative")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}")

    @property
    def embarrassingly_parallel(self) -> bool:
        return self.rounds == 0 or self.comm_message_bytes == 0 or self.pattern == "none"

    @classmethod
    def from_dict(cls, d: dict[str, Any], name: str = "") -> "WorkloadProfile":
        return cls(
            total_work=float(d["total_work"]),
            rounds=int(d.get("rounds", 0)),
            comm_message_bytes=int(d.get("comm_message_bytes", 0)),
            pattern=d.get("pattern", "all-to-master" if d.get("rounds") else "none"),
            name=d.get("name", name or "job"),
        )

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "total_work": self.total_work, "rounds": self.rounds,
                "comm_message_bytes": self.comm_message_bytes, "pattern": self.pattern}


@dataclass(frozen=True)
class ClientClock:
    base_clock: float = 1.0
    boost: float = 0.0


class TurboModel:
    """``clock(a) = base * (1 + b * (cores - a) / (cores - 1))``; ``base*(1+b)`` if one core."""

    def __init__(self, clocks: dict[str, ClientClock], cores: dict[str, int],
                 enabled: bool = True) -> None:
        self.clocks = dict(clocks)
        self.cores = dict(cores)
        self.enabled = enabled

    @classmethod
    def from_topology(cls, topo: Topology, enabled: bool = True,
                      homogeneous: bool = False) -> "TurboModel":
        section = topo.turbo.get("clients", {}) if topo.turbo else {}
        clocks = {}
        for c in topo.clients:
            raw = section.get(c.id, {})
            clocks[c.id] = ClientClock(
                1.0 if homogeneous else float(raw.get("base_clock", 1.0)),
                float(raw.get("boost", 0.0)),
            )
        return cls(clocks, {c.id: c.cores for c in topo.clients}, enabled)

    @classmethod
    def single(cls, client_id: str, cores: int, base_clock: float = 1.0,
               boost: float = 0.0) -> "TurboModel":
        return cls({client_id: ClientClock(base_clock, boost)}, {client_id: cores})

    def without_boost(self) -> "TurboModel":
        return TurboModel(self.clocks, self.cores, enabled=False)

    def clock(self, client_id: str, active: int) -> float:
        cc = self.clocks.get(client_id, ClientClock())
        b = cc.boost if self.enabled else 0.0
        cores = self.cores.get(client_id, 1)
        if cores <= 1:
            return cc.base_clock * (1.0 + b)
        a = min(max(active, 1), cores)
        return cc.base_clock * (1.0 + b * (cores - a) / (cores - 1))

    def max_clock(self, client_id: str) -> float:
        return self.clock(client_id, 1)


@dataclass(frozen=True)
class Placement:
    """Process index -> (client id, anonymous core slot)."""

    slots: tuple[tuple[str, int], ...]

    @classmethod
    def from_clients(cls, clients: Sequence[str]) -> "Placement":
        seen: dict[str, int] = {}
        slots = []
        for c in clients:
            slots.append((c, seen.get(c, 0)))
            seen[c] = seen.get(c, 0) + 1
        return cls(tuple(slots))

    @property
    def clients(self) -> list[str]:
        return [c for c, _ in self.slots]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c, _ in self.slots:
            out[c] = out.get(c, 0) + 1
        return out

    def summary(self, order: Optional[Iterable[str]] = None) -> str:
        counts = self.counts()
        keys = [k for k in order if k in counts] if order is not None else sorted(counts)
        return ";".join(f"{k}:{counts[k]}" for k in keys)

    def __len__(self) -> int:
        return len(self.slots)


# -- processor sharing --------------------------------------------------------

@dataclass
class _Proc:
    client: str
    remaining: float
    on_done: Callable[[], None]
    rate: float = 0.0
    since: int = 0
    event: Optional[int] = None


class CpuPool:
    """Tracks computing processes per client and retimes them when counts change."""

    def __init__(self, engine: Engine, turbo: TurboModel) -> None:
        self.engine = engine
        self.turbo = turbo
        self.procs: dict[Any, _Proc] = {}
        self.by_client: dict[str, dict[Any, None]] = {}

    def active(self, client: str) -> int:
        return len(self.by_client.get(client, ()))

    def start(self, key: Any, client: str, work: float, on_done: Callable[[], None]) -> None:
        if key in self.procs:
            raise KeyError(f"process {key!r} already computing")
        self.procs[key] = _Proc(client, max(work, 0.0), on_done, since=self.engine.now)
        self.by_client.setdefault(client, {})[key] = None
        self._retime(client)

    def stop(self, key: Any) -> float:
        """Remove a computing process; return its remaining work."""
        p = self.procs.pop(key)
        self._advance(p)
        if p.event is not None:
            self.engine.cancel(p.event)
        del self.by_client[p.client][key]
        self._retime(p.client)
        return p.remaining

    def _advance(self, p: _Proc) -> None:
        now = self.engine.now
        if now > p.since:
            p.remaining = max(0.0, p.remaining - p.rate * (now - p.since) / US_PER_S)
        p.since = now

    def _retime(self, client: str) -> None:
        keys = self.by_client.get(client, {})
        rate = self.turbo.clock(client, len(keys))
        for key in keys:
            p = self.procs[key]
            self._advance(p)
            p.rate = rate
            if p.event is not None:
                self.engine.cancel(p.event)
            dt = int(round(p.remaining / rate * US_PER_S)) if rate > 0 else 0
            p.event = self.engine.after(dt, node_id(client), "compute_done",
                                        lambda ev, key=key: self._finish(key))

    def _finish(self, key: Any) -> None:
        p = self.procs.pop(key)
        p.remaining = 0.0
        p.event = None
        del self.by_client[p.client][key]
        self._retime(p.client)
        p.on_done()


# -- job execution ------------------------------------------------------------

@dataclass
class Progress:
    """Per-process (round, remaining work in that round) snapshot of a frozen job."""

    rounds: list[int]
    remaining: list[float]


class JobRun:
    """One execution of a job on a placement, driven by engine events."""

    def __init__(self, engine: Engine, pool: CpuPool, net: Optional[Network],
                 profile: WorkloadProfile, placement: Placement,
                 on_done: Callable[["JobRun"], None], label: Any = "job",
                 progress: Optional[Progress] = None) -> None:
        self.engine = engine
        self.pool = pool
        self.net = net
        self.profile = profile
        self.placement = placement
        self.on_done = on_done
        self.label = label
        self.n = len(placement)
        if self.n < 1:
            raise PlacementError("placement has no processes")
        self.comm = (not profile.embarrassingly_parallel) and self.n > 1
        self.total_rounds = profile.rounds if self.comm else 1
        share = profile.total_work / self.n
        self.round_work = share / self.total_rounds
        if progress is None:
            progress = Progress([0] * self.n, [self.round_work] * self.n)
        self._init = progress
        self.round = [0] * self.n
        self.phase = ["compute"] * self.n
        self.gathered: dict[int, set[int]] = {}
        self.done = 0
        self.active = False
        self.started_at: Optional[int] = None
        self.finished_at: Optional[int] = None

    def _key(self, i: int) -> tuple:
        return (self.label, i)

    def _client(self, i: int) -> str:
        return self.placement.slots[i][0]

    def start(self) -> None:
        self.active = True
        self.started_at = self.engine.now
        waiting = []
        for i in range(self.n):
            k, rem = self._init.rounds[i], self._init.remaining[i]
            self.round[i] = k
            if k >= self.total_rounds:
                self.phase[i] = "done"
                self.done += 1
            elif rem > 0:
                self._compute(i, rem)
            else:
                self.phase[i] = "wait"
                waiting.append(i)
        if self.done == self.n:
            self.engine.after(0, str(self.label), "job_noop", lambda ev: self._finish())
            return
        for i in waiting:
            self.engine.after(0, node_id(self._client(i)), "resume_wait",
                              lambda ev, i=i: self._computed(i) if self.active else None)

    def _compute(self, i: int, work: float) -> None:
        self.phase[i] = "compute"
        self.pool.start(self._key(i), self._client(i), work, lambda: self._computed(i))

    def _computed(self, i: int) -> None:
        if not self.active:
            return
        k = self.round[i]
        self.phase[i] = "wait"
        if not self.comm:
            self._process_done(i)
        elif i == 0:
            self._try_release(k)
        else:
            self._message(i, 0, "mpi_gather", lambda: self._gathered(k, i))

    def _message(self, src: int, dst: int, kind: str, then: Callable[[], None]) -> None:
        a, b = self._client(src), self._client(dst)
        guarded = lambda *_: then() if self.active else None
        if a == b or self.net is None:
            self.engine.after(0, node_id(b), kind, guarded)
        else:
            self.net.send(Message(node_id(a), node_id(b), self.profile.comm_message_bytes, kind),
                          guarded)

    def _gathered(self, k: int, i: int) -> None:
        self.gathered.setdefault(k, set()).add(i)
        self._try_release(k)

    def _try_release(self, k: int) -> None:
        if self.round[0] != k or self.phase[0] != "wait":
            return
        if len(self.gathered.get(k, ())) < self.n - 1:
            return
        for i in range(1, self.n):
            self._message(0, i, "mpi_release", lambda i=i: self._released(i, k))
        self._advance_round(0)

    def _released(self, i: int, k: int) -> None:
        if self.round[i] == k and self.phase[i] == "wait":
            self._advance_round(i)

    def _advance_round(self, i: int) -> None:
        self.round[i] += 1
        if self.round[i] >= self.total_rounds:
            self._process_done(i)
        else:
            self._compute(i, self.round_work)

    def _process_done(self, i: int) -> None:
        self.phase[i] = "done"
        self.done += 1
        if self.done == self.n:
            self._finish()

    def _finish(self) -> None:
        self.active = False
        self.finished_at = self.engine.now
        self.on_done(self)

    def halt(self) -> Progress:
        """Stop all processes now and return what is left to do."""
        if not self.active:
            return Progress(list(self.round), [0.0] * self.n)
        self.active = False
        master_round = self.round[0]
        rounds, remaining = [], []
        for i in range(self.n):
            k, ph = self.round[i], self.phase[i]
            if ph == "compute":
                rounds.append(k)
                remaining.append(self.pool.stop(self._key(i)))
            elif ph == "done":
                rounds.append(self.total_rounds)
                remaining.append(0.0)
            elif i != 0 and master_round > k:
                # release already on the wire
                rounds.append(k + 1)
                remaining.append(self.round_work if k + 1 < self.total_rounds else 0.0)
            else:
                rounds.append(k)
                remaining.append(0.0)
        return Progress(rounds, remaining)


def elapsed_time(profile: WorkloadProfile, placement: Placement | Sequence[str],
                 turbo: TurboModel, model: Optional[LatencyModel] = None,
                 rng: Optional[Rng] = None, ready: Optional[set[str]] = None) -> float:
    """Simulated wall time in seconds of one job alone on ``placement``."""
    if not isinstance(placement, Placement):
        placement = Placement.from_clients(placement)
    if ready is not None:
        bad = sorted({c for c in placement.clients if c not in ready})
        if bad:
            raise PlacementError(f"placement uses non-Ready nodes: {', '.join(bad)}")
    engine = Engine()
    pool = CpuPool(engine, turbo)
    net = Network(engine, model, rng, keep_log=False) if model is not None else None
    if net is None and not profile.embarrassingly_parallel and len(set(placement.clients)) > 1:
        raise ValueError("communicating profile across clients needs a latency model")
    run = JobRun(engine, pool, net, profile, placement, lambda r: None)
    engine.after(0, "job", "job_start", lambda ev: run.start())
    engine.run()
    if run.finished_at is None:
        raise RuntimeError("job did not finish")
    return run.finished_at / US_PER_S


# -- benchmark harness --------------------------------------------------------

@dataclass(frozen=True)
class SpeedupSample:
    n_cores: int
    trial: int
    placement: str
    elapsed_s: float


def core_slots(topo: Topology) -> list[tuple[str, int]]:
    return [(n.client_id, s) for n in topo.nodes for s in range(n.vcores)]


def random_scatter(slots: Sequence[tuple[str, int]], n: int, rng: Rng) -> Placement:
    if n > len(slots):
        raise PlacementError(f"{n} processes exceed {len(slots)} free cores")
    picked = rng.sample(slots, n)
    return Placement(tuple(picked))


def _trial(args) -> SpeedupSample:
    topo, profile, turbo, model, seed, n, trial, order = args
    rng = Rng(seed).fork(f"speedup/{n}/{trial}")
    placement = random_scatter(core_slots(topo), n, rng.fork("placement"))
    elapsed = elapsed_time(profile, placement, turbo, model, rng.fork("net"))
    return SpeedupSample(n, trial, placement.summary(order), elapsed)


def speedup_curve(topo: Topology, profile: WorkloadProfile, core_counts: Sequence[int],
                  trials: int, turbo: TurboModel, model: Optional[LatencyModel] = None,
                  seed: int = 0, workers: int = 1) -> list[SpeedupSample]:
    """Random-scatter runs for every (n, trial); merged in (n, trial) order.

    Each run draws from its own stream forked from ``seed`` by (n, trial), so
    results do not depend on ``workers``.
    """
    total = topo.total_vcores
    for n in core_counts:
        if n < 1 or n > total:
            raise PlacementError(f"core count {n} outside 1..{total}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    order = topo.client_ids
    jobs = [(topo, profile, turbo, model, seed, n, t, order)
            for n in core_counts for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(_trial, jobs, chunksize=max(1, len(jobs) // (workers * 4))))
    else:
        out = [_trial(j) for j in jobs]
    return sorted(out, key=lambda s: (s.n_cores, s.trial))


def comparison_run(server_cores: int, profile: WorkloadProfile, core_counts: Sequence[int],
                   base_clock: float = 1.0, boost: float = 0.0) -> list[SpeedupSample]:
    """Same job on one homogeneous ``server_cores`` machine with no network."""
    turbo = TurboModel.single(COMPARISON_ID, server_cores, base_clock, boost)
    out = []
    for n in core_counts:
        if n < 1 or n > server_cores:
            raise PlacementError(f"core count {n} outside 1..{server_cores}")
        t = elapsed_time(profile, [COMPARISON_ID] * n, turbo)
        out.append(SpeedupSample(n, 0, f"{COMPARISON_ID}:{n}", t))
    return out


def ideal_t1(topo: Topology, profile: WorkloadProfile, turbo: TurboModel) -> float:
    """Expected single-process time when the one process lands on a random core."""
    total = topo.total_vcores
    return sum(n.vcores / total * elapsed_time(profile, [n.client_id], turbo)
               for n in topo.nodes)
