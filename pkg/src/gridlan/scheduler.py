"""Queue semantics of the grid resource manager.

Jobs go to a named queue and start when enough free cores exist on Ready,
in-schedule member nodes.  Losing any node under a job interrupts the whole
job; its script stays in the script folder (it is deleted only by the job's
last command) so ``requeue_unfinished`` can resubmit it from scratch.
Leaving an availability window suspends a job in place (``Frozen``) with its
remaining work kept; it resumes on the same nodes once they are usable.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

from .lifecycle import HealthRecord
from .netmodel import Network
from .simcore import US_PER_S, Engine, Rng
from .topology import SECONDS_PER_DAY, Topology, client_of
from .workload import CpuPool, JobRun, Placement, Progress, WorkloadProfile

POLICIES = ("first-fit", "random-scatter")


class SubmissionError(ValueError):
    pass


class JobStatus(str, enum.Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    FROZEN = "Frozen"
    INTERRUPTED = "Interrupted"
    COMPLETED = "Completed"

    def __str__(self) -> str:
        return self.value


# allowed predecessor states
_TRANSITIONS = {
    JobStatus.RUNNING: {JobStatus.QUEUED, JobStatus.FROZEN},
    JobStatus.FROZEN: {JobStatus.RUNNING},
    JobStatus.INTERRUPTED: {JobStatus.RUNNING, JobStatus.FROZEN},
    JobStatus.QUEUED: {JobStatus.INTERRUPTED},
    JobStatus.COMPLETED: {JobStatus.RUNNING},
}


@dataclass
class JobScript:
    job_id: str
    queue_name: str
    procs: int
    workload: WorkloadProfile
    user: str = ""
    submit_at_s: float = 0.0
    script_present: bool = False


@dataclass
class JobRecord:
    script: JobScript
    seq: int
    status: JobStatus = JobStatus.QUEUED
    placement: Optional[Placement] = None
    run: Optional[JobRun] = None
    progress: Optional[Progress] = None
    started_at: Optional[int] = None
    elapsed_us: Optional[int] = None
    history: list[tuple[int, JobStatus]] = field(default_factory=list)


@dataclass(frozen=True)
class JournalEntry:
    job_id: str
    event: str
    time_us: int
    detail: str = ""

    def csv_row(self) -> list[str]:
        return [self.job_id, self.event, f"{self.time_us / US_PER_S:.6f}", self.detail]


class Scheduler:
    def __init__(self, engine: Engine, topology: Topology, pool: CpuPool,
                 net: Optional[Network] = None, rng: Optional[Rng] = None,
                 policy: str = "first-fit", day_offset_s: int = 0) -> None:
        if policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        self.engine = engine
        self.topology = topology
        self.pool = pool
        self.net = net
        self.rng = rng or Rng(0)
        self.policy = policy
        self.day_offset_s = day_offset_s
        authorized = {c.id for c in topology.clients if c.has_key}
        self.queues = {q.name: tuple(m for m in q.members if m in authorized)
                       for q in topology.effective_queues()}
        self.users = set(topology.authorized_users)
        self.vcores = {n.client_id: n.vcores for n in topology.nodes}
        self.order = [n.client_id for n in topology.nodes]
        self.ready: set[str] = set()
        self.ready_since: dict[str, int] = {}
        self.used = {c: 0 for c in self.vcores}
        self.jobs: dict[str, JobRecord] = {}
        self._seq = 0
        self._available = {c: self.in_schedule(c, 0) for c in self.vcores}
        self._pass_pending = False
        self.journal: list[JournalEntry] = []
        self.on_journal: list[Callable[[JournalEntry], None]] = []
        self.on_capacity: list[Callable[[str, int], None]] = []
        self.run_log: list[tuple[int, str, Placement]] = []

    # -- helpers -----------------------------------------------------------

    def second_of_day(self, t_us: int) -> int:
        return int(self.day_offset_s + t_us // US_PER_S) % SECONDS_PER_DAY

    def in_schedule(self, client_id: str, t_us: Optional[int] = None) -> bool:
        t = self.engine.now if t_us is None else t_us
        return self.topology.client(client_id).available_at(self.second_of_day(t))

    def usable(self, client_id: str) -> bool:
        return client_id in self.ready and self._available.get(client_id, True)

    def free_cores(self, client_id: str) -> int:
        return self.vcores[client_id] - self.used[client_id] if self.usable(client_id) else 0

    def script_folder(self) -> set[str]:
        return {j for j, r in self.jobs.items() if r.script.script_present}

    def _log(self, job_id: str, event: str, detail: str = "") -> None:
        entry = JournalEntry(job_id, event, self.engine.now, detail)
        self.journal.append(entry)
        for cb in self.on_journal:
            cb(entry)

    def _set(self, rec: JobRecord, status: JobStatus, detail: str = "") -> None:
        allowed = _TRANSITIONS[status]
        if rec.status not in allowed and not (status is JobStatus.QUEUED and not rec.history):
            raise RuntimeError(f"illegal job transition {rec.status} -> {status}")
        rec.status = status
        rec.history.append((self.engine.now, status))
        self._log(rec.script.job_id, status.value, detail)

    def _occupy(self, placement: Placement, sign: int) -> None:
        for c, k in placement.counts().items():
            self.used[c] += sign * k
            for cb in self.on_capacity:
                cb(c, self.used[c])

    # -- submission --------------------------------------------------------

    def submit(self, job: JobScript) -> str:
        if job.queue_name not in self.queues:
            raise SubmissionError(f"unknown queue {job.queue_name!r}")
        if self.users and job.user not in self.users:
            raise SubmissionError(f"user {job.user!r} is not authorized to submit")
        if not isinstance(job.procs, int) or job.procs <= 0:
            raise SubmissionError("procs must be a positive integer")
        if job.job_id in self.jobs:
            raise SubmissionError(f"duplicate job id {job.job_id!r}")
        job.script_present = True
        rec = JobRecord(job, self._seq)
        self._seq += 1
        self.jobs[job.job_id] = rec
        rec.history.append((self.engine.now, JobStatus.QUEUED))
        self._log(job.job_id, JobStatus.QUEUED.value,
                  f"queue={job.queue_name} procs={job.procs} user={job.user}")
        self.request_pass()
        return job.job_id

    # -- placement ---------------------------------------------------------

    def request_pass(self) -> None:
        """Coalesce triggers into one pass at the current instant."""
        if self._pass_pending:
            return
        self._pass_pending = True

        def run(ev) -> None:
            self._pass_pending = False
            self.schedule_pass()

        self.engine.after(0, self.topology.server.id, "schedule_pass", run)

    def _place(self, rec: JobRecord) -> Optional[Placement]:
        members = self.queues[rec.script.queue_name]
        n = rec.script.procs
        if sum(self.free_cores(c) for c in members) < n:
            return None
        if self.policy == "random-scatter":
            slots = [(c, s) for c in self.order if c in members
                     for s in range(self.free_cores(c))]
            picked = self.rng.sample(slots, n)
            return Placement.from_clients([c for c, _ in picked])
        clients: list[str] = []
        for c in self.order:
            if c in members:
                take = min(self.free_cores(c), n - len(clients))
                clients.extend([c] * take)
        return Placement.from_clients(clients)

    def _resumable(self, rec: JobRecord) -> bool:
        return all(self.free_cores(c) >= k for c, k in rec.placement.counts().items())

    def schedule_pass(self) -> list[str]:
        """Start or resume every waiting job that fits, in submit order."""
        started = []
        for rec in sorted(self.jobs.values(), key=lambda r: r.seq):
            if rec.status is JobStatus.QUEUED:
                placement = self._place(rec)
                if placement is None:
                    continue
                rec.placement = placement
                rec.progress = None
                rec.started_at = self.engine.now
                self._launch(rec, placement.summary(self.order))
                started.append(rec.script.job_id)
            elif rec.status is JobStatus.FROZEN and self._resumable(rec):
                self._launch(rec, "resumed " + rec.placement.summary(self.order))
                started.append(rec.script.job_id)
        return started

    def _launch(self, rec: JobRecord, detail: str) -> None:
        self._occupy(rec.placement, +1)
        self._set(rec, JobStatus.RUNNING, detail)
        self.run_log.append((self.engine.now, rec.script.job_id, rec.placement))
        rec.run = JobRun(self.engine, self.pool, self.net, rec.script.workload, rec.placement,
                         lambda run, rec=rec: self._completed(rec, run),
                         label=rec.script.job_id, progress=rec.progress)
        rec.run.start()

    def _completed(self, rec: JobRecord, run: JobRun) -> None:
        if rec.run is not run or rec.status is not JobStatus.RUNNING:
            return
        self._occupy(rec.placement, -1)
        rec.run = None
        rec.elapsed_us = self.engine.now - rec.started_at
        # the script's last command removes it
        rec.script.script_present = False
        self._set(rec, JobStatus.COMPLETED, f"elapsed_s={rec.elapsed_us / US_PER_S:.6f}")
        self.request_pass()

    # -- faults ------------------------------------------------------------

    def on_node_ready(self, client_id: str) -> None:
        if client_id not in self.vcores:
            return
        self.ready.add(client_id)
        self.ready_since[client_id] = self.engine.now
        self.request_pass()

    def on_node_down(self, client_id: str, reason: str = "") -> list[str]:
        """Interrupt every job with processes (running or suspended) on the node."""
        self.ready.discard(client_id)
        hit = []
        for rec in sorted(self.jobs.values(), key=lambda r: r.seq):
            if rec.status not in (JobStatus.RUNNING, JobStatus.FROZEN):
                continue
            if client_id not in rec.placement.counts():
                continue
            if rec.status is JobStatus.RUNNING:
                rec.run.halt()
                self._occupy(rec.placement, -1)
            rec.run = None
            rec.progress = None
            self._set(rec, JobStatus.INTERRUPTED, f"node={client_id} {reason}".strip())
            hit.append(rec.script.job_id)
        if hit:
            self.request_pass()
        return hit

    def on_health(self, record: HealthRecord) -> None:
        cid = client_of(record.node_id)
        if cid not in self.vcores:
            return
        if record.status == "off":
            if record.last_sweep >= self.ready_since.get(cid, -1):
                self.ready.discard(cid)

    def requeue_unfinished(self) -> int:
        n = 0
        for rec in sorted(self.jobs.values(), key=lambda r: r.seq):
            if rec.status is JobStatus.INTERRUPTED and rec.script.script_present:
                rec.placement = None
                self._set(rec, JobStatus.QUEUED, "requeued from script folder")
                n += 1
        if n:
            self.request_pass()
        return n

    # -- availability schedules -------------------------------------------

    def apply_schedule(self, t_us: Optional[int] = None) -> list[tuple[str, str]]:
        """Freeze jobs on clients that left their window; resume on re-entry."""
        t = self.engine.now if t_us is None else t_us
        actions = []
        for c in self.order:
            avail = self.in_schedule(c, t)
            if avail == self._available[c]:
                continue
            self._available[c] = avail
            if not avail:
                for rec in sorted(self.jobs.values(), key=lambda r: r.seq):
                    if rec.status is JobStatus.RUNNING and c in rec.placement.counts():
                        rec.progress = rec.run.halt()
                        rec.run = None
                        self._occupy(rec.placement, -1)
                        self._set(rec, JobStatus.FROZEN, f"client {c} left its window")
                        actions.append((rec.script.job_id, "freeze"))
            else:
                actions.append((c, "available"))
        self.request_pass()
        return actions

    def _next_boundary(self, client_id: str) -> Optional[int]:
        sched = self.topology.client(client_id).schedule
        if not sched:
            return None
        now_s = self.day_offset_s + self.engine.now // US_PER_S
        day_start = now_s - now_s % SECONDS_PER_DAY
        best = None
        for w in sched:
            for edge in (w.start, w.end % SECONDS_PER_DAY):
                cand = day_start + edge
                while cand <= now_s:
                    cand += SECONDS_PER_DAY
                best = cand if best is None else min(best, cand)
        return (best - self.day_offset_s) * US_PER_S

    def watch_schedules(self) -> None:
        """Schedule ``apply_schedule`` at every window edge of every client."""
        for c in self.order:
            self._arm_boundary(c)

    def _arm_boundary(self, c: str) -> None:
        t = self._next_boundary(c)
        if t is None:
            return

        def fire(ev) -> None:
            self.apply_schedule()
            self._arm_boundary(c)

        self.engine.schedule(t, c, "window_edge", fire)
