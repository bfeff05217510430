"""Star-network data model: one server, host clients, one virtual node each.

Config files are JSON with top-level keys ``server``, ``clients`` and
``nodes``.  Optional keys ``queues``, ``authorized_users``, ``boot`` and
``turbo`` carry scheduler, lifecycle and workload settings; unknown top-level
keys are rejected so that typos surface early.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional, Union

SERVICES = ("address_assignment", "kernel_transfer", "root_filesystem", "queue_manager")
NODE_SUFFIX = ".vm"
DEFAULT_BANDWIDTH = 125_000_000.0  # 1 Gbit/s
SECONDS_PER_DAY = 86_400

_TOP_KEYS = {"server", "clients", "nodes", "queues", "authorized_users", "boot", "turbo"}
_OPTIONAL_SECTIONS = ("boot", "turbo")


class ConfigError(Exception):
    """Config could not be parsed; ``problems`` holds located messages."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TopologyError(Exception):
    """Config parsed but violates topology invariants."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def node_id(client_id: str) -> str:
    return client_id + NODE_SUFFIX


def is_node_id(entity: str) -> bool:
    return entity.endswith(NODE_SUFFIX)


def client_of(entity: str) -> str:
    return entity[: -len(NODE_SUFFIX)] if is_node_id(entity) else entity


@dataclass(frozen=True)
class Window:
    """Daily recurring availability interval, seconds since midnight.

    ``start > end`` wraps past midnight (e.g. 18:00-08:00).
    """

    start: int
    end: int

    def contains(self, second_of_day: int) -> bool:
        s = second_of_day % SECONDS_PER_DAY
        if self.start < self.end:
            return self.start <= s < self.end
        return s >= self.start or s < self.end


@dataclass(frozen=True)
class ClientSpec:
    id: str
    cores: int
    client_rtt_mean_us: float
    client_rtt_jitter_us: float = 0.0
    overhead_rtt_us: float = 0.0
    bandwidth_bytes_per_s: float = DEFAULT_BANDWIDTH
    has_key: bool = True
    schedule: Optional[tuple[Window, ...]] = None
    os_label: str = ""
    # spread of the VM round trip; falls back to the host jitter when unset
    node_rtt_jitter_us: Optional[float] = None

    @property
    def node_rtt_mean_us(self) -> float:
        return self.client_rtt_mean_us + self.overhead_rtt_us

    @property
    def node_jitter_us(self) -> float:
        if self.node_rtt_jitter_us is None:
            return self.client_rtt_jitter_us
        return self.node_rtt_jitter_us

    def available_at(self, second_of_day: int) -> bool:
        if not self.schedule:
            return True
        return any(w.contains(second_of_day) for w in self.schedule)


@dataclass(frozen=True)
class NodeSpec:
    client_id: str
    vcores: int
    kernel_size_bytes: int = 4 * 1024 * 1024
    initramfs_size_bytes: int = 16 * 1024 * 1024


@dataclass(frozen=True)
class ServerSpec:
    id: str = "server"
    services: dict[str, bool] = field(default_factory=lambda: {s: True for s in SERVICES})
    comparison_cores: Optional[int] = None


@dataclass(frozen=True)
class Queue:
    name: str
    members: tuple[str, ...]


@dataclass(frozen=True)
class Topology:
    server: ServerSpec
    clients: tuple[ClientSpec, ...]
    nodes: tuple[NodeSpec, ...]
    queues: tuple[Queue, ...] = ()
    authorized_users: tuple[str, ...] = ()
    boot: dict[str, Any] = field(default_factory=dict)
    turbo: dict[str, Any] = field(default_factory=dict)

    def client(self, client_id: str) -> ClientSpec:
        for c in self.clients:
            if c.id == client_id:
                return c
        raise KeyError(client_id)

    def node(self, client_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.client_id == client_id:
                return n
        raise KeyError(client_id)

    @property
    def client_ids(self) -> list[str]:
        return [c.id for c in self.clients]

    @property
    def total_vcores(self) -> int:
        return sum(n.vcores for n in self.nodes)

    def effective_queues(self) -> tuple[Queue, ...]:
        """Configured queues, or a single ``gridlan`` queue spanning all nodes."""
        if self.queues:
            return self.queues
        return (Queue("gridlan", tuple(n.client_id for n in self.nodes)),)


# -- parsing -----------------------------------------------------------------

def _hhmm(value: Any, where: str, problems: list[str]) -> Optional[int]:
    if isinstance(value, bool):
        problems.append(f"{where}: expected 'HH:MM' or seconds, got bool")
        return None
    if isinstance(value, (int, float)):
        return int(value)
    if isinstance(value, str):
        parts = value.split(":")
        try:
            nums = [int(p) for p in parts]
        except ValueError:
            nums = []
        if len(nums) in (2, 3):
            h, m = nums[0], nums[1]
            s = nums[2] if len(nums) == 3 else 0
            return h * 3600 + m * 60 + s
    problems.append(f"{where}: expected 'HH:MM' or seconds, got {value!r}")
    return None


def _fmt_hhmm(seconds: int) -> str:
    h, rem = divmod(seconds, 3600)
    m, s = divmod(rem, 60)
    return f"{h:02d}:{m:02d}" if s == 0 else f"{h:02d}:{m:02d}:{s:02d}"


_KINDS = {
    "str": (lambda v: isinstance(v, str), "string"),
    "int": (lambda v: isinstance(v, int) and not isinstance(v, bool), "integer"),
    "num": (lambda v: isinstance(v, (int, float)) and not isinstance(v, bool), "number"),
    "bool": (lambda v: isinstance(v, bool), "boolean"),
    "list": (lambda v: isinstance(v, list), "list"),
    "dict": (lambda v: isinstance(v, dict), "object"),
}


class _Fields:
    """Typed field reader that accumulates located problems."""

    def __init__(self, obj: Any, where: str, problems: list[str]):
        self.where = where
        self.problems = problems
        if not isinstance(obj, dict):
            problems.append(f"{where}: expected object, got {type(obj).__name__}")
            obj = {}
        self.obj = obj

    def get(self, key: str, kind: str, default: Any = ..., allowed: Optional[set] = None) -> Any:
        loc = f"{self.where}.{key}"
        v = self.obj.get(key)
        if v is None:
            if default is ...:
                self.problems.append(f"{loc}: required field missing")
                return None
            return default
        check, name = _KINDS[kind]
        if not check(v):
            self.problems.append(f"{loc}: expected {name}, got {type(v).__name__}")
            return None if default is ... else default
        return float(v) if kind == "num" else v

    def unknown(self, known: set[str]) -> None:
        for k in self.obj:
            if k not in known:
                self.problems.append(f"{self.where}.{k}: unknown field")


def topology_from_dict(data: Any) -> Topology:
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError([f"<root>: expected object, got {type(data).__name__}"])
    for k in data:
        if k not in _TOP_KEYS:
            problems.append(f"{k}: unknown top-level key")
    for k in ("server", "clients", "nodes"):
        if k not in data:
            problems.append(f"{k}: required top-level key missing")

    sf = _Fields(data.get("server", {}), "server", problems)
    svc_raw = sf.get("services", "dict", {})
    services = {}
    for name in SERVICES:
        v = svc_raw.get(name, False)
        if not isinstance(v, bool):
            problems.append(f"server.services.{name}: expected boolean, got {type(v).__name__}")
            v = False
        services[name] = v
    for name in svc_raw:
        if name not in SERVICES:
            problems.append(f"server.services.{name}: unknown service")
    server = ServerSpec(
        id=sf.get("id", "str", "server"),
        services=services,
        comparison_cores=sf.get("comparison_cores", "int", None),
    )
    sf.unknown({"id", "services", "comparison_cores"})

    clients = []
    raw_clients = data.get("clients", [])
    if not isinstance(raw_clients, list):
        problems.append("clients: expected list")
        raw_clients = []
    for i, raw in enumerate(raw_clients):
        f = _Fields(raw, f"clients[{i}]", problems)
        schedule = None
        raw_sched = f.get("schedule", "list", None)
        if raw_sched is not None:
            wins = []
            for j, w in enumerate(raw_sched):
                loc = f"clients[{i}].schedule[{j}]"
                if not isinstance(w, (list, dict)) or len(w) != 2:
                    problems.append(f"{loc}: expected [start, end]")
                    continue
                a, b = (w["start"], w["end"]) if isinstance(w, dict) else w
                s, e = _hhmm(a, loc + ".start", problems), _hhmm(b, loc + ".end", problems)
                if s is not None and e is not None:
                    wins.append(Window(s, e))
            schedule = tuple(wins)
        clients.append(ClientSpec(
            id=f.get("id", "str"),
            cores=f.get("cores", "int"),
            client_rtt_mean_us=f.get("client_rtt_mean_us", "num"),
            client_rtt_jitter_us=f.get("client_rtt_jitter_us", "num", 0.0),
            overhead_rtt_us=f.get("overhead_rtt_us", "num", 0.0),
            bandwidth_bytes_per_s=f.get("bandwidth_bytes_per_s", "num", DEFAULT_BANDWIDTH),
            has_key=f.get("has_key", "bool", True),
            schedule=schedule,
            os_label=f.get("os_label", "str", ""),
            node_rtt_jitter_us=f.get("node_rtt_jitter_us", "num", None),
        ))
        f.unknown({"id", "cores", "client_rtt_mean_us", "client_rtt_jitter_us", "overhead_rtt_us",
                   "bandwidth_bytes_per_s", "has_key", "schedule", "os_label",
                   "node_rtt_jitter_us"})

    nodes = []
    raw_nodes = data.get("nodes", [])
    if not isinstance(raw_nodes, list):
        problems.append("nodes: expected list")
        raw_nodes = []
    for i, raw in enumerate(raw_nodes):
        f = _Fields(raw, f"nodes[{i}]", problems)
        nodes.append(NodeSpec(
            client_id=f.get("client_id", "str"),
            vcores=f.get("vcores", "int"),
            kernel_size_bytes=f.get("kernel_size_bytes", "int", NodeSpec.kernel_size_bytes),
            initramfs_size_bytes=f.get("initramfs_size_bytes", "int",
                                       NodeSpec.initramfs_size_bytes),
        ))
        f.unknown({"client_id", "vcores", "kernel_size_bytes", "initramfs_size_bytes"})

    queues = []
    raw_queues = data.get("queues", [])
    if not isinstance(raw_queues, list):
        problems.append("queues: expected list")
        raw_queues = []
    for i, raw in enumerate(raw_queues):
        f = _Fields(raw, f"queues[{i}]", problems)
        members = f.get("members", "list", [])
        if not all(isinstance(m, str) for m in members):
            problems.append(f"queues[{i}].members: expected list of strings")
            members = [m for m in members if isinstance(m, str)]
        queues.append(Queue(f.get("name", "str"), tuple(members)))
        f.unknown({"name", "members"})

    users = data.get("authorized_users", [])
    if not isinstance(users, list) or not all(isinstance(u, str) for u in users):
        problems.append("authorized_users: expected list of strings")
        users = []

    sections = {}
    for key in _OPTIONAL_SECTIONS:
        v = data.get(key, {})
        if not isinstance(v, dict):
            problems.append(f"{key}: expected object")
            v = {}
        sections[key] = copy.deepcopy(v)

    if problems:
        raise ConfigError(problems)
    return Topology(server, tuple(clients), tuple(nodes), tuple(queues), tuple(users),
                    sections["boot"], sections["turbo"])


def topology_to_dict(t: Topology) -> dict[str, Any]:
    clients = []
    for c in t.clients:
        d: dict[str, Any] = {
            "id": c.id,
            "cores": c.cores,
            "client_rtt_mean_us": c.client_rtt_mean_us,
            "client_rtt_jitter_us": c.client_rtt_jitter_us,
            "overhead_rtt_us": c.overhead_rtt_us,
            "bandwidth_bytes_per_s": c.bandwidth_bytes_per_s,
            "has_key": c.has_key,
            "os_label": c.os_label,
        }
        if c.node_rtt_jitter_us is not None:
            d["node_rtt_jitter_us"] = c.node_rtt_jitter_us
        if c.schedule is not None:
            d["schedule"] = [[_fmt_hhmm(w.start), _fmt_hhmm(w.end)] for w in c.schedule]
        clients.append(d)
    out: dict[str, Any] = {
        "server": {"id": t.server.id, "services": dict(t.server.services)},
        "clients": clients,
        "nodes": [
            {"client_id": n.client_id, "vcores": n.vcores,
             "kernel_size_bytes": n.kernel_size_bytes,
             "initramfs_size_bytes": n.initramfs_size_bytes}
            for n in t.nodes
        ],
    }
    if t.server.comparison_cores is not None:
        out["server"]["comparison_cores"] = t.server.comparison_cores
    if t.queues:
        out["queues"] = [{"name": q.name, "members": list(q.members)} for q in t.queues]
    if t.authorized_users:
        out["authorized_users"] = list(t.authorized_users)
    for key in _OPTIONAL_SECTIONS:
        v = getattr(t, key)
        if v:
            out[key] = copy.deepcopy(v)
    return out


def dumps_topology(t: Topology) -> str:
    return json.dumps(topology_to_dict(t), indent=2) + "\n"


def resolve_config_path(path: Union[str, Path]) -> Path:
    """Map a bundled config name (``paper``) to its file; pass real paths through."""
    p = Path(path)
    if p.exists():
        return p
    if p.suffix == "" and p.parent == Path("."):
        bundled = resources.files("gridlan") / "configs" / f"{p.name}.json"
        if bundled.is_file():
            return Path(str(bundled))
    return p


def config_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(resolve_config_path(path).read_bytes()).hexdigest()


def parse_json_text(text: str, source: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from None


def load_topology(path: Union[str, Path]) -> Topology:
    p = resolve_config_path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror or exc}"]) from None
    data = parse_json_text(text, str(path))
    try:
        t = topology_from_dict(data)
    except ConfigError as exc:
        raise ConfigError([f"{path}: {m}" for m in exc.problems]) from None
    violations = validate(t)
    if violations:
        raise TopologyError(violations)
    return t


def _finite_pos(v: Any) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v) and v > 0


def _finite_nonneg(v: Any) -> bool:
    return isinstance(v, (int, float)) and math.isfinite(v) and v >= 0


def validate(t: Topology) -> list[str]:
    """Return every violated invariant as ``"<field>: <rule>"``; empty if valid."""
    out: list[str] = []
    if not t.server.id:
        out.append("server.id: must be non-empty")
    for name in SERVICES:
        if not t.server.services.get(name, False):
            out.append(f"server.services.{name}: required service is disabled")
    cc = t.server.comparison_cores
    if cc is not None and cc < 1:
        out.append("server.comparison_cores: must be a positive integer")

    seen: set[str] = set()
    for i, c in enumerate(t.clients):
        loc = f"clients[{i}]"
        if not c.id:
            out.append(f"{loc}.id: must be non-empty")
        elif c.id in seen:
            out.append(f"{loc}.id: duplicate client id {c.id!r}")
        elif c.id == t.server.id:
            out.append(f"{loc}.id: {c.id!r} collides with the server id")
        elif is_node_id(c.id):
            out.append(f"{loc}.id: must not end with {NODE_SUFFIX!r}")
        seen.add(c.id)
        if not isinstance(c.cores, int) or c.cores < 1:
            out.append(f"{loc}.cores: must be >= 1")
        if not _finite_pos(c.client_rtt_mean_us):
            out.append(f"{loc}.client_rtt_mean_us: must be finite and positive")
        if not _finite_nonneg(c.client_rtt_jitter_us):
            out.append(f"{loc}.client_rtt_jitter_us: must be finite and non-negative")
        if not _finite_nonneg(c.overhead_rtt_us):
            out.append(f"{loc}.overhead_rtt_us: must be finite and non-negative")
        if c.node_rtt_jitter_us is not None and not _finite_nonneg(c.node_rtt_jitter_us):
            out.append(f"{loc}.node_rtt_jitter_us: must be finite and non-negative")
        if not _finite_pos(c.bandwidth_bytes_per_s):
            out.append(f"{loc}.bandwidth_bytes_per_s: must be finite and positive")
        for j, w in enumerate(c.schedule or ()):
            if not (0 <= w.start < SECONDS_PER_DAY and 0 <= w.end <= SECONDS_PER_DAY):
                out.append(f"{loc}.schedule[{j}]: times must lie within one day")
            elif w.start == w.end:
                out.append(f"{loc}.schedule[{j}]: empty window")

    hosted: dict[str, int] = {}
    for i, n in enumerate(t.nodes):
        loc = f"nodes[{i}]"
        if n.client_id not in seen:
            out.append(f"{loc}.client_id: unknown client {n.client_id!r}")
        else:
            hosted[n.client_id] = hosted.get(n.client_id, 0) + 1
            if hosted[n.client_id] == 2:
                out.append(f"{loc}.client_id: client {n.client_id!r} hosts more than one node")
            cores = next(c.cores for c in t.clients if c.id == n.client_id)
            if isinstance(n.vcores, int) and isinstance(cores, int) and n.vcores > cores:
                out.append(f"{loc}.vcores: {n.vcores} exceeds host cores {cores}")
        if not isinstance(n.vcores, int) or n.vcores < 1:
            out.append(f"{loc}.vcores: must be >= 1")
        if not isinstance(n.kernel_size_bytes, int) or n.kernel_size_bytes < 1:
            out.append(f"{loc}.kernel_size_bytes: must be a positive integer")
        if not isinstance(n.initramfs_size_bytes, int) or n.initramfs_size_bytes < 1:
            out.append(f"{loc}.initramfs_size_bytes: must be a positive integer")
    for c in t.clients:
        if c.id and c.id not in hosted:
            out.append(f"nodes: client {c.id!r} has no node")

    qnames: set[str] = set()
    for i, q in enumerate(t.queues):
        loc = f"queues[{i}]"
        if not q.name:
            out.append(f"{loc}.name: must be non-empty")
        elif q.name in qnames:
            out.append(f"{loc}.name: duplicate queue {q.name!r}")
        qnames.add(q.name)
        for m in q.members:
            if m not in hosted:
                out.append(f"{loc}.members: {m!r} is not a node of the topology")
    return out
