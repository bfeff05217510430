"""Latency/bandwidth model of the VPN star and message delivery on the engine.

Every path between two non-server endpoints is two legs, ``src -> server``
and ``server -> dst``; a leg costs one sampled one-way latency plus
``size / bandwidth`` and is rounded to whole microseconds.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .simcore import US_PER_S, Engine, Rng
from .topology import DEFAULT_BANDWIDTH, Topology, node_id

PING_PAYLOAD = 56


class UnknownEndpoint(KeyError):
    pass


@dataclass(frozen=True)
class _Link:
    rtt_mean_us: float
    jitter_us: float
    bandwidth: float


class LatencyModel:
    """Per-endpoint RTT distributions; nodes add the VPN+VM overhead."""

    def __init__(self, links: dict[str, _Link], server_id: str = "server",
                 server_bandwidth: float = DEFAULT_BANDWIDTH,
                 mpi_overhead_us: float = 0.0) -> None:
        self.links = dict(links)
        self.server_id = server_id
        self.server_bandwidth = server_bandwidth
        self.mpi_overhead_us = mpi_overhead_us

    @classmethod
    def from_topology(cls, topo: Topology, jitter: bool = True,
                      mpi_overhead_us: float = 0.0,
                      bandwidth: Optional[float] = None) -> "LatencyModel":
        links = {}
        for c in topo.clients:
            bw = bandwidth if bandwidth is not None else c.bandwidth_bytes_per_s
            links[c.id] = _Link(c.client_rtt_mean_us, c.client_rtt_jitter_us if jitter else 0.0, bw)
            links[node_id(c.id)] = _Link(c.node_rtt_mean_us, c.node_jitter_us if jitter else 0.0, bw)
        return cls(links, topo.server.id, mpi_overhead_us=mpi_overhead_us)

    def endpoints(self) -> list[str]:
        return [self.server_id, *self.links]

    def _link(self, endpoint: str) -> _Link:
        try:
            return self.links[endpoint]
        except KeyError:
            raise UnknownEndpoint(endpoint) from None

    def rtt_mean(self, endpoint: str) -> float:
        if endpoint == self.server_id:
            return 0.0
        return self._link(endpoint).rtt_mean_us

    def rtt_jitter(self, endpoint: str) -> float:
        if endpoint == self.server_id:
            return 0.0
        return self._link(endpoint).jitter_us

    def bandwidth(self, endpoint: str) -> float:
        if endpoint == self.server_id:
            return self.server_bandwidth
        return self._link(endpoint).bandwidth

    def legs(self, src: str, dst: str) -> list[str]:
        """Non-server endpoints whose server link the path crosses, in order."""
        if src == dst:
            return []
        return [e for e in (src, dst) if e != self.server_id]


def one_way_latency(model: LatencyModel, endpoint: str, rng: Optional[Rng]) -> float:
    """One server<->endpoint latency sample in us: ``max(1, N(rtt, jitter) / 2)``."""
    if endpoint == model.server_id:
        return 0.0
    mean = model.rtt_mean(endpoint)
    sigma = model.rtt_jitter(endpoint)
    rtt = rng.normal(mean, sigma) if (sigma > 0 and rng is not None) else mean
    return max(1.0, rtt / 2.0)


def leg_us(model: LatencyModel, endpoint: str, size_bytes: int, rng: Optional[Rng]) -> int:
    serial = size_bytes / model.bandwidth(endpoint) * US_PER_S
    return int(round(one_way_latency(model, endpoint, rng) + serial))


def path_us(model: LatencyModel, src: str, dst: str, size_bytes: int,
            rng: Optional[Rng]) -> list[int]:
    legs = model.legs(src, dst)
    if not legs:
        if src == model.server_id and dst == model.server_id:
            return [int(round(size_bytes / model.server_bandwidth * US_PER_S))]
        return []
    return [leg_us(model, e, size_bytes, rng) for e in legs]


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    size_bytes: int
    kind: str
    data: Any = None


@dataclass
class NetLogEntry:
    time_us: int
    what: str  # send | deliver | drop
    src: str
    dst: str
    kind: str


AlwaysUp: Callable[[str], bool] = lambda _entity: True


class Network:
    """Schedules message deliveries on an :class:`Engine` along the star.

    ``is_up`` decides whether an endpoint can currently send or receive; a
    message whose destination is down at arrival is dropped and, when the
    sender asked for it, an unreachable notice travels back along the reverse
    path (the VPN hub has no route to a dead tunnel).
    """

    def __init__(self, engine: Engine, model: LatencyModel, rng: Optional[Rng] = None,
                 is_up: Callable[[str], bool] = AlwaysUp, keep_log: bool = True) -> None:
        self.engine = engine
        self.model = model
        self.rng = rng
        self.is_up = is_up
        self.log: Optional[list[NetLogEntry]] = [] if keep_log else None
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    def _note(self, what: str, msg: Message) -> None:
        if self.log is not None:
            self.log.append(NetLogEntry(self.engine.now, what, msg.src, msg.dst, msg.kind))

    def send(self, msg: Message,
             on_deliver: Optional[Callable[[Message], None]] = None,
             on_drop: Optional[Callable[[Message], None]] = None) -> bool:
        """Launch ``msg``; returns False if the sender itself is down."""
        if msg.size_bytes < 0:
            raise ValueError("message size must be non-negative")
        for e in (msg.src, msg.dst):
            if e != self.model.server_id:
                self.model._link(e)
        if not self.is_up(msg.src):
            self._note("drop", msg)
            self.dropped += 1
            return False
        self.sent += 1
        self._note("send", msg)
        legs = path_us(self.model, msg.src, msg.dst, msg.size_bytes, self.rng)
        self._hop(msg, legs, 0, on_deliver, on_drop)
        return True

    def _hop(self, msg, legs, i, on_deliver, on_drop) -> None:
        if i == len(legs) - 1 or not legs:
            delay = legs[i] if legs else 0
            self.engine.after(delay, msg.dst, msg,
                              lambda ev: self._arrive(msg, on_deliver, on_drop))
        else:
            self.engine.after(legs[i], self.model.server_id, _Relay(msg),
                              lambda ev: self._hop(msg, legs, i + 1, on_deliver, on_drop))

    def _arrive(self, msg, on_deliver, on_drop) -> None:
        if not self.is_up(msg.dst):
            self.dropped += 1
            self._note("drop", msg)
            self.engine.after(0, msg.dst, _Drop(msg),
                              lambda ev: self._unreachable(msg, on_drop))
            return
        self.delivered += 1
        self._note("deliver", msg)
        if on_deliver is not None:
            on_deliver(msg)

    def _unreachable(self, msg: Message, on_drop) -> None:
        if on_drop is None:
            return
        back = sum(path_us(self.model, msg.dst, msg.src, 0, self.rng))
        self.engine.after(back, msg.src, _Unreachable(msg),
                          lambda ev: on_drop(msg) if self.is_up(msg.src) else None)


@dataclass(frozen=True)
class _Relay:
    msg: Message

    @property
    def kind(self) -> str:
        return "relay:" + self.msg.kind


@dataclass(frozen=True)
class _Drop:
    msg: Message

    @property
    def kind(self) -> str:
        return "drop:" + self.msg.kind


@dataclass(frozen=True)
class _Unreachable:
    msg: Message

    @property
    def kind(self) -> str:
        return "unreachable:" + self.msg.kind


@dataclass
class ProbeResult:
    target: str
    trials: int
    samples: list[int] = field(default_factory=list)
    lost: int = 0

    @property
    def mean(self) -> float:
        return statistics.fmean(self.samples) if self.samples else math.nan

    @property
    def stddev(self) -> float:
        return statistics.stdev(self.samples) if len(self.samples) > 1 else 0.0

    @property
    def stderr(self) -> float:
        n = len(self.samples)
        return self.stddev / math.sqrt(n) if n else math.nan


def ping_probe(model: LatencyModel, target: str, payload: int = PING_PAYLOAD,
               trials: int = 1, rng: Optional[Rng] = None,
               is_up: Callable[[str], bool] = AlwaysUp, mpi: bool = False,
               engine: Optional[Engine] = None) -> ProbeResult:
    """Sequential echo request/reply from the server to ``target``.

    Each trial is one request leg plus one reply leg, run as events on a
    private engine (or on ``engine`` if given, which must be otherwise idle).
    ``mpi=True`` adds the model's ``mpi_overhead_us`` to every sample.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    eng = engine or Engine()
    net = Network(eng, model, rng, is_up=is_up, keep_log=False)
    result = ProbeResult(target, trials)
    server = model.server_id
    extra = int(round(model.mpi_overhead_us)) if mpi else 0
    state = {"left": trials, "t0": 0}

    def fire() -> None:
        if state["left"] == 0:
            return
        state["left"] -= 1
        state["t0"] = eng.now
        ok = net.send(Message(server, target, payload, "echo_request"), on_request, on_lost)
        if not ok:
            on_lost(None)

    def on_request(msg: Message) -> None:
        net.send(Message(target, server, payload, "echo_reply"), on_reply, on_lost)

    def on_reply(msg: Message) -> None:
        result.samples.append(eng.now - state["t0"] + extra)
        fire()

    def on_lost(msg: Optional[Message]) -> None:
        result.lost += 1
        fire()

    eng.after(0, server, "probe_start", lambda ev: fire())
    eng.run()
    return result
