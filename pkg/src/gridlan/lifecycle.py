"""Node boot state machine, VPN authorization, health sweep and watchdog.

Boot of one client, every step a timed exchange on the star network::

    ClientOffline -> VpnConnecting   host -> server vpn_connect, reply accept/reject
    VpnConnected  -> VmStarting      host starts the VM (vm_start_s)
    DhcpRequesting                   node -> server discover, server -> node offer
    FetchingKernel                   request + kernel, request + initramfs
    MountingRoot                     4-message mount handshake + mount_delay_s
    Ready                            node registered with the queue manager

Failures move a booting node to ``Failed(kind)`` and a Ready node to
``Down(kind)``.  The server pings every registered node each sweep period and
keeps an on/off record; the watchdog on each host polls that record and
restarts a dead VM.  A restart re-enters ``VmStarting`` when the host tunnel
is still up and ``VpnConnecting`` when it is not.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .netmodel import LatencyModel, Message, Network
from .simcore import Engine, Rng, seconds_to_us
from .topology import Topology, client_of, is_node_id, node_id

CONTROL_BYTES = 64
DHCP_BYTES = 342
PING_BYTES = 56


class NodeState(str, enum.Enum):
    CLIENT_OFFLINE = "ClientOffline"
    VPN_CONNECTING = "VpnConnecting"
    VPN_CONNECTED = "VpnConnected"
    VM_STARTING = "VmStarting"
    DHCP_REQUESTING = "DhcpRequesting"
    FETCHING_KERNEL = "FetchingKernel"
    MOUNTING_ROOT = "MountingRoot"
    READY = "Ready"
    FAILED = "Failed"
    DOWN = "Down"

    def __str__(self) -> str:
        return self.value


BOOT_ORDER = (
    NodeState.CLIENT_OFFLINE,
    NodeState.VPN_CONNECTING,
    NodeState.VPN_CONNECTED,
    NodeState.VM_STARTING,
    NodeState.DHCP_REQUESTING,
    NodeState.FETCHING_KERNEL,
    NodeState.MOUNTING_ROOT,
    NodeState.READY,
)
# states in which the VM exists and can use the tunnel
VM_RUNNING = frozenset(BOOT_ORDER[3:])
BOOTING = frozenset(BOOT_ORDER[1:7])
FAILURE_KINDS = ("power-off", "network-fault")


class InjectionError(ValueError):
    pass


@dataclass(frozen=True)
class TranscriptEntry:
    time_us: int
    state: NodeState
    detail: str = ""

    def label(self) -> str:
        return f"{self.state.value}({self.detail})" if self.detail else self.state.value


@dataclass
class BootTimings:
    vm_start_s: float = 5.0
    mount_delay_s: float = 2.0
    sweep_period_s: float = 300.0
    poll_interval_s: float = 300.0
    ping_timeout_s: float = 1.0

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BootTimings":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown boot timing keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class HealthRecord:
    node_id: str
    last_sweep: int
    status: str  # "on" | "off"
    updated_at: int


@dataclass
class Watchdog:
    client_id: str
    poll_interval_us: int
    restart_pending: bool = False
    next_poll: Optional[int] = None  # engine event id


@dataclass
class ClientRuntime:
    client_id: str
    host_up: bool = True
    vpn_up: bool = False
    state: NodeState = NodeState.CLIENT_OFFLINE
    attempt: int = 0
    transcript: list[TranscriptEntry] = field(default_factory=list)
    watchdog: Optional[Watchdog] = None
    timer: Optional[int] = None

    @property
    def node(self) -> str:
        return node_id(self.client_id)


class Lifecycle:
    def __init__(self, engine: Engine, topology: Topology, model: LatencyModel,
                 rng: Optional[Rng] = None, timings: Optional[BootTimings] = None) -> None:
        self.engine = engine
        self.topology = topology
        self.timings = timings or BootTimings.from_dict(topology.boot)
        self.net = Network(engine, model, rng, is_up=self.reachable)
        self.server = topology.server.id
        self.clients = {c.id: ClientRuntime(c.id) for c in topology.clients}
        self.registered: list[str] = []  # node ids, in registration order
        self.health: dict[str, HealthRecord] = {}
        self.health_log: list[HealthRecord] = []
        self._sweep_pending: dict[str, int] = {}
        self._sweep_no = 0
        self.on_ready: list[Callable[[str], None]] = []
        self.on_down: list[Callable[[str, str], None]] = []
        self.on_health: list[Callable[[HealthRecord], None]] = []
        self.on_sweep: list[Callable[[int], None]] = []
        self.restarts: list[tuple[int, str]] = []

    # -- queries -----------------------------------------------------------

    def reachable(self, entity: str) -> bool:
        if entity == self.server:
            return True
        rt = self.clients.get(client_of(entity))
        if rt is None:
            return False
        if not is_node_id(entity):
            return rt.host_up
        return rt.host_up and rt.vpn_up and rt.state in VM_RUNNING

    def state(self, client_id: str) -> NodeState:
        return self.clients[client_id].state

    def transcript(self, client_id: str) -> list[TranscriptEntry]:
        return self.clients[client_id].transcript

    def is_ready(self, client_id: str) -> bool:
        return self.clients[client_id].state is NodeState.READY

    # -- state plumbing ----------------------------------------------------

    def _enter(self, rt: ClientRuntime, state: NodeState, detail: str = "") -> None:
        rt.state = state
        rt.transcript.append(TranscriptEntry(self.engine.now, state, detail))

    def _cancel_timer(self, rt: ClientRuntime) -> None:
        if rt.timer is not None:
            self.engine.cancel(rt.timer)
            rt.timer = None

    def _live(self, rt: ClientRuntime, attempt: int, state: NodeState) -> bool:
        return rt.attempt == attempt and rt.host_up and rt.state is state

    def _send(self, src: str, dst: str, size: int, kind: str, on_deliver, data: Any = None) -> None:
        self.net.send(Message(src, dst, size, kind, data), on_deliver)

    # -- boot --------------------------------------------------------------

    def start_client(self, client_id: str) -> None:
        """Power-on boot of a client host and its node, from ``ClientOffline``."""
        rt = self.clients[client_id]
        if not rt.host_up:
            raise InjectionError(f"client {client_id} is powered off")
        rt.attempt += 1
        rt.vpn_up = False
        self._cancel_timer(rt)
        self._enter(rt, NodeState.CLIENT_OFFLINE)
        self._start_watchdog(rt)
        self._connect_vpn(rt)

    def start_all(self) -> None:
        for cid in self.clients:
            self.start_client(cid)

    def _connect_vpn(self, rt: ClientRuntime) -> None:
        attempt = rt.attempt
        self._enter(rt, NodeState.VPN_CONNECTING)
        spec = self.topology.client(rt.client_id)

        def at_server(msg: Message) -> None:
            kind = "vpn_accept" if spec.has_key else "vpn_reject"
            self._send(self.server, rt.client_id, CONTROL_BYTES, kind, at_host)

        def at_host(msg: Message) -> None:
            if not self._live(rt, attempt, NodeState.VPN_CONNECTING):
                return
            if msg.kind == "vpn_reject":
                self._enter(rt, NodeState.FAILED, "unauthorized")
                return
            rt.vpn_up = True
            self._enter(rt, NodeState.VPN_CONNECTED)
            if rt.node not in self.registered:
                self.registered.append(rt.node)
            self._start_vm(rt)

        self._send(rt.client_id, self.server, CONTROL_BYTES, "vpn_connect", at_server)

    def _start_vm(self, rt: ClientRuntime) -> None:
        attempt = rt.attempt
        self._enter(rt, NodeState.VM_STARTING)
        delay = seconds_to_us(self.timings.vm_start_s)
        rt.timer = self.engine.after(delay, rt.node, "vm_started",
                                     lambda ev: self._dhcp(rt, attempt))

    def _service_ok(self, name: str) -> bool:
        return self.topology.server.services.get(name, False)

    def _server_step(self, rt: ClientRuntime, attempt: int, state: NodeState, service: str,
                     reply_kind: str, reply_size: int, then: Callable[[], None]) -> Callable:
        """Server-side handler: reply ``reply_kind`` or a service failure."""

        def at_node(msg: Message) -> None:
            if not self._live(rt, attempt, state):
                return
            if msg.kind == "service_unavailable":
                if rt.watchdog:
                    rt.watchdog.restart_pending = False
                self._enter(rt, NodeState.FAILED, f"service:{service}")
                return
            then()

        def at_server(msg: Message) -> None:
            if self._service_ok(service):
                self._send(self.server, rt.node, reply_size, reply_kind, at_node)
            else:
                self._send(self.server, rt.node, CONTROL_BYTES, "service_unavailable", at_node)

        return at_server

    def _dhcp(self, rt: ClientRuntime, attempt: int) -> None:
        rt.timer = None
        if not self._live(rt, attempt, NodeState.VM_STARTING):
            return
        self._enter(rt, NodeState.DHCP_REQUESTING)
        at_server = self._server_step(rt, attempt, NodeState.DHCP_REQUESTING,
                                      "address_assignment", "dhcp_offer", DHCP_BYTES,
                                      lambda: self._fetch_kernel(rt, attempt))
        self._send(rt.node, self.server, DHCP_BYTES, "dhcp_discover", at_server)

    def _fetch_kernel(self, rt: ClientRuntime, attempt: int) -> None:
        self._enter(rt, NodeState.FETCHING_KERNEL)
        spec = self.topology.node(rt.client_id)
        st = NodeState.FETCHING_KERNEL
        initrd = self._server_step(rt, attempt, st, "kernel_transfer", "initramfs",
                                   spec.initramfs_size_bytes,
                                   lambda: self._mount_root(rt, attempt))
        kernel = self._server_step(
            rt, attempt, st, "kernel_transfer", "kernel", spec.kernel_size_bytes,
            lambda: self._send(rt.node, self.server, CONTROL_BYTES, "tftp_initrd_request", initrd))
        self._send(rt.node, self.server, CONTROL_BYTES, "tftp_kernel_request", kernel)

    def _mount_root(self, rt: ClientRuntime, attempt: int) -> None:
        self._enter(rt, NodeState.MOUNTING_ROOT)
        st = NodeState.MOUNTING_ROOT

        def mounted() -> None:
            delay = seconds_to_us(self.timings.mount_delay_s)
            rt.timer = self.engine.after(delay, rt.node, "root_mounted",
                                         lambda ev: self._ready(rt, attempt))

        attr = self._server_step(rt, attempt, st, "root_filesystem", "nfs_root_attr",
                                 CONTROL_BYTES, mounted)
        mnt = self._server_step(
            rt, attempt, st, "root_filesystem", "mount_reply", CONTROL_BYTES,
            lambda: self._send(rt.node, self.server, CONTROL_BYTES, "nfs_getattr_root", attr))
        self._send(rt.node, self.server, CONTROL_BYTES, "mount_request", mnt)

    def _ready(self, rt: ClientRuntime, attempt: int) -> None:
        rt.timer = None
        if not self._live(rt, attempt, NodeState.MOUNTING_ROOT):
            return
        if rt.watchdog:
            rt.watchdog.restart_pending = False
        if not self._service_ok("queue_manager"):
            self._enter(rt, NodeState.FAILED, "service:queue_manager")
            return
        self._enter(rt, NodeState.READY)
        for cb in self.on_ready:
            cb(rt.client_id)

    # -- failures ----------------------------------------------------------

    def inject_failure(self, target: str, at_us: int, kind: str) -> int:
        """Schedule a fault (or ``power-on``) on a client host or node."""
        cid = client_of(target)
        if cid not in self.clients:
            raise InjectionError(f"unknown injection target {target!r}")
        if kind not in FAILURE_KINDS and kind != "power-on":
            raise InjectionError(f"unknown injection kind {kind!r}")
        if kind == "power-on" and is_node_id(target):
            raise InjectionError("power-on applies to client hosts, not nodes")
        return self.engine.schedule(at_us, target, f"inject:{kind}",
                                    lambda ev: self._apply(target, kind))

    def _notify_down(self, rt: ClientRuntime, reason: str) -> None:
        for cb in self.on_down:
            cb(rt.client_id, reason)

    def _apply(self, target: str, kind: str) -> None:
        rt = self.clients[client_of(target)]
        if kind == "power-on":
            if not rt.host_up:
                rt.host_up = True
                self.start_client(rt.client_id)
            return
        if not rt.host_up:
            return
        host_level = not is_node_id(target)
        was = rt.state
        if host_level and kind == "power-off":
            rt.host_up = False
            rt.vpn_up = False
            self._stop_watchdog(rt)
        elif host_level:
            rt.vpn_up = False
        affected = (was in VM_RUNNING or was in BOOTING) if host_level else was in VM_RUNNING
        if affected:
            rt.attempt += 1
            self._cancel_timer(rt)
            if rt.watchdog:
                rt.watchdog.restart_pending = False
            self._enter(rt, NodeState.DOWN if was is NodeState.READY else NodeState.FAILED, kind)
            self._notify_down(rt, kind)
        elif host_level and kind == "power-off":
            self._enter(rt, NodeState.DOWN, kind)

    # -- server sweep ------------------------------------------------------

    def start_sweeps(self, first_at_us: int = 0) -> None:
        self.engine.schedule(first_at_us, self.server, "sweep", lambda ev: self.server_sweep())

    def server_sweep(self) -> None:
        """Ping every registered node and reschedule the next sweep."""
        now = self.engine.now
        self._sweep_no += 1
        sweep = self._sweep_no
        for nid in self.registered:
            self._sweep_pending[nid] = sweep
            self.net.send(
                Message(self.server, nid, PING_BYTES, "health_ping"),
                lambda msg, nid=nid: self._ping_at_node(nid, sweep, now),
                lambda msg, nid=nid: self._record(nid, sweep, now, "off"),
            )
        timeout = seconds_to_us(self.timings.ping_timeout_s)
        self.engine.after(timeout, self.server, "sweep_timeout",
                          lambda ev: self._sweep_timeout(sweep, now))
        period = seconds_to_us(self.timings.sweep_period_s)
        self.engine.after(period, self.server, "sweep", lambda ev: self.server_sweep())
        for cb in self.on_sweep:
            cb(now)

    def _ping_at_node(self, nid: str, sweep: int, started: int) -> None:
        # only a fully booted node answers
        if self.clients[client_of(nid)].state is not NodeState.READY:
            return
        self.net.send(Message(nid, self.server, PING_BYTES, "health_pong"),
                      lambda msg: self._record(nid, sweep, started, "on"))

    def _record(self, nid: str, sweep: int, started: int, status: str) -> None:
        if self._sweep_pending.get(nid) != sweep:
            return
        del self._sweep_pending[nid]
        rec = HealthRecord(nid, started, status, self.engine.now)
        self.health[nid] = rec
        self.health_log.append(rec)
        for cb in self.on_health:
            cb(rec)

    def _sweep_timeout(self, sweep: int, started: int) -> None:
        for nid in [n for n, s in self._sweep_pending.items() if s == sweep]:
            self._record(nid, sweep, started, "off")

    # -- watchdog ----------------------------------------------------------

    def _start_watchdog(self, rt: ClientRuntime) -> None:
        interval = seconds_to_us(self.timings.poll_interval_s)
        if rt.watchdog is None:
            rt.watchdog = Watchdog(rt.client_id, interval)
        self._stop_watchdog(rt)
        rt.watchdog.restart_pending = False
        rt.watchdog.next_poll = self.engine.after(
            interval, rt.client_id, "watchdog_poll", lambda ev: self.watchdog_poll(rt.client_id))

    def _stop_watchdog(self, rt: ClientRuntime) -> None:
        if rt.watchdog and rt.watchdog.next_poll is not None:
            self.engine.cancel(rt.watchdog.next_poll)
            rt.watchdog.next_poll = None

    def server_status(self, client_id: str) -> str:
        """What the server answers a watchdog: ``on``, ``off`` or ``unknown``."""
        if not self.topology.client(client_id).has_key:
            return "unknown"
        rec = self.health.get(node_id(client_id))
        return rec.status if rec else "off"

    def watchdog_decide(self, client_id: str, status: str) -> Optional[str]:
        """Restart action for a server answer, or None."""
        rt = self.clients[client_id]
        wd = rt.watchdog
        if not rt.host_up or wd is None or status != "off" or wd.restart_pending:
            return None
        if rt.state not in (NodeState.DOWN, NodeState.FAILED):
            return None
        return "restart-vm" if rt.vpn_up else "reconnect-vpn"

    def watchdog_poll(self, client_id: str) -> None:
        rt = self.clients[client_id]
        if not rt.host_up or rt.watchdog is None:
            return
        wd = rt.watchdog
        wd.next_poll = self.engine.after(wd.poll_interval_us, client_id, "watchdog_poll",
                                         lambda ev: self.watchdog_poll(client_id))

        def at_server(msg: Message) -> None:
            status = self.server_status(client_id)
            self._send(self.server, client_id, CONTROL_BYTES, "health_status",
                       at_host, data=status)

        def at_host(msg: Message) -> None:
            action = self.watchdog_decide(client_id, msg.data)
            if action is not None:
                self._restart(rt, action)

        self._send(client_id, self.server, CONTROL_BYTES, "health_query", at_server)

    def _restart(self, rt: ClientRuntime, action: str) -> None:
        rt.watchdog.restart_pending = True
        rt.attempt += 1
        self._cancel_timer(rt)
        self.restarts.append((self.engine.now, rt.client_id))
        if action == "restart-vm":
            self._start_vm(rt)
        else:
            self._connect_vpn(rt)
