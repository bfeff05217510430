"""Deterministic discrete-event engine and portable PRNG.

Simulated time is an integer count of microseconds since run start.  Events
are ordered by ``(fire_at, seq)`` where ``seq`` is the insertion counter, so
two runs that schedule the same events in the same order execute them in the
same order, with no dependence on wall-clock time or dict/hash ordering.
"""
from __future__ import annotations

import hashlib
import heapq
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence, TextIO, TypeVar

T = TypeVar("T")

US_PER_S = 1_000_000
_MASK64 = (1 << 64) - 1


class CausalityError(ValueError):
    """Raised when an event is scheduled before the current simulated time."""


def seconds_to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def us_to_seconds(us: int) -> float:
    return us / US_PER_S


def payload_kind(payload: Any) -> str:
    if payload is None:
        return "-"
    if isinstance(payload, str):
        return payload
    kind = getattr(payload, "kind", None)
    return str(kind) if kind is not None else type(payload).__name__


@dataclass(frozen=True, order=True)
class Event:
    fire_at: int
    seq: int
    target: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


Handler = Callable[[Event], None]


class Engine:
    """Single-threaded event loop.

    Handlers are plain callables receiving the :class:`Event`.  A handler may
    schedule further events, including events at the current instant; those
    run inside the same :meth:`run_until` call.
    """

    def __init__(self, trace: bool = False) -> None:
        self.now = 0
        self._seq = 0
        self._heap: list[tuple[int, int, Event, Optional[Handler]]] = []
        self._cancelled: set[int] = set()
        self._stopped = False
        self.executed = 0
        self._count = 0
        self.trace: Optional[list[str]] = [] if trace else None

    def schedule(
        self,
        fire_at: int,
        target: str,
        payload: Any = None,
        handler: Optional[Handler] = None,
    ) -> int:
        fire_at = int(fire_at)
        if fire_at < self.now:
            raise CausalityError(
                f"causality violation: event for {target!r} at {fire_at} us "
                f"scheduled when now={self.now} us"
            )
        seq = self._seq
        self._seq += 1
        ev = Event(fire_at, seq, target, payload)
        heapq.heappush(self._heap, (fire_at, seq, ev, handler))
        return seq

    def after(
        self,
        delay_us: int,
        target: str,
        payload: Any = None,
        handler: Optional[Handler] = None,
    ) -> int:
        if delay_us < 0:
            raise CausalityError(f"causality violation: negative delay {delay_us} us")
        return self.schedule(self.now + int(delay_us), target, payload, handler)

    def cancel(self, event_id: int) -> None:
        self._cancelled.add(event_id)

    def pending(self) -> int:
        return sum(1 for _, seq, _, _ in self._heap if seq not in self._cancelled)

    def stop(self) -> None:
        """Make the current :meth:`run_until` return after this event."""
        self._stopped = True

    def _step(self) -> None:
        fire_at, seq, ev, handler = heapq.heappop(self._heap)
        if seq in self._cancelled:
            self._cancelled.discard(seq)
            return
        self.now = fire_at
        self.executed += 1
        if self.trace is not None:
            self.trace.append(f"{fire_at}\t{seq}\t{ev.target}\t{payload_kind(ev.payload)}")
        if handler is not None:
            handler(ev)
        self._count += 1

    def run_until(self, t: int) -> int:
        """Execute every event with ``fire_at <= t``; return how many ran."""
        t = int(t)
        if t < self.now:
            raise CausalityError(f"causality violation: run_until({t}) with now={self.now}")
        self._count = 0
        self._stopped = False
        while self._heap and self._heap[0][0] <= t and not self._stopped:
            self._step()
        if not self._stopped:
            self.now = t
        return self._count

    def run(self, limit: Optional[int] = None) -> int:
        """Drain the queue (optionally bounded by ``limit`` us)."""
        self._count = 0
        self._stopped = False
        while self._heap and not self._stopped:
            if limit is not None and self._heap[0][0] > limit:
                break
            self._step()
        return self._count

    def write_trace(self, fp: TextIO) -> None:
        for line in self.trace or ():
            fp.write(line + "\n")


class Rng:
    """SplitMix64 generator.

    Algorithm (Steele, Lea & Flood 2014): ``state += 0x9E3779B97F4A7C15``;
    ``z = state``; ``z = (z ^ z>>30) * 0xBF58476D1CE4E5B9``;
    ``z = (z ^ z>>27) * 0x94D049BB133111EB``; output ``z ^ z>>31``, all mod
    2**64.  Floats take the top 53 bits.  Normals use Box-Muller with one
    output per pair of uniforms (no cached spare).  Child streams are seeded
    from the first 8 bytes of ``blake2b(seed || label)``.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        # rejection removes modulo bias
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def randint(self, a: int, b: int) -> int:
        return a + self.randbelow(b - a + 1)

    def uniform(self, a: float, b: float) -> float:
        return a + (b - a) * self.random()

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        if sigma == 0:
            return float(mu)
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        return mu + sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def choice(self, seq: Sequence[T]) -> T:
        return seq[self.randbelow(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, population: Iterable[T], k: int) -> list[T]:
        pool = list(population)
        if not 0 <= k <= len(pool):
            raise ValueError(f"sample size {k} outside 0..{len(pool)}")
        # partial Fisher-Yates from the front
        for i in range(k):
            j = i + self.randbelow(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def fork(self, label: str) -> "Rng":
        digest = hashlib.blake2b(
            self.seed.to_bytes(8, "little") + label.encode("utf-8"), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "little"))
