"""Deterministic in-process network between one server and one client.

Virtual time advances in whole milliseconds.  Every datagram's fate is
drawn from a SplitMix64 stream seeded by ``NetConditions.seed``, always
eight draws per datagram in this order::

    loss, delay, reorder, reorder_extra, duplicate, duplicate_delay,
    corrupt, corrupt_bit

so two runs with equal inputs produce byte-identical traces.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

from ..protocol.codec import DecodeError, MsgType, decode_message, encode_message, MAX_DATAGRAM
from ..protocol.events import Action, ArmTimer, CancelTimer, Deliver, Note, Received, Send, Start, TimerExpired

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
REORDER_EXTRA_MAX_MS = 100

C2S = "c2s"
S2C = "s2c"

DELIVERED = "delivered"
DROPPED = "dropped"
DUPLICATED = "duplicated"


class SplitMix64:
    """SplitMix64 (Steele, Lea, Flood 2014); constants as in the reference C code."""

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] by modulo reduction (bias below 2**-40 for our ranges)."""
        return lo + self.next_u64() % (hi - lo + 1)


@dataclass(frozen=True)
class NetConditions:
    loss_prob: float = 0.0
    reorder_prob: float = 0.0
    duplicate_prob: float = 0.0
    delay_ms: tuple[int, int] = (0, 0)
    seed: int = 0
    # Off by default; flips one bit of a delivered copy.
    corrupt_prob: float = 0.0

    def __post_init__(self) -> None:
        for name in ("loss_prob", "reorder_prob", "duplicate_prob", "corrupt_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        lo, hi = self.delay_ms
        if lo < 0 or lo > hi:
            raise ValueError(f"delay range must satisfy 0 <= min <= max, got {self.delay_ms}")


@dataclass(frozen=True)
class SimEvent:
    virtual_time_ms: int
    direction: str
    datagram: bytes
    fate: str
    datagram_id: int

    def to_json(self) -> str:
        kind = self.datagram[3] if len(self.datagram) > 3 else None
        name = MsgType(kind).name if kind in MsgType._value2member_map_ else None
        return json.dumps({
            "t": self.virtual_time_ms,
            "dir": self.direction,
            "id": self.datagram_id,
            "fate": self.fate,
            "type": name,
            "len": len(self.datagram),
            "hex": self.datagram.hex(),
        }, sort_keys=True)


class SimBudgetExceeded(RuntimeError):
    pass


@dataclass
class SimResult:
    trace: list[SimEvent]
    server: Any
    client: Any
    delivered: bytes
    end_time_ms: int
    notes: list[tuple[int, str, str]] = field(default_factory=list)

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ev in self.trace:
                fh.write(ev.to_json() + "\n")

    def trace_lines(self) -> list[str]:
        return [ev.to_json() for ev in self.trace]


Stepper = Callable[[Any, Any], tuple[Any, list[Action]]]

_SERVER, _CLIENT = "server", "client"


def sim_run(server: Any, server_step: Stepper, client: Any, client_step: Stepper,
            conditions: NetConditions, *, event_budget: int = 1_000_000) -> SimResult:
    """Run both machines to quiescence and return the full trace.

    The run ends when no datagram or timer is pending.  Raises
    :class:`SimBudgetExceeded` past ``event_budget`` processed events.
    """
    rng = SplitMix64(conditions.seed)
    states = {_SERVER: server, _CLIENT: client}
    steps = {_SERVER: server_step, _CLIENT: client_step}
    queue: list[tuple] = []
    order = 0
    timer_gen: dict[tuple[str, str], int] = {}
    trace: list[SimEvent] = []
    notes: list[tuple[int, str, str]] = []
    delivered = bytearray()
    next_id = 0
    lo, hi = conditions.delay_ms

    def push(t: int, *item) -> None:
        nonlocal order
        heapq.heappush(queue, (t, order, *item))
        order += 1

    def transmit(now: int, role: str, datagram: bytes) -> None:
        nonlocal next_id
        dgram_id = next_id
        next_id += 1
        direction = C2S if role == _CLIENT else S2C
        target = _SERVER if role == _CLIENT else _CLIENT
        u_loss = rng.uniform()
        delay = rng.randint(lo, hi)
        u_reorder = rng.uniform()
        extra = rng.randint(1, REORDER_EXTRA_MAX_MS)
        u_dup = rng.uniform()
        dup_delay = rng.randint(lo, hi)
        u_corrupt = rng.uniform()
        bit = rng.next_u64()
        if u_loss < conditions.loss_prob:
            trace.append(SimEvent(now, direction, datagram, DROPPED, dgram_id))
            return
        if u_reorder < conditions.reorder_prob:
            delay += extra
        payload = datagram
        if u_corrupt < conditions.corrupt_prob and datagram:
            pos = bit % (len(datagram) * 8)
            flipped = bytearray(datagram)
            flipped[pos // 8] ^= 1 << (pos % 8)
            payload = bytes(flipped)
        push(now + delay, "dgram", target, direction, payload, DELIVERED, dgram_id)
        if u_dup < conditions.duplicate_prob:
            push(now + dup_delay, "dgram", target, direction, payload, DUPLICATED, dgram_id)

    def apply(now: int, role: str, actions: Iterable[Action]) -> None:
        for action in actions:
            if isinstance(action, Send):
                transmit(now, role, encode_message(action.message))
            elif isinstance(action, ArmTimer):
                key = (role, action.timer)
                gen = timer_gen.get(key, 0) + 1
                timer_gen[key] = gen
                push(now + action.delay_ms, "timer", role, action.timer, gen)
            elif isinstance(action, CancelTimer):
                key = (role, action.timer)
                timer_gen[key] = timer_gen.get(key, 0) + 1
            elif isinstance(action, Deliver):
                delivered.extend(action.data)
            elif isinstance(action, Note):
                notes.append((now, role, action.text))

    def step(now: int, role: str, event) -> None:
        states[role], actions = steps[role](states[role], event)
        apply(now, role, actions)

    step(0, _SERVER, Start())
    step(0, _CLIENT, Start())
    processed = 0
    last = 0
    while queue:
        processed += 1
        if processed > event_budget:
            raise SimBudgetExceeded(f"more than {event_budget} events")
        now, _, kind, *item = heapq.heappop(queue)
        if kind == "timer":
            role, name, gen = item
            if timer_gen.get((role, name)) != gen:
                continue
            last = now
            step(now, role, TimerExpired(name))
        else:
            target, direction, payload, fate, dgram_id = item
            last = now
            trace.append(SimEvent(now, direction, payload, fate, dgram_id))
            if len(payload) > MAX_DATAGRAM:
                continue
            try:
                msg = decode_message(payload)
            except DecodeError as exc:
                notes.append((now, target, f"undecodable datagram: {exc}"))
                continue
            step(now, target, Received(msg))
    return SimResult(trace, states[_SERVER], states[_CLIENT], bytes(delivered), last, notes)


def summarize(trace: list[SimEvent]) -> dict[str, int]:
    """Per-direction, per-fate and per-type datagram counts."""
    out: dict[str, int] = {"events": len(trace)}
    for ev in trace:
        key = f"{ev.direction}_{ev.fate}"
        out[key] = out.get(key, 0) + 1
        if len(ev.datagram) > 3 and ev.datagram[3] in MsgType._value2member_map_:
            key = f"{ev.direction}_{MsgType(ev.datagram[3]).name.lower()}"
            out[key] = out.get(key, 0) + 1
    return out
