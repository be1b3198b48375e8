"""Inputs and outputs of the sans-transport state machines.

A driver feeds :class:`Start`, :class:`Received` and :class:`TimerExpired`
events in and carries out the returned actions.  Each role keeps at most
one pending timer per name; arming a name replaces the earlier deadline.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from .codec import Message


@dataclass(frozen=True)
class Start:
    pass


@dataclass(frozen=True)
class Received:
    message: Message


@dataclass(frozen=True)
class TimerExpired:
    timer: str


Event = Union[Start, Received, TimerExpired]


@dataclass(frozen=True)
class Send:
    message: Message


@dataclass(frozen=True)
class ArmTimer:
    timer: str
    delay_ms: int


@dataclass(frozen=True)
class CancelTimer:
    timer: str


@dataclass(frozen=True)
class Deliver:
    """In-order content bytes ready for the output sink (client only)."""

    data: bytes


@dataclass(frozen=True)
class Note:
    """Diagnostic for the driver's log; carries no protocol effect."""

    text: str


Action = Union[Send, ArmTimer, CancelTimer, Deliver, Note]

TOKEN_TIMER = "token"
GAP_TIMER = "gap"
HELLO_TIMER = "hello"
RETRY_TIMER = "retry"
