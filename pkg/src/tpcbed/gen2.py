"""Slotted-ALOHA inventory rounds and retried access delivery.

This is the frame-slotted anticollision loop UHF readers run: every
responsive tag draws one slot out of 2**Q, a slot with exactly one
decoded reply singulates that tag, and the floating-point Q estimate
drifts up on collisions and down on silence.  Access operations ride on
top with a command-plus-acknowledgment delivery model, so one attempt
lands with probability p*p on a link whose single-message delivery
probability is p.

Randomness comes exclusively from the ``random.Random`` instance the
caller passes in, which keeps every run replayable from its seed.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field

Q_MIN = 0
Q_MAX = 15


class MacConfigError(ValueError):
    """Inventory configuration outside the legal ranges."""


@dataclass(frozen=True)
class InventoryConfig:
    """Timing and Q-adaptation knobs for inventory and access rounds."""

    q_initial: int = 4
    q_fp_step: float = 0.5
    slot_duration_ms: float = 75.0

    def validate(self) -> None:
        if not Q_MIN <= self.q_initial <= Q_MAX:
            raise MacConfigError(f"q_initial must be in [{Q_MIN}, {Q_MAX}]")
        if self.q_fp_step < 0.0:
            raise MacConfigError("q_fp_step must be >= 0")
        if self.slot_duration_ms <= 0.0:
            raise MacConfigError("slot_duration_ms must be > 0")


class SlotKind(enum.Enum):
    EMPTY = "empty"
    SINGULATED = "singulated"
    COLLISION = "collision"


@dataclass(frozen=True)
class ReachableTag:
    """One tag as the MAC layer sees it: an id, an EPC, and a link."""

    tag_id: int
    epc: bytes
    rssi_dbm: float
    delivery_probability: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.delivery_probability <= 1.0:
            raise MacConfigError("delivery probability must be in [0, 1]")


@dataclass(frozen=True)
class SlotOutcome:
    """What one slot produced.

    ``tag_id``/``rssi_dbm`` are set for singulations, ``tag_ids`` holds
    the colliding ids (two or more) for collisions.
    """

    kind: SlotKind
    slot_index: int
    timestamp_ms: float
    tag_id: int | None = None
    rssi_dbm: float | None = None
    tag_ids: tuple[int, ...] = ()


@dataclass(frozen=True)
class RoundResult:
    outcomes: tuple[SlotOutcome, ...]
    q_fp_after: float
    duration_ms: float

    @property
    def singulated(self) -> tuple[SlotOutcome, ...]:
        return tuple(o for o in self.outcomes if o.kind is SlotKind.SINGULATED)


@dataclass(frozen=True)
class AccessResult:
    """Outcome of one retried access operation against one tag."""

    kind: str
    target_epc: bytes
    success: bool
    attempts: int
    detail: str | None = None
    data: tuple[int, ...] = ()


def rounded_q(q_fp: float) -> int:
    """Integer Q used for the next round.

    Half-up rounding: the floating estimate moves in half steps, and
    banker's rounding would make x.5 land on different sides depending
    on parity.
    """
    return int(q_fp + 0.5)


def adjust_q(q_fp: float, outcome_kind: SlotKind, step: float = 0.5) -> float:
    """One Q-adaptation step: up on collision, down on empty, clamped."""
    if outcome_kind is SlotKind.COLLISION:
        q_fp += step
    elif outcome_kind is SlotKind.EMPTY:
        q_fp -= step
    return min(max(q_fp, float(Q_MIN)), float(Q_MAX))


def run_inventory_round(
    reachable_tags: list[ReachableTag],
    config: InventoryConfig,
    rng: random.Random,
    q_fp: float | None = None,
    start_time_ms: float = 0.0,
) -> RoundResult:
    """One full inventory frame of 2**Q slots.

    Each tag draws one slot uniformly; in its slot it replies with its
    delivery probability.  Exactly one decoded reply singulates, two or
    more collide.  The slot count is fixed when the round starts; the
    returned q_fp feeds the next round.  Tags are processed in the list
    order given, so callers wanting reproducibility should pass a stable
    ordering.
    """
    if q_fp is None:
        q_fp = float(config.q_initial)
    q = rounded_q(q_fp)
    n_slots = 1 << q

    draws: dict[int, list[ReachableTag]] = {}
    for tag in reachable_tags:
        draws.setdefault(rng.randrange(n_slots), []).append(tag)

    outcomes = []
    for slot_index in range(n_slots):
        timestamp = start_time_ms + slot_index * config.slot_duration_ms
        replying = [
            tag
            for tag in draws.get(slot_index, [])
            if rng.random() < tag.delivery_probability
        ]
        if len(replying) == 1:
            tag = replying[0]
            outcome = SlotOutcome(
                SlotKind.SINGULATED,
                slot_index,
                timestamp,
                tag_id=tag.tag_id,
                rssi_dbm=tag.rssi_dbm,
            )
        elif replying:
            outcome = SlotOutcome(
                SlotKind.COLLISION,
                slot_index,
                timestamp,
                tag_ids=tuple(t.tag_id for t in replying),
            )
        else:
            outcome = SlotOutcome(SlotKind.EMPTY, slot_index, timestamp)
        outcomes.append(outcome)
        q_fp = adjust_q(q_fp, outcome.kind, config.q_fp_step)

    return RoundResult(
        outcomes=tuple(outcomes),
        q_fp_after=q_fp,
        duration_ms=n_slots * config.slot_duration_ms,
    )


def run_access_attempts(
    delivery_probability: float,
    max_retries: int,
    rng: random.Random,
) -> tuple[bool, int]:
    """Retry loop for one access operation, success chance p*p per attempt.

    Returns (delivered, attempts) with attempts <= max_retries + 1.
    """
    p_attempt = delivery_probability * delivery_probability
    attempts = 0
    while attempts <= max_retries:
        attempts += 1
        if rng.random() < p_attempt:
            return True, attempts
    return False, attempts


def access_write(
    tag,
    start_address: int,
    words: list[int],
    delivery_probability: float,
    max_retries: int,
    rng: random.Random,
) -> AccessResult:
    """Deliver one block write to ``tag`` with retries.

    ``tag`` must expose ``epc`` and ``on_write_words(start, words)``
    returning an object with ``ok``/``reason``.  The write handler runs
    exactly once, on the attempt that gets through; retry exhaustion is
    reported as a failed result, never an exception.
    """
    delivered, attempts = run_access_attempts(delivery_probability, max_retries, rng)
    if not delivered:
        return AccessResult("block-write", tag.epc, False, attempts, "undelivered")
    reply = tag.on_write_words(start_address, words)
    return AccessResult(
        "block-write", tag.epc, reply.ok, attempts, reply.reason
    )
