"""Observer-pattern message bus spanning local modules, the peer bud and the host.

Messages carry at most 64 bytes and a destination mask.  Local deliveries are
queued and happen on a later scheduler step, never re-entrantly inside
``send``.  PEER and ECOSYSTEM copies are handed to the node's transport hook,
which encapsulates them as Event frames on the reserved tunnel peripheral.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

MAX_PAYLOAD = 64

DEST_LOCAL = 0x01
DEST_PEER = 0x02
DEST_ECOSYSTEM = 0x04
DEST_ALL = DEST_LOCAL | DEST_PEER | DEST_ECOSYSTEM

# System triggers (0x00-0x1F reserved; applications use 0x20 and up).
TRIG_PERIPH_STATE = 0x01
TRIG_ROLE_PREPARE = 0x02
TRIG_ROLE_TRANSFER = 0x03
TRIG_ROLE_COMMIT = 0x04
TRIG_REGISTRY_SNAPSHOT = 0x05
TRIG_DB_SYNC = 0x06
TRIG_BATTERY = 0x07
TRIG_CNN_RESULT = 0x20
TRIG_MLC_CLASS = 0x21


class ImcError(Exception):
    pass


class PayloadTooLarge(ImcError):
    pass


class InvalidDestination(ImcError):
    pass


class AlreadyRegistered(ImcError):
    pass


@dataclass(frozen=True)
class ImcMessage:
    trigger_id: int
    payload: bytes
    destination_mask: int
    origin: int
    seq: int


@dataclass(frozen=True)
class TriggerSubscription:
    trigger_id: int
    subscriber: str
    node: int


def encode_tunnel(msg: ImcMessage) -> bytes:
    """Host-link encapsulation: [trigger:1][origin:1][seq:4 LE][len:1][payload]."""
    return (
        bytes([msg.trigger_id, msg.origin])
        + msg.seq.to_bytes(4, "little")
        + bytes([len(msg.payload)])
        + msg.payload
    )


def decode_tunnel(payload: bytes, destination_mask: int = DEST_LOCAL) -> ImcMessage:
    trigger_id, origin = payload[0], payload[1]
    seq = int.from_bytes(payload[2:6], "little")
    length = payload[6]
    return ImcMessage(trigger_id, bytes(payload[7 : 7 + length]), destination_mask, origin, seq)


class ImcBus:
    """Per-node bus: register callbacks per trigger, send, drain on scheduler steps."""

    def __init__(self, node_id: int, forward=None):
        self.node_id = node_id
        self._subs: dict[int, dict[str, object]] = {}
        self._queue: deque[ImcMessage] = deque()
        self._next_seq = 0
        # forward(msg, mask) ships PEER/ECOSYSTEM copies; owned by the node router.
        self.forward = forward

    def register(self, trigger_id: int, callback, name: str | None = None) -> TriggerSubscription:
        key = name if name is not None else f"cb-{id(callback)}"
        subs = self._subs.setdefault(trigger_id, {})
        if key in subs:
            raise AlreadyRegistered(f"{key!r} already subscribed to trigger {trigger_id:#04x}")
        subs[key] = callback
        return TriggerSubscription(trigger_id, key, self.node_id)

    def unregister(self, sub: TriggerSubscription) -> None:
        self._subs.get(sub.trigger_id, {}).pop(sub.subscriber, None)

    def send(self, trigger_id: int, payload: bytes, destination_mask: int) -> ImcMessage:
        if len(payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"{len(payload)} > {MAX_PAYLOAD}")
        if destination_mask == 0 or destination_mask & ~DEST_ALL:
            raise InvalidDestination(f"mask {destination_mask:#04x}")
        msg = ImcMessage(trigger_id, bytes(payload), destination_mask, self.node_id, self._next_seq)
        self._next_seq += 1
        if destination_mask & DEST_LOCAL:
            self._queue.append(msg)
        if destination_mask & (DEST_PEER | DEST_ECOSYSTEM) and self.forward is not None:
            self.forward(msg, destination_mask & (DEST_PEER | DEST_ECOSYSTEM))
        return msg

    def deliver_remote(self, msg: ImcMessage) -> None:
        """Enqueue a message arriving from another node for local dispatch."""
        if len(msg.payload) > MAX_PAYLOAD:
            raise PayloadTooLarge(f"{len(msg.payload)} > {MAX_PAYLOAD}")
        self._queue.append(msg)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def drain(self, max_messages: int | None = None) -> int:
        """Deliver queued messages in arrival order; returns the count delivered.

        Only messages already queued when the drain starts are delivered, so a
        callback that sends again never sees its own message re-entrantly.
        """
        budget = len(self._queue) if max_messages is None else min(max_messages, len(self._queue))
        delivered = 0
        for _ in range(budget):
            msg = self._queue.popleft()
            for cb in list(self._subs.get(msg.trigger_id, {}).values()):
                cb(msg)
            delivered += 1
        return delivered
