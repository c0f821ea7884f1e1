"""Dual-device policy engine: role rotation, shared peripheral database,
executor assignment and battery accounting.

Roles swap through a three-message handshake (PREPARE, TRANSFER, COMMIT) that
agrees on a switchover instant in virtual time: the primary proposes the
instant and freezes its host egress, the secondary acknowledges, the primary
confirms with the session state, and both flip at exactly the agreed
microsecond, so at every instant exactly one bud is primary.  If the exchange
does not complete by the deadline, both sides abort and the swap is retried a
period later.

The shared database converges by version dominance: each entry carries a
Lamport-style (counter, node) version and merge keeps the greater one, which
makes the merge commutative, associative and idempotent.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

from .imc import DEST_PEER, TRIG_ROLE_COMMIT, TRIG_ROLE_PREPARE, TRIG_ROLE_TRANSFER

CAPACITY_MAH = 105.0
PPG_HOURS = 8.0
PLAYBACK_HOURS = 6.0
_US_PER_HOUR = 3_600_000_000.0

# mAh per microsecond of activity; ppg and playback are calibrated to the
# battery-life anchors, the rest are modelling choices kept small.
ACTIVITY_RATES = {
    "ppg": CAPACITY_MAH / (PPG_HOURS * _US_PER_HOUR),
    "playback": CAPACITY_MAH / (PLAYBACK_HOURS * _US_PER_HOUR),
    "imu": CAPACITY_MAH / (40.0 * _US_PER_HOUR),
    "temp": CAPACITY_MAH / (400.0 * _US_PER_HOUR),
    "mic": CAPACITY_MAH / (24.0 * _US_PER_HOUR),
    "dsp": CAPACITY_MAH / (16.0 * _US_PER_HOUR),
    "vitals": CAPACITY_MAH / (60.0 * _US_PER_HOUR),
}
RADIO_MAH_PER_BYTE = 2e-9
CNN_MAH_PER_UNIT = 1e-10

DEFAULT_ROTATION_PERIOD_S = 300
SWAP_LEAD_US = 50_000  # PREPARE goes out this far ahead of the boundary


class LoadBalanceError(Exception):
    pass


class UnknownActivity(LoadBalanceError):
    pass


class NoCandidate(LoadBalanceError):
    pass


class PeerDown(LoadBalanceError):
    pass


class EnergyLedger:
    """Per-bud linear battery model with per-activity counters."""

    def __init__(self, capacity_mah: float = CAPACITY_MAH, on_depleted=None):
        self.capacity_mah = capacity_mah
        self.drained_mah = 0.0
        self.by_activity: dict[str, float] = {}
        self.on_depleted = on_depleted
        self._depleted_signalled = False

    def account(self, activity: str, ticks_us: float) -> float:
        if activity == "radio":
            rate = RADIO_MAH_PER_BYTE  # ticks are bytes for radio
        elif activity == "cnn":
            rate = CNN_MAH_PER_UNIT    # ticks are accelerator energy units
        elif activity in ACTIVITY_RATES:
            rate = ACTIVITY_RATES[activity]
        else:
            raise UnknownActivity(activity)
        amount = rate * ticks_us
        self.drained_mah += amount
        self.by_activity[activity] = self.by_activity.get(activity, 0.0) + amount
        if self.drained_mah >= self.capacity_mah and not self._depleted_signalled:
            self._depleted_signalled = True
            if self.on_depleted is not None:
                self.on_depleted(self)
        return self.drained_mah

    @property
    def depleted(self) -> bool:
        return self.drained_mah >= self.capacity_mah

    @property
    def fraction(self) -> float:
        return self.drained_mah / self.capacity_mah


@dataclass(frozen=True)
class DbEntry:
    state: str = "disabled"          # disabled | enabled | error
    executor: str = ""               # "left" | "right" | ""
    config: tuple = ()               # sorted ((endpoint, value), ...)
    version: tuple = (0, 0)          # (lamport counter, node id)


class SharedPeripheralDb:
    """Replicated peripheral-state table; higher (counter, node) version wins."""

    def __init__(self, node_id: int):
        self.node_id = node_id
        self.entries: dict[int, DbEntry] = {}
        self._max_counter = 0
        self.dirty: set[int] = set()

    def local_update(self, periph: int, **fields) -> DbEntry:
        cur = self.entries.get(periph, DbEntry())
        self._max_counter += 1
        entry = replace(cur, **fields, version=(self._max_counter, self.node_id))
        self.entries[periph] = entry
        self.dirty.add(periph)
        return entry

    def set_config(self, periph: int, endpoint: int, value: int) -> DbEntry:
        cur = dict(self.entries.get(periph, DbEntry()).config)
        cur[endpoint] = value
        return self.local_update(periph, config=tuple(sorted(cur.items())))

    def merge(self, delta: dict[int, DbEntry]) -> int:
        """Version-dominance merge; returns the number of entries adopted."""
        adopted = 0
        for periph, entry in delta.items():
            mine = self.entries.get(periph)
            if mine is None or entry.version > mine.version:
                self.entries[periph] = entry
                adopted += 1
            self._max_counter = max(self._max_counter, entry.version[0])
        return adopted

    def encode_entry(self, periph: int) -> bytes:
        e = self.entries[periph]
        state_code = ("disabled", "enabled", "error").index(e.state)
        exec_code = {"": 0, "left": 1, "right": 2}[e.executor]
        out = struct.pack(
            "<BIBBBB", periph, e.version[0], e.version[1], state_code, exec_code,
            len(e.config),
        )
        for ep, val in e.config:
            out += struct.pack("<BH", ep, val & 0xFFFF)
        return out

    @staticmethod
    def decode_entry(payload: bytes) -> tuple[int, DbEntry]:
        periph, counter, node, state_code, exec_code, n_cfg = struct.unpack_from(
            "<BIBBBB", payload
        )
        config = []
        off = 9
        for _ in range(n_cfg):
            ep, val = struct.unpack_from("<BH", payload, off)
            off += 3
            config.append((ep, val))
        return periph, DbEntry(
            state=("disabled", "enabled", "error")[state_code],
            executor=("", "left", "right")[exec_code],
            config=tuple(config),
            version=(counter, node),
        )


def assign_executor(
    periph: int,
    policy: str,
    ledgers: dict[str, EnergyLedger],
    current_secondary: str,
    available: dict[str, bool] | None = None,
) -> str:
    """Pick the bud that should run a task, honouring the active policy."""
    available = available or {"left": True, "right": True}
    candidates = [s for s in ("left", "right") if available.get(s) and not ledgers[s].depleted]
    if not candidates:
        raise NoCandidate(f"no non-depleted bud can host peripheral {periph:#04x}")
    if policy == "pin_left":
        side = "left"
    elif policy == "pin_right":
        side = "right"
    elif policy == "balance_energy":
        d_left, d_right = ledgers["left"].drained_mah, ledgers["right"].drained_mah
        if d_left < d_right:
            side = "left"
        elif d_right < d_left:
            side = "right"
        else:
            side = current_secondary
    else:
        raise LoadBalanceError(f"unknown policy {policy!r}")
    if side not in candidates:
        raise NoCandidate(f"policy {policy} wants {side} but it is unavailable")
    return side


@dataclass
class RoleState:
    current_primary: str
    rotation_period_s: float
    last_swap_us: int = 0
    swap_count: int = 0


_PREPARE = struct.Struct("<Q")          # switchover time (us)
_TRANSFER = struct.Struct("<Q")         # echo of the switchover time
_COMMIT_HEAD = struct.Struct("<QH")     # switchover time, session seq


class RoleManager:
    """One bud's half of the rotation protocol.

    Hooks: ``collect_state()`` returns the host-session seq to hand over;
    ``apply_state(seq)`` installs it on promotion; ``set_role(role)`` flips the
    router; ``freeze()``/``unfreeze()`` gate host egress on the current primary.
    """

    def __init__(self, side: str, bus, clock, period_s: float,
                 peer_latency_us: int, hooks, initial_primary: str = "left",
                 trace=None):
        self.side = side
        self.bus = bus
        self.clock = clock
        self.period_us = int(period_s * 1e6)
        self.peer_latency_us = peer_latency_us
        self.hooks = hooks
        self.role = "primary" if side == initial_primary else "secondary"
        self.swap_count = 0
        self.deferrals = 0
        self.trace = trace
        self.next_boundary_us = self.period_us if self.period_us > 0 else None
        # in-flight handshake state
        self._switch_at: int | None = None
        self._commit_sent = False
        self._commit_received = False
        self._pending_seq = 0
        self._froze = False
        bus.register(TRIG_ROLE_PREPARE, self._on_prepare, name=f"role-{side}")
        bus.register(TRIG_ROLE_TRANSFER, self._on_transfer, name=f"role-{side}")
        bus.register(TRIG_ROLE_COMMIT, self._on_commit, name=f"role-{side}")

    # -- primary side ---------------------------------------------------

    def maybe_initiate(self, now_us: int, peer_up: bool) -> None:
        if self.period_us <= 0 or self.role != "primary" or self._switch_at is not None:
            return
        if self.next_boundary_us is None:
            return
        while self.next_boundary_us <= now_us:  # a boundary we missed: skip it
            self.next_boundary_us += self.period_us
        if now_us < self.next_boundary_us - SWAP_LEAD_US:
            return
        if not peer_up:
            self.deferrals += 1
            self._log("swap_deferred", reason="peer_down")
            self.next_boundary_us += self.period_us
            return
        self._switch_at = self.next_boundary_us
        self._commit_sent = False
        self._froze = True
        self.hooks["freeze"]()
        self.hooks.get("schedule_flip", lambda ts: None)(self._switch_at)
        self.bus.send(TRIG_ROLE_PREPARE, _PREPARE.pack(self._switch_at), DEST_PEER)

    def _on_transfer(self, msg) -> None:
        if self.role != "primary" or self._switch_at is None:
            return
        (ts,) = _TRANSFER.unpack(msg.payload)
        if ts != self._switch_at:
            return
        now = self.clock.now_us
        if now + self.peer_latency_us > self._switch_at:
            return  # too late to guarantee delivery; deadline check aborts
        seq = self.hooks["collect_state"]()
        self.bus.send(TRIG_ROLE_COMMIT, _COMMIT_HEAD.pack(self._switch_at, seq), DEST_PEER)
        self._commit_sent = True

    # -- secondary side ---------------------------------------------------

    def _on_prepare(self, msg) -> None:
        (ts,) = _PREPARE.unpack(msg.payload)
        if self.role != "secondary" or ts <= self.clock.now_us:
            return
        self._switch_at = ts
        self._commit_received = False
        self.hooks.get("schedule_flip", lambda t: None)(ts)
        self.bus.send(TRIG_ROLE_TRANSFER, _TRANSFER.pack(ts), DEST_PEER)

    def _on_commit(self, msg) -> None:
        ts, seq = _COMMIT_HEAD.unpack(msg.payload)
        if self.role != "secondary" or ts != self._switch_at:
            return
        self._commit_received = True
        self._pending_seq = seq

    # -- both sides -------------------------------------------------------

    def flip_check(self, now_us: int) -> None:
        if self._switch_at is None or now_us < self._switch_at:
            return
        committed = self._commit_sent if self.role == "primary" else self._commit_received
        if committed:
            if self.role == "primary":
                self.role = "secondary"
            else:
                self.role = "primary"
                self.hooks["apply_state"](self._pending_seq)
            self.swap_count += 1
            self.hooks["set_role"](self.role)
            self._log("role_swap", role=self.role, swap=self.swap_count)
        else:
            self.deferrals += 1
            self._log("swap_deferred", reason="handshake_incomplete")
        if self._froze:
            self._froze = False
            self.hooks["unfreeze"]()
        if self.next_boundary_us is not None:
            while self.next_boundary_us <= self._switch_at:
                self.next_boundary_us += self.period_us
        self._switch_at = None
        self._commit_sent = False
        self._commit_received = False

    def _log(self, category: str, **detail) -> None:
        if self.trace is not None:
            self.trace(category, detail)
