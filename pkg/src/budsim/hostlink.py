"""Per-bud host-link endpoint: single-device appearance over two buds.

The primary bud owns the host session and stamps a session-wide sequence
number on every DATA/EVENT frame it sends; the secondary reaches the host by
wrapping frames with a one-byte route tag and sending them across the bud-bud
link.  A role swap freezes egress, hands the session counter to the peer
inside the rotation handshake, and re-routes anything held, so the host
observes one gap-free, duplicate-free stream regardless of which bud is
primary.

Configuration messages arriving from the host are applied locally, forwarded
to the peer when the target peripheral executes there, or mirrored to the
peer for physical sensors that exist on both sides; every CONFIG produces
exactly one CONFIG_RESP echoing the request's sequence number.
"""

from __future__ import annotations

from collections import deque
from dataclasses import replace

from . import wire
from .core import PeripheralState
from .imc import DEST_LOCAL, ImcMessage, decode_tunnel, encode_tunnel
from .wire import (
    ErrCode,
    FrameDecoder,
    HostFrame,
    MsgType,
    ROUTE_TO_HOST,
    ROUTE_TO_PEER,
    ROUTE_TO_PERIPH_ON_PEER,
    encode_frame,
    fragment_payload,
)

HOLD_BOUND = 256


class HostlinkError(Exception):
    pass


class LinkDown(HostlinkError):
    pass


class PeripheralDisabled(HostlinkError):
    pass


class Router:
    """Routing and framing state for one bud."""

    def __init__(self, side: str, registry, trace=None):
        self.side = side
        self.registry = registry
        self.trace = trace
        self.role = "primary"
        self.host_up = True
        self.session_seq = 0
        self.frozen = False
        self._hold: deque[HostFrame] = deque()
        self.hold_dropped = 0
        self._host_decoder = FrameDecoder()
        # wired by the node/simulator
        self.send_peer_raw = lambda data: False      # bytes -> accepted
        self.send_host_raw = lambda data: False
        self.config_targets: dict[int, object] = {}  # periph -> callable(ep, bytes)
        self.config_owner = lambda periph: "local"   # "local" | "peer"
        self.mirror_filter = lambda periph: True     # mirror CONFIG to peer?
        self.on_imc_remote = lambda msg: None        # tunnel delivery into the bus
        self.on_config_applied = lambda periph, ep, value: None
        self.counters = {"tx_host": 0, "tx_peer": 0, "rx_host": 0, "rx_peer": 0}

    # -- outbound ---------------------------------------------------------

    def send_data(self, peripheral: int, payload: bytes) -> int:
        return self._send_logical(MsgType.DATA, peripheral, payload)

    def send_event(self, peripheral: int, payload: bytes) -> int:
        return self._send_logical(MsgType.EVENT, peripheral, payload)

    def _send_logical(self, msg_type: MsgType, peripheral: int, payload: bytes) -> int:
        desc_state = self.registry.state(peripheral)  # raises UnknownPeripheral
        if desc_state is not PeripheralState.ENABLED:
            raise PeripheralDisabled(f"peripheral {peripheral:#04x} is {desc_state.value}")
        n = 0
        for chunk in fragment_payload(payload):
            self._egress(HostFrame(msg_type, peripheral, payload=chunk))
            n += 1
        return n

    def _egress(self, frame: HostFrame) -> None:
        """Move one frame toward the host from wherever we currently stand."""
        if self.role == "primary":
            if self.frozen:
                self._hold_frame(frame)
                return
            if not self.host_up:
                raise LinkDown("host session down")
            if frame.msg_type in (MsgType.DATA, MsgType.EVENT):
                frame = replace(frame, seq=self.session_seq)
                self.session_seq = (self.session_seq + 1) & 0xFFFF
            self.counters["tx_host"] += 1
            self.send_host_raw(encode_frame(frame))
        else:
            self._send_tagged(ROUTE_TO_HOST, frame)

    def _hold_frame(self, frame: HostFrame) -> None:
        if len(self._hold) >= HOLD_BOUND:
            self._hold.popleft()
            self.hold_dropped += 1
        self._hold.append(frame)

    def _send_tagged(self, tag: int, frame: HostFrame) -> None:
        self.counters["tx_peer"] += 1
        self.send_peer_raw(bytes([tag]) + encode_frame(frame))

    def forward_to_peer(self, frame: HostFrame, tag: int = ROUTE_TO_PEER) -> None:
        self._send_tagged(tag, frame)

    def forward_imc(self, msg: ImcMessage, mask: int) -> None:
        """Bus hook: ship PEER/ECOSYSTEM copies as tunnel Event frames."""
        payload = fragment_payload(encode_tunnel(msg))[0]
        frame = HostFrame(MsgType.EVENT, 0x00, payload=payload)
        if mask & 0x02:  # DEST_PEER
            self._send_tagged(ROUTE_TO_PEER, frame)
        if mask & 0x04:  # DEST_ECOSYSTEM
            self._egress(frame)

    # -- role management ----------------------------------------------------

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False
        held, self._hold = list(self._hold), deque()
        for frame in held:
            self._egress(frame)

    def collect_session(self) -> int:
        return self.session_seq

    def apply_session(self, seq: int) -> None:
        self.session_seq = seq

    def set_role(self, role: str) -> None:
        self.role = role

    # -- inbound ------------------------------------------------------------

    def on_host_bytes(self, data: bytes) -> None:
        for frame in self._host_decoder.feed(data):
            self.counters["rx_host"] += 1
            self._handle_host_frame(frame)

    def on_peer_bytes(self, data: bytes) -> None:
        # the bud-bud link carries whole [tag][frame] units
        tag = data[0]
        frame, _ = wire.decode_frame(data[1:])
        self.counters["rx_peer"] += 1
        self._dispatch_peer(tag, frame)

    def _dispatch_peer(self, tag: int, frame: HostFrame) -> None:
        if tag == ROUTE_TO_HOST:
            self._egress(frame)
        elif tag == ROUTE_TO_PEER:
            if frame.peripheral == 0x00 and frame.msg_type is MsgType.EVENT:
                msg = decode_tunnel(frame.payload[1:], DEST_LOCAL)
                self.on_imc_remote(msg)
            elif frame.msg_type is MsgType.CONFIG:
                self._apply_config(frame, respond=False)
        elif tag == ROUTE_TO_PERIPH_ON_PEER:
            if frame.msg_type is MsgType.CONFIG:
                resp = self._apply_config(frame, respond=True)
                self._egress(resp)

    def _handle_host_frame(self, frame: HostFrame) -> None:
        if frame.msg_type is MsgType.CONFIG:
            if self.config_owner(frame.peripheral) == "peer":
                self._send_tagged(ROUTE_TO_PERIPH_ON_PEER, frame)
                return
            resp = self._apply_config(frame, respond=True)
            self._egress(resp)
            if resp.err_code == ErrCode.OK and self.mirror_filter(frame.peripheral):
                self._send_tagged(ROUTE_TO_PEER, frame)
        elif frame.peripheral == 0x00 and frame.msg_type is MsgType.EVENT:
            msg = decode_tunnel(frame.payload[1:], DEST_LOCAL)
            self.on_imc_remote(msg)

    def _apply_config(self, frame: HostFrame, respond: bool) -> HostFrame:
        target = self.config_targets.get(frame.peripheral)
        if target is None:
            err, echo = (
                (ErrCode.UNKNOWN_PERIPHERAL, b"")
                if frame.peripheral not in self.registry
                else (ErrCode.UNKNOWN_ENDPOINT, b"")
            )
        else:
            err, echo = target(frame.endpoint, frame.payload)
        if err == ErrCode.OK:
            self.on_config_applied(frame.peripheral, frame.endpoint, frame.payload)
        return HostFrame(
            MsgType.CONFIG_RESP,
            frame.peripheral,
            endpoint=frame.endpoint,
            err_code=int(err),
            seq=frame.seq,
            payload=echo,
        )
