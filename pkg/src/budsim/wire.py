"""Bit-exact host-link frame codec, fragmentation sub-layer and payload packing.

Wire layout (little-endian)::

    B5 | type:1 | periph:1 | endpoint:1 | err:1 | seq:2 | len:2 | payload:len | crc:2

The CRC is CRC-16/CCITT-FALSE over every byte preceding it, magic included.
``endpoint`` is meaningful for CONFIG/CONFIG_RESP only (else 0); ``err`` for
CONFIG_RESP only.  DATA and EVENT frame payloads carry a one-byte fragment
header (bit0 = first, bit1 = last chunk) so logical payloads up to 64 KiB can
ride across frames bounded by the 244-byte MTU; CONFIG payloads are raw and
must fit one frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

MAGIC = 0xB5
HEADER_LEN = 9   # magic..len inclusive
CRC_LEN = 2
MIN_FRAME_LEN = HEADER_LEN + CRC_LEN
MTU = 244                 # max payload bytes per frame
FRAG_FIRST = 0x01
FRAG_LAST = 0x02
FRAG_OVERHEAD = 1
MAX_LOGICAL_PAYLOAD = 64 * 1024


class MsgType(IntEnum):
    DATA = 0
    EVENT = 1
    CONFIG = 2
    CONFIG_RESP = 3


class ErrCode(IntEnum):
    OK = 0
    UNKNOWN_PERIPHERAL = 1
    UNKNOWN_ENDPOINT = 2
    BAD_VALUE = 3
    BUSY = 4


# Config endpoints (normative).
EP_SAMPLING_RATE_HZ = 0x01   # u16
EP_POWER_MODE = 0x02         # u8
EP_LED_CURRENT_MA = 0x03     # u8, PPG only
EP_ENABLE = 0x04             # u8 bool
EP_WINDOW_LEN_MS = 0x05      # u16
EP_AUDIO_MODE = 0x06         # u8: 0 off, 1 ANC, 2 pass-through
EP_MODEL_XFER = 0x10         # model transfer sub-protocol (CNN peripheral)

# Route tags prefixed to frames crossing the bud-bud link.
ROUTE_TO_HOST = 0x01
ROUTE_TO_PEER = 0x02
ROUTE_TO_PERIPH_ON_PEER = 0x03


class WireError(Exception):
    pass


class PayloadTooLarge(WireError):
    pass


class BadMagic(WireError):
    """First byte is not the magic; ``resync`` is the offset of the next candidate."""

    def __init__(self, resync: int):
        super().__init__(f"bad magic, next candidate at +{resync}")
        self.resync = resync


class Truncated(WireError):
    """Buffer ends mid-frame; ``needed`` is the minimum total length required."""

    def __init__(self, needed: int):
        super().__init__(f"need {needed} bytes")
        self.needed = needed


class CrcMismatch(WireError):
    pass


def _crc16_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
        table.append(crc)
    return table


_CRC_TABLE = _crc16_table()


def crc16(data: bytes, crc: int = 0xFFFF) -> int:
    """CRC-16/CCITT-FALSE (poly 0x1021, init 0xFFFF, no reflection)."""
    for b in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[(crc >> 8) ^ b]
    return crc


@dataclass(frozen=True)
class HostFrame:
    msg_type: MsgType
    peripheral: int
    endpoint: int = 0
    err_code: int = 0
    seq: int = 0
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.peripheral <= 0xFF:
            raise ValueError("peripheral out of range")
        if not 0 <= self.endpoint <= 0xFF:
            raise ValueError("endpoint out of range")
        if not 0 <= self.seq <= 0xFFFF:
            raise ValueError("seq out of range")
        if self.msg_type not in (MsgType.CONFIG, MsgType.CONFIG_RESP) and self.endpoint:
            raise ValueError("endpoint reserved for CONFIG/CONFIG_RESP")
        if self.msg_type is not MsgType.CONFIG_RESP and self.err_code:
            raise ValueError("err_code reserved for CONFIG_RESP")


def encode_frame(frame: HostFrame) -> bytes:
    if len(frame.payload) > 0xFFFF:
        raise PayloadTooLarge(f"{len(frame.payload)} > 65535")
    head = struct.pack(
        "<BBBBBHH",
        MAGIC,
        int(frame.msg_type),
        frame.peripheral,
        frame.endpoint,
        frame.err_code,
        frame.seq,
        len(frame.payload),
    )
    body = head + frame.payload
    return body + struct.pack("<H", crc16(body))


def decode_frame(buf: bytes) -> tuple[HostFrame, int]:
    """Parse one frame from the head of ``buf``; returns (frame, bytes consumed).

    Raises ``BadMagic`` (with the offset of the next magic candidate),
    ``Truncated`` (more bytes needed) or ``CrcMismatch``.
    """
    if len(buf) < 1:
        raise Truncated(MIN_FRAME_LEN)
    if buf[0] != MAGIC:
        nxt = buf.find(bytes([MAGIC]), 1)
        raise BadMagic(nxt if nxt >= 0 else len(buf))
    if len(buf) < HEADER_LEN:
        raise Truncated(MIN_FRAME_LEN)
    _, mtype, periph, endpoint, err, seq, plen = struct.unpack("<BBBBBHH", buf[:HEADER_LEN])
    total = HEADER_LEN + plen + CRC_LEN
    if len(buf) < total:
        raise Truncated(total)
    (crc_rx,) = struct.unpack("<H", buf[total - CRC_LEN : total])
    if crc16(buf[: total - CRC_LEN]) != crc_rx:
        raise CrcMismatch(f"frame at seq={seq}")
    if mtype > 3:
        raise CrcMismatch(f"impossible msg_type {mtype} passed CRC")  # defensive
    return (
        HostFrame(
            msg_type=MsgType(mtype),
            peripheral=periph,
            endpoint=endpoint,
            err_code=err,
            seq=seq,
            payload=bytes(buf[HEADER_LEN : HEADER_LEN + plen]),
        ),
        total,
    )


class FrameDecoder:
    """Streaming decoder: buffers bytes, yields frames, resyncs on corruption."""

    def __init__(self):
        self._buf = bytearray()
        self.crc_errors = 0
        self.sync_losses = 0

    def feed(self, data: bytes) -> list[HostFrame]:
        self._buf.extend(data)
        out = []
        while self._buf:
            try:
                frame, consumed = decode_frame(bytes(self._buf))
            except Truncated:
                break
            except BadMagic as e:
                self.sync_losses += 1
                del self._buf[: max(e.resync, 1)]
                continue
            except CrcMismatch:
                self.crc_errors += 1
                # Length may itself be corrupt: skip the magic and rescan.
                nxt = self._buf.find(bytes([MAGIC]), 1)
                del self._buf[: nxt if nxt >= 0 else len(self._buf)]
                continue
            out.append(frame)
            del self._buf[:consumed]
        return out


def fragment_payload(payload: bytes, mtu: int = MTU) -> list[bytes]:
    """Split a logical DATA/EVENT payload into fragment-tagged frame payloads."""
    if len(payload) > MAX_LOGICAL_PAYLOAD:
        raise PayloadTooLarge(f"{len(payload)} > {MAX_LOGICAL_PAYLOAD}")
    room = mtu - FRAG_OVERHEAD
    chunks = [payload[i : i + room] for i in range(0, len(payload), room)] or [b""]
    out = []
    for i, chunk in enumerate(chunks):
        flags = (FRAG_FIRST if i == 0 else 0) | (FRAG_LAST if i == len(chunks) - 1 else 0)
        out.append(bytes([flags]) + chunk)
    return out


class FragmentError(WireError):
    pass


class Reassembler:
    """Rebuilds logical payloads from fragment-tagged DATA/EVENT frames.

    Keyed by (peripheral, msg_type); fragments of one train arrive in order
    and carry consecutive frame sequence numbers, so a missing middle
    fragment is detected as a seq jump and the partial train is dropped
    (counted in ``aborted``) rather than surfaced corrupt.
    """

    def __init__(self):
        self._partial: dict[tuple[int, int], tuple[bytearray, int]] = {}
        self.aborted = 0

    def feed(self, frame: HostFrame) -> bytes | None:
        if not frame.payload:
            raise FragmentError("missing fragment header")
        flags = frame.payload[0]
        chunk = frame.payload[1:]
        key = (frame.peripheral, int(frame.msg_type))
        if flags & FRAG_FIRST:
            if key in self._partial:
                self.aborted += 1
            buf = bytearray()
        else:
            entry = self._partial.pop(key, None)
            if entry is None:
                self.aborted += 1
                return None
            buf, last_seq = entry
            if frame.seq != (last_seq + 1) & 0xFFFF:
                self.aborted += 1
                return None
        buf.extend(chunk)
        if flags & FRAG_LAST:
            return bytes(buf)
        self._partial[key] = (buf, frame.seq)
        return None


# --- payload packing -------------------------------------------------------

SAMPLE_HEADER = struct.Struct("<QIBH")  # t0_us, fs, n_channels, n_samples


def pack_samples(t0_us: int, fs: int, data) -> bytes:
    """Serialize a channel-major int32 sample block for a DATA message."""
    import numpy as np

    arr = np.ascontiguousarray(data, dtype="<i4")
    n_ch, n_s = arr.shape
    return SAMPLE_HEADER.pack(t0_us, fs, n_ch, n_s) + arr.tobytes()


def unpack_samples(payload: bytes):
    import numpy as np

    t0_us, fs, n_ch, n_s = SAMPLE_HEADER.unpack_from(payload)
    arr = np.frombuffer(payload, dtype="<i4", offset=SAMPLE_HEADER.size, count=n_ch * n_s)
    return t0_us, fs, arr.reshape(n_ch, n_s).copy()


def pack_vital(value: float) -> bytes:
    """Vitals event payload: value x100 as little-endian i32 fixed point."""
    return struct.pack("<i", round(value * 100))


def unpack_vital(payload: bytes) -> float:
    return struct.unpack("<i", payload[:4])[0] / 100.0
