import random

import pytest
from hypothesis import given, settings, strategies as st

from budsim import wire
from budsim.wire import (
    BadMagic,
    CrcMismatch,
    ErrCode,
    FrameDecoder,
    HostFrame,
    MsgType,
    PayloadTooLarge,
    Reassembler,
    Truncated,
    crc16,
    decode_frame,
    encode_frame,
    fragment_payload,
)


def test_crc16_check_value():
    # CRC-16/CCITT-FALSE reference check value.
    assert crc16(b"123456789") == 0x29B1


def test_empty_payload_frame_length():
    # 9-byte header + 2-byte CRC per the wire layout.
    raw = encode_frame(HostFrame(MsgType.EVENT, 0x10, seq=1))
    assert len(raw) == 11
    frame, consumed = decode_frame(raw)
    assert consumed == 11
    assert frame.payload == b""
    assert frame.seq == 1


def frame_strategy():
    config = st.sampled_from([MsgType.CONFIG, MsgType.CONFIG_RESP])
    plain = st.sampled_from([MsgType.DATA, MsgType.EVENT])

    def build(mtype, periph, endpoint, err, seq, payload):
        if mtype in (MsgType.DATA, MsgType.EVENT):
            endpoint = 0
        if mtype is not MsgType.CONFIG_RESP:
            err = 0
        return HostFrame(mtype, periph, endpoint, err, seq, payload)

    return st.builds(
        build,
        st.one_of(plain, config),
        st.integers(0, 255),
        st.integers(0, 255),
        st.integers(0, 4),
        st.integers(0, 0xFFFF),
        st.binary(max_size=600),
    )


@given(frame_strategy())
def test_roundtrip_identity(frame):
    raw = encode_frame(frame)
    decoded, consumed = decode_frame(raw)
    assert decoded == frame
    assert consumed == len(raw)


def _random_frame(rng):
    mtype = MsgType(rng.randrange(4))
    endpoint = rng.randrange(256) if mtype in (MsgType.CONFIG, MsgType.CONFIG_RESP) else 0
    err = rng.randrange(5) if mtype is MsgType.CONFIG_RESP else 0
    payload = rng.randbytes(rng.randrange(0, 300))
    return HostFrame(mtype, rng.randrange(256), endpoint, err, rng.randrange(0x10000), payload)


def test_roundtrip_bulk_10k():
    rng = random.Random(0xB5)
    for _ in range(10_000):
        frame = _random_frame(rng)
        decoded, consumed = decode_frame(encode_frame(frame))
        assert decoded == frame


def test_single_byte_mutation_detected():
    rng = random.Random(7)
    for _ in range(2_000):
        frame = _random_frame(rng)
        raw = bytearray(encode_frame(frame))
        pos = rng.randrange(len(raw))
        old = raw[pos]
        raw[pos] = old ^ (1 << rng.randrange(8))
        try:
            decoded, consumed = decode_frame(bytes(raw))
        except (BadMagic, Truncated, CrcMismatch):
            continue
        # A fluke parse must never reproduce the original frame silently.
        assert decoded != frame or consumed != len(raw)


def test_two_frames_back_to_back():
    a = HostFrame(MsgType.DATA, 0x01, payload=b"\x03abc", seq=5)
    b = HostFrame(MsgType.EVENT, 0x10, payload=b"\x03hr", seq=6)
    raw = encode_frame(a) + encode_frame(b)
    f1, c1 = decode_frame(raw)
    f2, c2 = decode_frame(raw[c1:])
    assert (f1, f2) == (a, b)
    assert c1 + c2 == len(raw)


def test_garbage_prefix_then_resync():
    frame = HostFrame(MsgType.EVENT, 0x10, seq=9, payload=b"\x03x")
    raw = b"\x00\x12\x99" + encode_frame(frame)
    with pytest.raises(BadMagic) as exc:
        decode_frame(raw)
    decoded, _ = decode_frame(raw[exc.value.resync :])
    assert decoded == frame


def test_truncated_asks_for_more():
    raw = encode_frame(HostFrame(MsgType.DATA, 1, payload=b"\x03" + b"y" * 50))
    with pytest.raises(Truncated):
        decode_frame(raw[:4])
    with pytest.raises(Truncated):
        decode_frame(raw[:-1])


def test_stream_decoder_recovers_after_corruption():
    frames = [HostFrame(MsgType.EVENT, 0x10, seq=i, payload=bytes([3, i])) for i in range(5)]
    raw = bytearray(b"".join(encode_frame(f) for f in frames))
    raw[15] ^= 0xFF  # corrupt inside the second frame
    dec = FrameDecoder()
    got = []
    for i in range(0, len(raw), 7):
        got.extend(dec.feed(bytes(raw[i : i + 7])))
    assert frames[0] in got and frames[-1] in got
    assert dec.crc_errors + dec.sync_losses >= 1
    assert frames[1] not in got


def test_oversize_payload_rejected():
    with pytest.raises(PayloadTooLarge):
        encode_frame(HostFrame(MsgType.DATA, 1, payload=b"x" * 70_000))


@settings(max_examples=40)
@given(st.binary(max_size=4000))
def test_fragmentation_roundtrip(payload):
    frames = [
        HostFrame(MsgType.DATA, 0x01, seq=i, payload=p)
        for i, p in enumerate(fragment_payload(payload))
    ]
    assert all(len(f.payload) <= wire.MTU for f in frames)
    r = Reassembler()
    outs = [r.feed(f) for f in frames]
    assert outs[-1] == payload
    assert all(o is None for o in outs[:-1])


def test_fragmentation_64k():
    payload = bytes(random.Random(1).randbytes(64 * 1024))
    chunks = fragment_payload(payload)
    assert len(chunks) == -(-len(payload) // (wire.MTU - 1))
    r = Reassembler()
    out = None
    for i, p in enumerate(chunks):
        out = r.feed(HostFrame(MsgType.DATA, 0x01, seq=i & 0xFFFF, payload=p))
    assert out == payload


def test_fragment_train_restart_counts_abort():
    r = Reassembler()
    first, *_ = fragment_payload(b"a" * 1000)
    r.feed(HostFrame(MsgType.DATA, 1, payload=first))
    full = fragment_payload(b"bb")
    assert r.feed(HostFrame(MsgType.DATA, 1, payload=full[0])) == b"bb"
    assert r.aborted == 1


def test_sample_payload_roundtrip():
    import numpy as np

    data = np.arange(60, dtype=np.int32).reshape(3, 20)
    payload = wire.pack_samples(123_456, 50, data)
    t0, fs, arr = wire.unpack_samples(payload)
    assert (t0, fs) == (123_456, 50)
    assert np.array_equal(arr, data)


def test_vital_payload_fixed_point():
    assert wire.unpack_vital(wire.pack_vital(72.0)) == 72.0
    assert wire.unpack_vital(wire.pack_vital(36.75)) == 36.75
    assert len(wire.pack_vital(98.6)) == 4
