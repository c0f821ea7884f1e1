import numpy as np
import pytest
from hypothesis import given, strategies as st

from budsim import core
from budsim.core import (
    BudSide,
    DuplicateId,
    InvalidDescriptor,
    PeripheralDescriptor,
    PeripheralKind,
    PeripheralRegistry,
    PeripheralState,
    SampleFrame,
    UnknownPeripheral,
    VirtualClock,
    concat_frames,
)


def ppg_desc():
    return PeripheralDescriptor(
        id=core.PERIPH_PPG,
        kind=PeripheralKind.PHYSICAL,
        name="ppg",
        config_endpoints={0x01: "u16", 0x03: "u8", 0x04: "u8"},
    )


def test_register_first_insertion():
    reg = PeripheralRegistry()
    assert reg.register(ppg_desc()) == 0x01
    assert len(reg) == 1
    assert reg.state(0x01) is PeripheralState.DISABLED


def test_register_duplicate_rejected():
    reg = PeripheralRegistry()
    reg.register(ppg_desc())
    with pytest.raises(DuplicateId):
        reg.register(ppg_desc())


def test_register_virtual_with_dependency():
    reg = PeripheralRegistry()
    reg.register(ppg_desc())
    hr = PeripheralDescriptor(
        id=core.PERIPH_HR,
        kind=PeripheralKind.VIRTUAL,
        name="hr",
        depends_on=(core.PERIPH_PPG,),
    )
    reg.register(hr)
    assert reg.get(core.PERIPH_HR).kind is PeripheralKind.VIRTUAL


def test_virtual_dependency_must_exist():
    reg = PeripheralRegistry()
    hr = PeripheralDescriptor(
        id=core.PERIPH_HR, kind=PeripheralKind.VIRTUAL, name="hr", depends_on=(0x01,)
    )
    with pytest.raises(InvalidDescriptor):
        reg.register(hr)


def test_physical_cannot_depend():
    with pytest.raises(InvalidDescriptor):
        PeripheralDescriptor(
            id=0x01, kind=PeripheralKind.PHYSICAL, name="x", depends_on=(0x02,)
        )


def test_set_state_returns_previous():
    reg = PeripheralRegistry()
    reg.register(ppg_desc())
    prev = reg.set_state(0x01, PeripheralState.ENABLED)
    assert prev is PeripheralState.DISABLED
    assert reg.state(0x01) is PeripheralState.ENABLED


def test_set_state_unknown_id():
    reg = PeripheralRegistry()
    with pytest.raises(UnknownPeripheral):
        reg.set_state(0xEE, PeripheralState.ENABLED)


def test_enabling_virtual_enables_dependencies():
    reg = PeripheralRegistry()
    reg.register(ppg_desc())
    reg.register(
        PeripheralDescriptor(
            id=core.PERIPH_HR,
            kind=PeripheralKind.VIRTUAL,
            name="hr",
            depends_on=(core.PERIPH_PPG,),
        )
    )
    changes = []
    reg.on_state_change = lambda pid, old, new: changes.append((pid, new))
    reg.set_state(core.PERIPH_HR, PeripheralState.ENABLED)
    assert reg.state(core.PERIPH_PPG) is PeripheralState.ENABLED
    assert (core.PERIPH_PPG, PeripheralState.ENABLED) in changes
    assert (core.PERIPH_HR, PeripheralState.ENABLED) in changes


def test_state_change_notice_fires():
    reg = PeripheralRegistry()
    reg.register(ppg_desc())
    seen = []
    reg.on_state_change = lambda pid, old, new: seen.append((pid, old, new))
    reg.set_state(0x01, PeripheralState.ENABLED)
    assert seen == [(0x01, PeripheralState.DISABLED, PeripheralState.ENABLED)]


def test_frame_shape_and_duration():
    f = SampleFrame(0x01, t0_us=0, fs=50, channels=("g",), data=np.arange(25))
    assert f.n_samples == 25
    assert f.duration_us() == 500_000
    assert f.end_us() == 500_000


def test_frame_channel_mismatch():
    with pytest.raises(ValueError):
        SampleFrame(0x01, 0, 50, ("a", "b"), np.zeros((3, 10)))


@given(st.lists(st.integers(min_value=1, max_value=40), min_size=1, max_size=12))
def test_frame_stitching_gap_free(sizes):
    # Random frame sizes at 50 Hz reconstruct one gap-free series.
    fs = 50
    t = 0
    frames = []
    total = 0
    for n in sizes:
        data = np.arange(total, total + n, dtype=np.int32)
        frames.append(SampleFrame(0x01, t, fs, ("g",), data))
        t += n * 1_000_000 // fs
        total += n
    merged = concat_frames(frames)
    assert merged.n_samples == total
    assert np.array_equal(merged.data[0], np.arange(total))


def test_frame_stitching_rejects_gap():
    a = SampleFrame(0x01, 0, 50, ("g",), np.zeros(10))
    b = SampleFrame(0x01, a.end_us() + 20_000, 50, ("g",), np.zeros(10))
    with pytest.raises(ValueError):
        concat_frames([a, b])


def test_clock_never_decreases():
    clk = VirtualClock()
    clk.advance_to(100)
    clk.advance_to(100)
    with pytest.raises(ValueError):
        clk.advance_to(99)
