"""Shared domain types: peripheral ids, registry, sample frames, virtual clock.

Everything that crosses a module or node boundary is defined here so the
protocol, sensor and policy layers agree on one vocabulary.  Samples are
kept as raw 32-bit signed integers in sensor units; per-peripheral scale
factors map them to physical units at the edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

# Well-known peripheral ids (normative table, stable across nodes).
PERIPH_IMC_TUNNEL = 0x00  # reserved: bus messages encapsulated over the host link
PERIPH_PPG = 0x01
PERIPH_IMU9 = 0x02
PERIPH_TEMP = 0x03
PERIPH_MIC_IN = 0x04
PERIPH_MIC_OUT_TOP = 0x05
PERIPH_MIC_OUT_BOT = 0x06
PERIPH_HR = 0x10
PERIPH_HRV = 0x11
PERIPH_SPO2 = 0x12
PERIPH_RR = 0x13
PERIPH_BP = 0x14
PERIPH_TEMP_CORE = 0x15
PERIPH_MLC = 0x20
PERIPH_CNN = 0x21

PERIPH_NAMES = {
    PERIPH_IMC_TUNNEL: "imc",
    PERIPH_PPG: "ppg",
    PERIPH_IMU9: "imu9",
    PERIPH_TEMP: "temp",
    PERIPH_MIC_IN: "mic_in",
    PERIPH_MIC_OUT_TOP: "mic_out_top",
    PERIPH_MIC_OUT_BOT: "mic_out_bot",
    PERIPH_HR: "hr",
    PERIPH_HRV: "hrv",
    PERIPH_SPO2: "spo2",
    PERIPH_RR: "rr",
    PERIPH_BP: "bp",
    PERIPH_TEMP_CORE: "temp_core",
    PERIPH_MLC: "mlc",
    PERIPH_CNN: "cnn",
}

# Raw-count scale factors: physical value = raw * scale.
PERIPH_SCALES = {
    PERIPH_PPG: 1.0,          # photodiode counts
    PERIPH_IMU9: 1e-3,        # accel mg -> g, gyro mdps -> dps, mag x1e-3 uT
    PERIPH_TEMP: 1e-3,        # milli-degC -> degC
    PERIPH_MIC_IN: 1.0 / 32768.0,
    PERIPH_MIC_OUT_TOP: 1.0 / 32768.0,
    PERIPH_MIC_OUT_BOT: 1.0 / 32768.0,
    PERIPH_TEMP_CORE: 1e-3,
}


class PeripheralKind(Enum):
    PHYSICAL = "physical"
    VIRTUAL = "virtual"


class PeripheralState(Enum):
    DISABLED = "disabled"
    ENABLED = "enabled"
    ERROR = "error"


class BudSide(Enum):
    LEFT = "left"
    RIGHT = "right"
    BOTH = "both"


class CoreError(Exception):
    """Base class for registry and frame errors."""


class DuplicateId(CoreError):
    pass


class InvalidDescriptor(CoreError):
    pass


class UnknownPeripheral(CoreError):
    pass


@dataclass(frozen=True)
class PeripheralDescriptor:
    """An addressable physical sensor or virtual (derived-signal) endpoint.

    ``config_endpoints`` maps endpoint id -> value schema ("u8", "u16" or
    "bytes").  Virtual peripherals list the physical ids they depend on;
    enabling a virtual peripheral enables those dependencies.
    """

    id: int
    kind: PeripheralKind
    name: str
    config_endpoints: dict[int, str] = field(default_factory=dict)
    owner_bud: BudSide = BudSide.BOTH
    depends_on: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.id <= 0xFF:
            raise InvalidDescriptor(f"peripheral id {self.id:#x} out of 8-bit range")
        for ep in self.config_endpoints:
            if not 0 <= ep <= 0xFF:
                raise InvalidDescriptor(f"endpoint id {ep:#x} out of 8-bit range")
        if self.kind is PeripheralKind.PHYSICAL and self.depends_on:
            raise InvalidDescriptor("physical peripheral cannot declare dependencies")


class PeripheralRegistry:
    """Node-local table of registered peripherals and their states.

    Lookups are total over registered ids and raise ``UnknownPeripheral``
    otherwise.  State changes invoke ``on_state_change`` (the node wires this
    to a bus notification) after the registry has been updated.
    """

    def __init__(self):
        self._descs: dict[int, PeripheralDescriptor] = {}
        self._states: dict[int, PeripheralState] = {}
        self.on_state_change = None  # callable(id, old, new) or None

    def register(self, desc: PeripheralDescriptor) -> int:
        if desc.id in self._descs:
            raise DuplicateId(f"peripheral {desc.id:#04x} already registered")
        for dep in desc.depends_on:
            if dep not in self._descs:
                raise InvalidDescriptor(f"dependency {dep:#04x} not registered")
        self._descs[desc.id] = desc
        self._states[desc.id] = PeripheralState.DISABLED
        return desc.id

    def get(self, periph_id: int) -> PeripheralDescriptor:
        try:
            return self._descs[periph_id]
        except KeyError:
            raise UnknownPeripheral(f"peripheral {periph_id:#04x} not registered") from None

    def __contains__(self, periph_id: int) -> bool:
        return periph_id in self._descs

    def __len__(self) -> int:
        return len(self._descs)

    def ids(self) -> list[int]:
        return sorted(self._descs)

    def state(self, periph_id: int) -> PeripheralState:
        if periph_id not in self._states:
            raise UnknownPeripheral(f"peripheral {periph_id:#04x} not registered")
        return self._states[periph_id]

    def set_state(self, periph_id: int, state: PeripheralState) -> PeripheralState:
        """Set a peripheral's state; returns the previous state.

        Enabling a virtual peripheral enables the physical peripherals it
        depends on.
        """
        desc = self.get(periph_id)
        prev = self._states[periph_id]
        if state is prev:
            return prev
        self._states[periph_id] = state
        if self.on_state_change is not None:
            self.on_state_change(periph_id, prev, state)
        if state is PeripheralState.ENABLED:
            for dep in desc.depends_on:
                if self._states.get(dep) is not PeripheralState.ENABLED:
                    self.set_state(dep, PeripheralState.ENABLED)
        return prev


@dataclass
class SampleFrame:
    """A timestamped, channel-major block of raw integer samples.

    Frames from one subscription are contiguous: the next frame's ``t0_us``
    equals this frame's ``end_us()``.  Emitters must pick block sizes whose
    duration is a whole number of microseconds.
    """

    peripheral: int
    t0_us: int
    fs: int
    channels: tuple[str, ...]
    data: np.ndarray  # int32, shape (n_channels, n_samples)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int32)
        if self.data.ndim == 1:
            self.data = self.data.reshape(1, -1)
        if self.data.shape[0] != len(self.channels):
            raise ValueError(
                f"data has {self.data.shape[0]} rows for {len(self.channels)} channels"
            )
        if self.fs <= 0:
            raise ValueError("fs must be positive")

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def duration_us(self) -> int:
        us = self.n_samples * 1_000_000
        if us % self.fs:
            raise ValueError(
                f"{self.n_samples} samples at {self.fs} Hz is not a whole number of us"
            )
        return us // self.fs

    def end_us(self) -> int:
        return self.t0_us + self.duration_us()

    def times_s(self) -> np.ndarray:
        return self.t0_us / 1e6 + np.arange(self.n_samples) / self.fs

    def to_physical(self) -> np.ndarray:
        scale = PERIPH_SCALES.get(self.peripheral, 1.0)
        return self.data.astype(np.float64) * scale

    def slice_samples(self, start: int, stop: int) -> "SampleFrame":
        t0 = self.t0_us + start * 1_000_000 // self.fs
        return replace(self, t0_us=t0, data=self.data[:, start:stop])


def concat_frames(frames: list[SampleFrame]) -> SampleFrame:
    """Stitch contiguous frames into one; raises on gaps or overlaps."""
    if not frames:
        raise ValueError("no frames to concatenate")
    first = frames[0]
    for prev, cur in zip(frames, frames[1:]):
        if cur.t0_us != prev.end_us():
            raise ValueError(f"frames not contiguous: {prev.end_us()} != {cur.t0_us}")
        if cur.fs != first.fs or cur.channels != first.channels:
            raise ValueError("frames disagree on rate or channel layout")
    data = np.concatenate([f.data for f in frames], axis=1)
    return replace(first, data=data)


class ClockMode(Enum):
    VIRTUAL = "virtual"
    REALTIME = "realtime"


class VirtualClock:
    """Monotonic microsecond clock; in virtual mode only the scheduler advances it."""

    def __init__(self, mode: ClockMode = ClockMode.VIRTUAL):
        self.now_us: int = 0
        self.mode = mode

    def advance_to(self, t_us: int) -> None:
        if t_us < self.now_us:
            raise ValueError(f"clock moving backwards: {t_us} < {self.now_us}")
        self.now_us = t_us

    @property
    def now_s(self) -> float:
        return self.now_us / 1e6
