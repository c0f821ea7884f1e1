"""Scenario configuration: a declarative description of one simulation run.

Scenarios are YAML files (see ``scenarios/``) mapping onto the dataclasses
below; every field has a default so minimal files stay small.  Loading
validates ranges and raises ``InvalidScenario`` with the offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .sensorsim import MotionProfile, TempProfile


class InvalidScenario(Exception):
    pass


@dataclass
class SubjectConfig:
    hr_bpm: float = 64.0
    rr_bpm: float = 15.0
    riiv_depth: float = 0.01
    ac_dc_green: float = 0.05
    ac_dc_red: float = 0.02
    ac_dc_ir: float = 0.04
    noise_rms: float = 5.0
    ibi_jitter_ms: float = 0.0
    vtt_ms: float = 120.0
    temp_c: float = 36.9
    temp_ramp_end_c: float | None = None
    motion: MotionProfile = field(default_factory=MotionProfile)

    def temp_profile(self) -> TempProfile:
        if self.temp_ramp_end_c is not None:
            return TempProfile("ramp", self.temp_c, self.temp_ramp_end_c)
        return TempProfile("constant", self.temp_c)


@dataclass
class LinkConfig:
    host_latency_ms: float = 10.0
    host_loss_pct: float = 0.0
    peer_latency_ms: float = 5.0
    host_partitions_s: list = field(default_factory=list)   # [[start, end], ...]
    peer_partitions_s: list = field(default_factory=list)


@dataclass
class VitalsAppConfig:
    enabled: bool = True
    ppg_rate_hz: int = 50
    window_s: int = 12
    hr_period_s: int = 2
    spo2_period_s: int = 10
    rr_period_s: int = 30
    rr_window_s: int = 64
    temp_period_s: int = 5


@dataclass
class BpModelConfig:
    a_s: float = 50.0
    b_s: float = 8.0
    c_s: float = 0.05
    a_d: float = 30.0
    b_d: float = 5.0
    c_d: float = 0.02


@dataclass
class BpAppConfig:
    enabled: bool = False
    period_s: int = 20
    window_s: int = 40
    ppg_rate_hz: int = 50
    model: BpModelConfig = field(default_factory=BpModelConfig)


@dataclass
class RecordingConfig:
    host: bool = False            # host subscribes to raw streams over the wire
    device: bool = True           # buds keep local CSV buffers
    ppg: bool = True
    imu: bool = True
    temp: bool = True
    ppg_rate_hz: int = 50
    imu_rate_hz: int = 100
    temp_rate_hz: int = 32


@dataclass
class RotationConfig:
    enabled: bool = True
    period_s: float = 300.0


@dataclass
class AudioScenarioConfig:
    mode: str = "off"
    playback: bool = False
    call: bool = False
    fast_fs: int = 64_000


@dataclass
class NativeRates:
    ppg_hz: int = 200
    imu_hz: int = 200
    temp_hz: int = 32
    audio_hz: int = 16_000


@dataclass
class Scenario:
    name: str = "default"
    seed: int = 0
    duration_s: float = 120.0
    initial_primary: str = "left"
    policy: str = "balance_energy"
    reassign_period_s: float = 60.0
    subject: SubjectConfig = field(default_factory=SubjectConfig)
    links: LinkConfig = field(default_factory=LinkConfig)
    vitals: VitalsAppConfig = field(default_factory=VitalsAppConfig)
    bp: BpAppConfig = field(default_factory=BpAppConfig)
    recording: RecordingConfig = field(default_factory=RecordingConfig)
    rotation: RotationConfig = field(default_factory=RotationConfig)
    audio: AudioScenarioConfig = field(default_factory=AudioScenarioConfig)
    native: NativeRates = field(default_factory=NativeRates)

    def validate(self) -> "Scenario":
        if self.duration_s <= 0:
            raise InvalidScenario("duration_s must be positive")
        if not 0 <= self.links.host_loss_pct < 100 and self.links.host_loss_pct != 100:
            raise InvalidScenario("host_loss_pct outside [0, 100]")
        if self.links.host_loss_pct < 0 or self.links.host_loss_pct > 100:
            raise InvalidScenario("host_loss_pct outside [0, 100]")
        if self.initial_primary not in ("left", "right"):
            raise InvalidScenario("initial_primary must be left or right")
        if self.policy not in ("balance_energy", "pin_left", "pin_right"):
            raise InvalidScenario(f"unknown policy {self.policy!r}")
        if self.audio.mode not in ("off", "anc", "passthrough"):
            raise InvalidScenario(f"unknown audio mode {self.audio.mode!r}")
        for fieldname in ("ppg_hz", "imu_hz", "temp_hz", "audio_hz"):
            if getattr(self.native, fieldname) <= 0:
                raise InvalidScenario(f"native.{fieldname} must be positive")
        for window in (*self.links.host_partitions_s, *self.links.peer_partitions_s):
            if len(window) != 2 or window[0] >= window[1]:
                raise InvalidScenario(f"bad partition window {window}")
        return self


def _build(cls, data, path=""):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidScenario(f"{path or cls.__name__}: expected a mapping")
    kwargs = {}
    hints = {f.name: f for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    for key, value in data.items():
        if key not in hints:
            raise InvalidScenario(f"unknown field {path}{key}")
        kwargs[key] = value
    return cls(**kwargs)


def scenario_from_dict(data: dict) -> Scenario:
    data = dict(data or {})
    sub = dict(data.pop("subject", {}) or {})
    motion = sub.pop("motion", None)
    subject = _build(SubjectConfig, sub, "subject.")
    if motion:
        subject.motion = MotionProfile(**motion)
    bp_data = dict(data.pop("bp", {}) or {})
    model = bp_data.pop("model", None)
    bp = _build(BpAppConfig, bp_data, "bp.")
    if model:
        bp.model = _build(BpModelConfig, model, "bp.model.")
    try:
        scenario = Scenario(
            subject=subject,
            bp=bp,
            links=_build(LinkConfig, data.pop("links", None), "links."),
            vitals=_build(VitalsAppConfig, data.pop("vitals", None), "vitals."),
            recording=_build(RecordingConfig, data.pop("recording", None), "recording."),
            rotation=_build(RotationConfig, data.pop("rotation", None), "rotation."),
            audio=_build(AudioScenarioConfig, data.pop("audio", None), "audio."),
            native=_build(NativeRates, data.pop("native", None), "native."),
            **data,
        )
    except TypeError as e:
        raise InvalidScenario(str(e)) from e
    return scenario.validate()


def load_scenario(path: str | Path) -> Scenario:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    try:
        return scenario_from_dict(data)
    except TypeError as e:
        raise InvalidScenario(str(e)) from e
