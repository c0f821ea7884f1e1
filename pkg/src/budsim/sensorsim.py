"""Synthetic sensor generators with exact ground-truth markers.

Every generator is a pure function of (seed, params, duration) and emits raw
integer sample frames plus a ground-truth record for oracle testing.  The PPG
beat is an asymmetric double-Gaussian (fast upstroke, slow decay with a
secondary hump); its fiducial points (upstroke = max first derivative, peak,
dicrotic notch = first derivative minimum after the peak) are located once on
a dense grid so markers are continuous-time exact, not sample-quantised.

In-ear heart-sound bursts are placed a configured vascular transit time
before each PPG upstroke, which makes the audio/PPG pair a closed-form oracle
for transit-time estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import signal

from .core import (
    PERIPH_IMU9,
    PERIPH_MIC_IN,
    PERIPH_PPG,
    PERIPH_TEMP,
    SampleFrame,
)

# Beat template: piecewise-sigma Gaussian (rise/fall) plus a diastolic hump.
_BEAT_C1 = 0.23
_BEAT_W_RISE = 0.055
_BEAT_W_FALL = 0.17
_BEAT_A2 = 0.50
_BEAT_C2 = 0.62
_BEAT_W2 = 0.11
BEAT_T_MAX_S = 0.95   # the beat complex never stretches beyond this duration

PPG_CHANNELS = ("green", "red", "ir")
IMU_CHANNELS = ("ax", "ay", "az", "gx", "gy", "gz", "mx", "my", "mz")
DC_COUNTS_PER_MA = 10_000.0   # photodiode DC level per mA of LED drive
LED_CURRENT_MAX_MA = 50

S1_CENTER_HZ = 35.0
S1_SIGMA_S = 0.028
S1_AMPLITUDE = 3000.0

AUDIO_RATES = (8000, 16000, 48000)
TEMP_MAX_FS = 64
TEMP_ACCURACY_BAND = (35.0, 42.0)
TEMP_NOISE_IN_BAND = 0.2      # degC, uniform
TEMP_NOISE_OUT_BAND = 0.5


class SensorSimError(Exception):
    pass


class InvalidParams(SensorSimError):
    pass


class MissingTruth(SensorSimError):
    pass


def beat_template(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    w = np.where(u < _BEAT_C1, _BEAT_W_RISE, _BEAT_W_FALL)
    g1 = np.exp(-((u - _BEAT_C1) ** 2) / (2 * w**2))
    g2 = _BEAT_A2 * np.exp(-((u - _BEAT_C2) ** 2) / (2 * _BEAT_W2**2))
    return g1 + g2


@lru_cache(maxsize=1)
def beat_fiducials() -> dict:
    """Continuous-time fiducial phases of the beat template (dense-grid exact)."""
    u = np.linspace(0.0, 1.0, 400_001)
    p = beat_template(u)
    dp = np.gradient(p, u)
    i_peak = int(np.argmax(p))
    i_up = int(np.argmax(dp))
    after = dp[i_peak:]
    mins = np.where((after[1:-1] < after[:-2]) & (after[1:-1] <= after[2:]))[0] + 1
    i_notch = i_peak + int(mins[0])
    span = float(p.max() - p.min())
    return {
        "upstroke": float(u[i_up]),
        "peak": float(u[i_peak]),
        "notch": float(u[i_notch]),
        "mean": float(p.mean()),
        "span": span,
    }


def rng_for(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, *label.encode()])


@dataclass(frozen=True)
class MotionProfile:
    kind: str = "still"          # still | walk | run | nod | shake
    amplitude: float = 1.0
    rate: float = 2.0            # steps/s or cycles/s

    def __post_init__(self):
        if self.kind not in ("still", "walk", "run", "nod", "shake"):
            raise InvalidParams(f"unknown motion kind {self.kind!r}")
        if self.kind != "still" and self.rate <= 0:
            raise InvalidParams("motion rate must be positive")


@dataclass(frozen=True)
class PpgParams:
    fs: int = 50
    hr_bpm: float = 64.0
    rr_bpm: float = 15.0
    riiv_depth: float = 0.01     # fraction of DC
    ac_dc_green: float = 0.05
    ac_dc_red: float = 0.02
    ac_dc_ir: float = 0.04
    noise_rms: float = 5.0       # raw counts
    motion: MotionProfile | None = None
    led_current_ma: int = 5
    ibi_jitter_ms: float = 0.0

    def __post_init__(self):
        if self.fs < 25:
            raise InvalidParams(f"PPG fs {self.fs} < 25 Hz")
        if not 30 <= self.hr_bpm <= 220:
            raise InvalidParams(f"hr {self.hr_bpm} outside [30, 220] bpm")
        if not 4 <= self.rr_bpm <= 40:
            raise InvalidParams(f"rr {self.rr_bpm} outside [4, 40] bpm")
        for name in ("ac_dc_green", "ac_dc_red", "ac_dc_ir"):
            v = getattr(self, name)
            if not 0 < v <= 0.2:
                raise InvalidParams(f"{name}={v} outside (0, 0.2]")
        if not 1 <= self.led_current_ma <= LED_CURRENT_MAX_MA:
            raise InvalidParams(f"led current {self.led_current_ma} outside 1..{LED_CURRENT_MAX_MA} mA")


@dataclass
class GroundTruth:
    """Hidden oracle record emitted alongside synthetic streams."""

    hr_bpm: float = 0.0
    hrv_rmssd_ms: float = 0.0
    rr_bpm: float = 0.0
    spo2_pct: float = 0.0
    vtt_ms: float | None = None
    et_ms: float = 0.0
    core_temp_c: float | None = None
    peak_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    upstroke_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    notch_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    s1_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    step_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    nod_times: np.ndarray = field(default_factory=lambda: np.empty(0))


def spo2_curve(r_ratio: float) -> float:
    """Default empirical calibration: SpO2 = 110 - 25 R, clamped to [70, 100]."""
    return float(np.clip(110.0 - 25.0 * r_ratio, 70.0, 100.0))


def _beat_starts(params: PpgParams, duration_s: float, rng) -> tuple[np.ndarray, np.ndarray]:
    ibi0 = 60.0 / params.hr_bpm
    starts, ibis = [], []
    t = 0.15
    while True:
        jitter = rng.normal(0.0, params.ibi_jitter_ms / 1000.0) if params.ibi_jitter_ms else 0.0
        ibi = max(0.3, ibi0 + jitter)
        if t + min(ibi, BEAT_T_MAX_S) > duration_s:
            break
        starts.append(t)
        ibis.append(ibi)
        t += ibi
    return np.array(starts), np.array(ibis)


def _motion_artifact(seed: int, duration_s: float, fs_out: int, profile: MotionProfile) -> np.ndarray:
    """Band-limited (0.5-3 Hz) artefact, generated at a 400 Hz master rate so
    PPG and IMU streams of one scenario see the same underlying waveform."""
    master_fs = 400
    n = int(round(duration_s * master_fs))
    raw = rng_for(seed, "motion").normal(0.0, 1.0, n)
    taps = signal.firwin(401, [0.5, 3.0], fs=master_fs, pass_zero=False)
    art = signal.fftconvolve(raw, taps, mode="same")
    art /= max(np.std(art), 1e-12)
    if fs_out == master_fs:
        return art
    if master_fs % fs_out == 0:
        out = signal.resample_poly(art, 1, master_fs // fs_out)
    else:
        out = signal.resample_poly(art, fs_out, master_fs)
    return out[: int(round(duration_s * fs_out))]


def gen_ppg(params: PpgParams, duration_s: float, seed: int = 0) -> tuple[SampleFrame, GroundTruth]:
    """Three-wavelength PPG with pulse, respiratory baseline wander and noise.

    Each channel is DC*(1 + ac_dc*pulse + riiv_depth*sin(2 pi rr t)) plus
    noise and optional motion artefact; the pulse waveform is identical across
    wavelengths so AC/DC ratio arithmetic cancels the beat shape exactly.
    """
    if duration_s <= 0:
        raise InvalidParams("duration must be positive")
    rng = rng_for(seed, "ppg")
    fid = beat_fiducials()
    fs = params.fs
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs

    starts, ibis = _beat_starts(params, duration_s, rng)
    if len(starts) == 0:
        raise InvalidParams("duration too short for a single beat")
    spans = np.minimum(ibis, BEAT_T_MAX_S)
    pulse = np.zeros(n)
    for s, span in zip(starts, spans):
        u = (t - s) / span
        m = (u >= 0.0) & (u < 1.0)
        pulse[m] += beat_template(u[m])
    # normalise to unit peak-to-peak, zero mean: ac_dc is then the full swing / DC
    pulse = (pulse - fid["mean"]) / fid["span"]

    riiv = params.riiv_depth * np.sin(2 * np.pi * (params.rr_bpm / 60.0) * t)
    artifact = np.zeros(n)
    if params.motion is not None and params.motion.kind != "still":
        artifact = 0.03 * params.motion.amplitude * _motion_artifact(seed, duration_s, fs, params.motion)

    dc = DC_COUNTS_PER_MA * params.led_current_ma
    ratios = (params.ac_dc_green, params.ac_dc_red, params.ac_dc_ir)
    data = np.empty((3, n), dtype=np.int32)
    for ch, r in enumerate(ratios):
        x = dc * (1.0 + r * pulse + riiv + artifact) + rng.normal(0.0, params.noise_rms, n)
        data[ch] = np.round(x).astype(np.int64)

    r_ratio = params.ac_dc_red / params.ac_dc_ir
    truth = GroundTruth(
        hr_bpm=60.0 / float(np.mean(ibis)),
        hrv_rmssd_ms=float(np.sqrt(np.mean(np.diff(ibis) ** 2)) * 1000.0) if len(ibis) > 1 else 0.0,
        rr_bpm=params.rr_bpm,
        spo2_pct=spo2_curve(r_ratio),
        et_ms=float(np.median((fid["notch"] - fid["upstroke"]) * spans) * 1000.0),
        peak_times=starts + fid["peak"] * spans,
        upstroke_times=starts + fid["upstroke"] * spans,
        notch_times=starts + fid["notch"] * spans,
    )
    frame = SampleFrame(PERIPH_PPG, 0, fs, PPG_CHANNELS, data)
    return frame, truth


def gen_imu(
    profile: MotionProfile, fs: int, duration_s: float, seed: int = 0
) -> tuple[SampleFrame, GroundTruth]:
    """9-axis IMU stream consistent with the motion profile.

    Walk/run put step bounces on the vertical accelerometer, nod puts energy on
    the pitch gyro, shake on the yaw gyro.  Raw units: accel mg, gyro mdps,
    mag 0.01 uT.
    """
    if fs < 25:
        raise InvalidParams(f"IMU fs {fs} < 25 Hz")
    rng = rng_for(seed, "imu")
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs

    accel = rng.normal(0.0, 3.0, (3, n))
    accel[2] += 1000.0  # gravity on az, mg
    gyro = rng.normal(0.0, 40.0, (3, n))
    mag = rng.normal(0.0, 5.0, (3, n)) + np.array([[2000.0], [300.0], [4300.0]])

    truth = GroundTruth()
    if profile.kind in ("walk", "run"):
        rate = profile.rate if profile.kind == "walk" else max(profile.rate, 2.5)
        amp = 150.0 * profile.amplitude * (2.0 if profile.kind == "run" else 1.0)
        bounce = amp * np.maximum(0.0, np.sin(2 * np.pi * rate * t)) ** 2
        accel[2] += bounce
        accel[0] += 0.3 * amp * np.sin(2 * np.pi * rate * t + 0.7)
        gyro += rng.normal(0.0, 200.0 * profile.amplitude, (3, n))
        truth.step_times = np.arange(int(np.floor(duration_s * rate))) / rate
    elif profile.kind == "nod":
        amp = 30_000.0 * profile.amplitude  # mdps
        gyro[0] += amp * np.sin(2 * np.pi * profile.rate * t)
        accel[2] += 20.0 * profile.amplitude * np.sin(2 * np.pi * profile.rate * t)
        truth.nod_times = np.arange(int(np.floor(duration_s * profile.rate))) / profile.rate
    elif profile.kind == "shake":
        gyro[2] += 30_000.0 * profile.amplitude * np.sin(2 * np.pi * profile.rate * t)
    if profile.kind != "still":
        art = _motion_artifact(seed, duration_s, fs, profile)
        accel += 80.0 * profile.amplitude * art[np.newaxis, :]

    data = np.round(np.vstack([accel, gyro, mag])).astype(np.int32)
    return SampleFrame(PERIPH_IMU9, 0, fs, IMU_CHANNELS, data), truth


@dataclass(frozen=True)
class TempProfile:
    kind: str = "constant"   # constant | ramp
    value_c: float = 37.0
    end_c: float | None = None

    def at(self, t: np.ndarray, duration_s: float) -> np.ndarray:
        if self.kind == "constant":
            return np.full_like(t, self.value_c, dtype=float)
        if self.kind == "ramp":
            end = self.end_c if self.end_c is not None else self.value_c
            return self.value_c + (end - self.value_c) * (t / max(duration_s, 1e-9))
        raise InvalidParams(f"unknown temp profile {self.kind!r}")


def gen_temp(profile: TempProfile, fs: int, duration_s: float, seed: int = 0) -> SampleFrame:
    """Skin temperature stream; accuracy +/-0.2 degC inside 35..42 degC."""
    if fs > TEMP_MAX_FS:
        raise InvalidParams(f"temp fs {fs} > {TEMP_MAX_FS} Hz")
    if fs <= 0:
        raise InvalidParams("fs must be positive")
    rng = rng_for(seed, "temp")
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    base = profile.at(t, duration_s)
    in_band = (base >= TEMP_ACCURACY_BAND[0]) & (base <= TEMP_ACCURACY_BAND[1])
    noise_span = np.where(in_band, TEMP_NOISE_IN_BAND, TEMP_NOISE_OUT_BAND)
    readings = base + rng.uniform(-1.0, 1.0, n) * noise_span
    data = np.round(readings * 1000.0).astype(np.int32)  # milli-degC
    return SampleFrame(PERIPH_TEMP, 0, fs, ("skin_c",), data)


def gen_inear_audio(
    linked_truth: GroundTruth,
    fs: int,
    vtt_ms: float,
    duration_s: float,
    seed: int = 0,
    noise_rms: float = 10.0,
) -> tuple[SampleFrame, GroundTruth]:
    """In-ear microphone stream: S1 heart-sound bursts over a low noise floor.

    Each burst is a Gaussian-windowed tone centred exactly ``vtt_ms`` before
    the corresponding PPG upstroke marker, so S1 and upstroke markers differ
    by the configured transit time beat for beat.
    """
    if fs not in AUDIO_RATES:
        raise InvalidParams(f"audio fs {fs} not in {AUDIO_RATES}")
    if linked_truth is None or len(linked_truth.upstroke_times) == 0:
        raise MissingTruth("linked PPG truth with upstroke markers required")
    rng = rng_for(seed, "audio")
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    x = rng.normal(0.0, noise_rms, n)

    support = 4.0 * S1_SIGMA_S
    s1_times = []
    for up in linked_truth.upstroke_times:
        tc = up - vtt_ms / 1000.0
        if tc - support < 0.0 or tc + support > duration_s:
            continue
        lo = int((tc - support) * fs)
        hi = int((tc + support) * fs)
        seg = t[lo:hi] - tc
        x[lo:hi] += S1_AMPLITUDE * np.exp(-(seg**2) / (2 * S1_SIGMA_S**2)) * np.sin(
            2 * np.pi * S1_CENTER_HZ * seg
        )
        s1_times.append(tc)

    truth = GroundTruth(
        hr_bpm=linked_truth.hr_bpm,
        vtt_ms=vtt_ms,
        et_ms=linked_truth.et_ms,
        s1_times=np.array(s1_times),
        upstroke_times=linked_truth.upstroke_times,
    )
    data = np.clip(np.round(x), -32768, 32767).astype(np.int32)
    return SampleFrame(PERIPH_MIC_IN, 0, fs, ("mic",), data), truth
