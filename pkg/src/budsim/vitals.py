"""On-device vital-sign estimators.

Heart rate and variability come from pulse peaks, oxygen saturation from the
red/infrared ratio of ratios, respiration from the sub-hertz intensity
modulation of the PPG baseline, and blood pressure from the delay between the
S1 heart sound and the PPG upstroke (vascular transit time) combined with
ejection time through a per-subject linear model.

Timing-critical fiducials (upstroke, dicrotic notch, S1 burst centre) are
refined to sub-sample precision: the PPG is sinc-upsampled eightfold and
correlated with a derivative-of-Gaussian kernel, whose symmetric smoothing
does not bias the location of a locally symmetric slope maximum; peaks of the
audio envelope are refined by parabolic interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import SampleFrame
from .sigproc import apply_fir, dominant_frequency, envelope, fir_bandpass, quad_interp_peak

QUALITY_GATE = 0.5
IBI_VALID_RANGE = (0.27, 2.0)
UPSAMPLE = 8
_DOG_SIGMA_S = 0.008
_NOTCH_SIGMA_S = 0.02
S1_ENV_FS = 500
S1_REFRACTORY_S = 0.27
S1_MATCH_WINDOW_S = 0.4
SPO2_RANGE = (70.0, 100.0)
RR_BAND_HZ = (0.06, 0.7)
BP_SBP_CLAMP = (60.0, 250.0)
BP_DBP_CLAMP = (30.0, 150.0)


class VitalsError(Exception):
    pass


class TooShort(VitalsError):
    pass


class FlatSignal(VitalsError):
    pass


class InsufficientBeats(VitalsError):
    pass


class NoPulse(VitalsError):
    pass


class ChannelMismatch(VitalsError):
    pass


class NoRespPeak(VitalsError):
    pass


class NoSounds(VitalsError):
    pass


class NoMatches(VitalsError):
    pass


class Underdetermined(VitalsError):
    pass


class DegenerateDesign(VitalsError):
    pass


class Uncalibrated(VitalsError):
    pass


@dataclass
class PulseSeries:
    """Detected beats: strictly increasing peak times with per-beat confidence."""

    peak_times: np.ndarray
    upstroke_times: np.ndarray
    quality: np.ndarray
    notch_times: np.ndarray  # dicrotic-notch fiducials feeding ejection time

    def kept(self, gate: float = QUALITY_GATE) -> np.ndarray:
        return self.peak_times[self.quality >= gate]


@dataclass(frozen=True)
class Spo2Result:
    r_ratio: float
    spo2_pct: float
    ac_dc_red: float
    ac_dc_ir: float


@dataclass(frozen=True)
class BpFeatures:
    vtt_ms: float
    et_ms: float
    beat_count: int

    def __post_init__(self):
        if not 20.0 <= self.vtt_ms <= 400.0:
            raise ValueError(f"vtt {self.vtt_ms:.1f} ms outside [20, 400]")
        if not 150.0 <= self.et_ms <= 450.0:
            raise ValueError(f"et {self.et_ms:.1f} ms outside [150, 450]")


@dataclass(frozen=True)
class PersonalBpModel:
    a_s: float
    b_s: float
    c_s: float
    a_d: float
    b_d: float
    c_d: float
    calibrated_at: float = 0.0
    subject_id: str = ""


@dataclass(frozen=True)
class BpEstimate:
    sbp_mmhg: float
    dbp_mmhg: float
    out_of_range: bool


def _dog_kernel(sigma_s: float, fs: float) -> np.ndarray:
    n = int(6 * sigma_s * fs) | 1
    t = (np.arange(n) - n // 2) / fs
    return -t / sigma_s**2 * np.exp(-(t**2) / (2 * sigma_s**2))


def _green_channel(frame: SampleFrame) -> np.ndarray:
    if "green" in frame.channels:
        return frame.data[frame.channels.index("green")].astype(float)
    return frame.data[0].astype(float)


def _motion_mask(imu: SampleFrame, duration_s: float) -> tuple[np.ndarray, float]:
    """Per-second RMS of gravity-free acceleration magnitude (mg)."""
    acc = imu.data[:3].astype(float)
    hp = acc - acc.mean(axis=1, keepdims=True)
    mag = np.sqrt((hp**2).sum(axis=0))
    win = max(int(imu.fs), 1)
    kernel = np.ones(win) / win
    rms = np.sqrt(np.convolve(mag**2, kernel, mode="same"))
    return rms, imu.fs


def detect_pulse(ppg: SampleFrame, imu: SampleFrame | None = None) -> PulseSeries:
    """Locate beats: band-passed adaptive peak picking, then sub-sample
    refinement of upstroke (max slope) and dicrotic notch on the raw signal."""
    fs = ppg.fs
    if fs < 25:
        raise TooShort(f"fs {fs} < 25 Hz")
    x = _green_channel(ppg)
    duration = len(x) / fs
    if duration < 10.0:
        raise TooShort(f"{duration:.1f} s < 10 s of data")

    taps = fir_bandpass(0.5, 4.0, fs, transition_hz=0.4, atten_db=50)
    band = apply_fir(x - x.mean(), taps)
    swing = float(np.percentile(band, 98) - np.percentile(band, 2))
    if swing < 1e-6 * max(1.0, abs(x.mean())):
        raise FlatSignal("no pulsatile component above threshold")

    # two-pass picking: the dominant cardiac frequency sets the refractory
    # distance so diastolic humps never count as extra beats at low rates
    f0, _ = dominant_frequency(band, fs, (0.5, 4.0))
    refractory_s = float(np.clip(0.55 / max(f0, 0.5), IBI_VALID_RANGE[0], 1.5))
    height = 0.35 * float(np.percentile(band, 98))
    peaks, _ = signal.find_peaks(band, height=height, distance=int(refractory_s * fs))
    if len(peaks) < 2:
        raise FlatSignal("fewer than two peaks above threshold")
    med_ibi = float(np.median(np.diff(peaks))) / fs
    # filter edge transients produce spurious boundary peaks
    margin = int(0.4 * med_ibi * fs)
    peaks = peaks[(peaks >= margin) & (peaks < len(x) - margin)]

    up = signal.resample_poly(x - x.mean(), UPSAMPLE, 1)
    fs_up = fs * UPSAMPLE
    deriv = np.convolve(up, _dog_kernel(_DOG_SIGMA_S, fs_up), mode="same")
    # the notch sits on the slow descent: a wider kernel suppresses noise wiggles
    deriv_slow = np.convolve(up, _dog_kernel(_NOTCH_SIGMA_S, fs_up), mode="same")

    t0 = ppg.t0_us / 1e6
    peak_t, up_t, notch_t = [], [], []
    for pk in peaks:
        c = pk * UPSAMPLE
        lo = max(0, c - int(0.45 * med_ibi * fs_up))
        hi = min(len(up), c + int(0.15 * med_ibi * fs_up))
        if hi - lo < 4:
            continue
        seg = up[lo:hi]
        i_pk = int(np.argmax(seg))
        dseg = deriv[lo : lo + i_pk + 1]
        if len(dseg) < 3:
            continue
        i_up = int(np.argmax(dseg))
        # first prominent derivative minimum after the peak
        tail = deriv_slow[lo + i_pk : min(len(deriv_slow), lo + i_pk + int(0.8 * med_ibi * fs_up))]
        notch = np.nan
        if len(tail) > 4:
            cand = np.where((tail[1:-1] < tail[:-2]) & (tail[1:-1] <= tail[2:]))[0] + 1
            cand = cand[tail[cand] < 0.6 * float(tail.min())]
            if len(cand):
                notch = t0 + (lo + i_pk + quad_interp_peak(tail, int(cand[0]))) / fs_up
        peak_t.append(t0 + (lo + quad_interp_peak(seg, i_pk)) / fs_up)
        up_t.append(t0 + (lo + quad_interp_peak(dseg, i_up)) / fs_up)
        notch_t.append(notch)

    if len(peak_t) < 2:
        raise FlatSignal("beat refinement failed")
    peak_t = np.array(peak_t)
    up_t = np.array(up_t)
    notch_t = np.array(notch_t)
    # two raw peaks may refine to the same beat; keep the first of any pair
    keep = np.concatenate([[True], np.diff(peak_t) > IBI_VALID_RANGE[0] * 0.8])
    peak_t, up_t, notch_t = peak_t[keep], up_t[keep], notch_t[keep]

    quality = np.full(len(peak_t), 0.9)
    ibis = np.diff(peak_t)
    bad = (ibis < IBI_VALID_RANGE[0]) | (ibis > IBI_VALID_RANGE[1])
    quality[1:][bad] = np.minimum(quality[1:][bad], 0.2)
    if imu is not None:
        rms, imu_fs = _motion_mask(imu, duration)
        idx = np.clip(((peak_t - imu.t0_us / 1e6) * imu_fs).astype(int), 0, len(rms) - 1)
        quality[rms[idx] > 60.0] = 0.3

    return PulseSeries(peak_t, up_t, quality, notch_t)


def hr_hrv(series: PulseSeries, window_s: float | None = None) -> tuple[float, float, float]:
    """(hr_bpm, rmssd_ms, sdnn_ms) over quality-gated beats in the window."""
    times = series.peak_times[series.quality >= QUALITY_GATE]
    if window_s is not None and len(times):
        times = times[times >= times[-1] - window_s]
    if len(times) < 4:
        raise InsufficientBeats(f"{len(times)} beats with quality >= {QUALITY_GATE}")
    ibis = np.diff(times)
    hr = 60.0 / float(np.mean(ibis))
    sdnn = float(np.std(ibis) * 1000.0)
    rmssd = float(np.sqrt(np.mean(np.diff(ibis) ** 2)) * 1000.0)
    return hr, rmssd, sdnn


def spo2(red: SampleFrame, ir: SampleFrame) -> Spo2Result:
    """Ratio of pulsatile to non-pulsatile components, red over infrared."""
    if red.fs != ir.fs or red.n_samples != ir.n_samples or red.t0_us != ir.t0_us:
        raise ChannelMismatch("red/ir frames differ in rate or span")
    if red.n_samples / red.fs < 8.0:
        raise TooShort("need at least 8 s for the ratio window")
    taps = fir_bandpass(0.6, 5.0, red.fs, transition_hz=0.4, atten_db=50)
    result = []
    for frame in (red, ir):
        x = frame.data[0].astype(float)
        dc = float(np.mean(x))
        ac = float(np.sqrt(np.mean(apply_fir(x - dc, taps) ** 2)))
        if dc <= 0 or ac / dc < 5e-4:
            raise NoPulse("no detectable pulsation")
        result.append(ac / dc)
    ac_dc_red, ac_dc_ir = result
    r = ac_dc_red / ac_dc_ir
    return Spo2Result(
        r_ratio=r,
        spo2_pct=float(np.clip(110.0 - 25.0 * r, *SPO2_RANGE)),
        ac_dc_red=ac_dc_red,
        ac_dc_ir=ac_dc_ir,
    )


def respiration_rate(ppg: SampleFrame) -> float:
    """Breaths per minute from the respiratory intensity modulation.

    Cardiac content is removed with a sub-hertz low-pass, then the dominant
    spectral component in the respiratory band is read off the FFT.
    """
    fs = ppg.fs
    x = _green_channel(ppg)
    if len(x) / fs < 32.0:
        raise TooShort(f"{len(x) / fs:.1f} s < 32 s")
    if fs < 25:
        raise TooShort(f"fs {fs} < 25 Hz")
    from .sigproc import fir_lowpass

    taps = fir_lowpass(0.6, fs, transition_hz=0.15, atten_db=60)
    slow = apply_fir(x - x.mean(), taps)
    freq, amp = dominant_frequency(slow, fs, RR_BAND_HZ)
    dc = abs(float(np.mean(x))) or 1.0
    if amp / dc < 3e-4:
        raise NoRespPeak(f"modulation depth {amp / dc:.2e} below threshold")
    return freq * 60.0


def detect_s1(audio: SampleFrame) -> np.ndarray:
    """S1 heart-sound times: 20-60 Hz band envelope peaks with a refractory period."""
    fs = audio.fs
    if fs < 8000:
        raise NoSounds(f"fs {fs} < 8 kHz")
    x = audio.data[0].astype(float)
    if len(x) / fs < 10.0:
        raise TooShort(f"{len(x) / fs:.1f} s < 10 s")
    y = signal.resample_poly(x, 1, fs // S1_ENV_FS)
    taps = fir_bandpass(20.0, 60.0, S1_ENV_FS, transition_hz=10.0, atten_db=50)
    env = envelope(apply_fir(y, taps))
    floor = float(np.median(env))
    peaks, _ = signal.find_peaks(
        env, height=6.0 * floor, distance=int(S1_REFRACTORY_S * S1_ENV_FS)
    )
    if len(peaks) == 0:
        raise NoSounds("no envelope peaks above the noise floor")
    t0 = audio.t0_us / 1e6
    return np.array([t0 + quad_interp_peak(env, int(p)) / S1_ENV_FS for p in peaks])


def vtt_et(s1_times: np.ndarray, pulse: PulseSeries) -> BpFeatures:
    """Median transit time (S1 to upstroke) and ejection time over matched beats."""
    s1_times = np.asarray(s1_times, dtype=float)
    vtts, ets = [], []
    for up, notch, q in zip(pulse.upstroke_times, pulse.notch_times, pulse.quality):
        if q < QUALITY_GATE:
            continue
        earlier = s1_times[(s1_times < up) & (s1_times >= up - S1_MATCH_WINDOW_S)]
        if len(earlier) == 0:
            continue
        vtts.append((up - earlier[-1]) * 1000.0)
        if np.isfinite(notch):
            ets.append((notch - up) * 1000.0)
    if len(vtts) < 5:
        raise NoMatches(f"{len(vtts)} matched beats < 5")
    return BpFeatures(
        vtt_ms=float(np.median(vtts)),
        et_ms=float(np.median(ets)) if ets else 0.0,
        beat_count=len(vtts),
    )


def _design_matrix(features: list[BpFeatures]) -> np.ndarray:
    return np.array([[1.0, 1000.0 / f.vtt_ms, f.et_ms] for f in features])


def bp_calibrate(
    pairs: list[tuple[BpFeatures, float, float]],
    calibrated_at: float = 0.0,
    subject_id: str = "",
) -> PersonalBpModel:
    """Least-squares fit of BP = a + b*(1000/vtt_ms) + c*et_ms per pressure."""
    if len(pairs) < 3:
        raise Underdetermined(f"{len(pairs)} reference pairs < 3")
    feats = [p[0] for p in pairs]
    design = _design_matrix(feats)
    if np.linalg.matrix_rank(design, tol=1e-8) < 3:
        raise DegenerateDesign("reference features do not span the model")
    sbp = np.array([p[1] for p in pairs], dtype=float)
    dbp = np.array([p[2] for p in pairs], dtype=float)
    cs, *_ = np.linalg.lstsq(design, sbp, rcond=None)
    cd, *_ = np.linalg.lstsq(design, dbp, rcond=None)
    return PersonalBpModel(
        a_s=float(cs[0]), b_s=float(cs[1]), c_s=float(cs[2]),
        a_d=float(cd[0]), b_d=float(cd[1]), c_d=float(cd[2]),
        calibrated_at=calibrated_at, subject_id=subject_id,
    )


def bp_estimate(features: BpFeatures, model: PersonalBpModel | None) -> BpEstimate:
    if model is None:
        raise Uncalibrated("no personalised model")
    inv = 1000.0 / features.vtt_ms
    sbp = model.a_s + model.b_s * inv + model.c_s * features.et_ms
    dbp = model.a_d + model.b_d * inv + model.c_d * features.et_ms
    oor = not (BP_SBP_CLAMP[0] <= sbp <= BP_SBP_CLAMP[1]) or not (
        BP_DBP_CLAMP[0] <= dbp <= BP_DBP_CLAMP[1]
    )
    return BpEstimate(
        sbp_mmhg=float(np.clip(sbp, *BP_SBP_CLAMP)),
        dbp_mmhg=float(np.clip(dbp, *BP_DBP_CLAMP)),
        out_of_range=oor,
    )
