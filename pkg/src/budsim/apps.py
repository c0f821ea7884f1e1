"""On-device applications: streaming vitals estimation and blood pressure.

Each app subscribes to local sensor streams through the distributor, keeps
the latest delivered window, and computes on its scheduler slot in the vitals
phase.  Apps exist on both buds; only the bud recorded as executor in the
shared peripheral database computes and publishes, so the load balancer can
migrate work at runtime.
"""

from __future__ import annotations

from . import vitals as vt
from .core import (
    PERIPH_BP,
    PERIPH_HR,
    PERIPH_HRV,
    PERIPH_MIC_IN,
    PERIPH_PPG,
    PERIPH_RR,
    PERIPH_SPO2,
    PERIPH_TEMP,
    PERIPH_TEMP_CORE,
    SampleFrame,
)
from .sensordist import Subscription
from .vitals import PersonalBpModel


def _overlap_for(window_s: float, advance_s: float) -> float:
    return max(0.0, 100.0 * (1.0 - advance_s / window_s))


def channel_frame(frame: SampleFrame, name: str) -> SampleFrame:
    idx = frame.channels.index(name)
    return SampleFrame(frame.peripheral, frame.t0_us, frame.fs, (name,), frame.data[idx])


class VitalsApp:
    """HR/HRV, SpO2, respiration and core-temperature publishing."""

    def __init__(self, node, cfg):
        self.node = node
        self.cfg = cfg
        self.windows: dict[str, SampleFrame] = {}
        self.enabled = {PERIPH_HR: True, PERIPH_HRV: True, PERIPH_SPO2: True,
                        PERIPH_RR: True, PERIPH_TEMP_CORE: True}

    def setup(self) -> None:
        cfg = self.cfg
        dist = self.node.dist
        dist.subscribe(Subscription(
            "vitals-hr", PERIPH_PPG, cfg.ppg_rate_hz, cfg.window_s * 1000,
            lambda f: self.windows.__setitem__("hr", f),
            overlap_pct=_overlap_for(cfg.window_s, cfg.hr_period_s),
        ))
        dist.subscribe(Subscription(
            "vitals-spo2", PERIPH_PPG, cfg.ppg_rate_hz, 16_000,
            lambda f: self.windows.__setitem__("spo2", f),
            overlap_pct=_overlap_for(16, cfg.spo2_period_s),
        ))
        dist.subscribe(Subscription(
            "vitals-rr", PERIPH_PPG, cfg.ppg_rate_hz, cfg.rr_window_s * 1000,
            lambda f: self.windows.__setitem__("rr", f),
            overlap_pct=_overlap_for(cfg.rr_window_s, cfg.rr_period_s),
        ))
        dist.subscribe(Subscription(
            "vitals-temp", PERIPH_TEMP, min(self.node.native.temp_hz, 32), 4_000,
            lambda f: self.windows.__setitem__("temp", f),
            overlap_pct=_overlap_for(4, cfg.temp_period_s),
        ))

    def _executor(self) -> bool:
        return self.node.executor_of(PERIPH_HR) == self.node.side

    def hr_task(self, now_us: int) -> None:
        frame = self.windows.pop("hr", None)
        if frame is None or not self._executor():
            return
        self.node.account("vitals", self.cfg.hr_period_s * 1e6)
        try:
            series = vt.detect_pulse(frame)
            hr, rmssd, _ = vt.hr_hrv(series)
        except vt.VitalsError as e:
            self.node.log_error("hr", str(e))
            return
        if self.enabled[PERIPH_HR]:
            self.node.publish_vital(PERIPH_HR, hr)
        if self.enabled[PERIPH_HRV]:
            self.node.publish_vital(PERIPH_HRV, rmssd)

    def spo2_task(self, now_us: int) -> None:
        frame = self.windows.pop("spo2", None)
        if frame is None or not self._executor() or not self.enabled[PERIPH_SPO2]:
            return
        try:
            result = vt.spo2(channel_frame(frame, "red"), channel_frame(frame, "ir"))
        except vt.VitalsError as e:
            self.node.log_error("spo2", str(e))
            return
        self.node.publish_vital(PERIPH_SPO2, result.spo2_pct)

    def rr_task(self, now_us: int) -> None:
        frame = self.windows.pop("rr", None)
        if frame is None or not self._executor() or not self.enabled[PERIPH_RR]:
            return
        try:
            rr = vt.respiration_rate(frame)
        except vt.VitalsError as e:
            self.node.log_error("rr", str(e))
            return
        self.node.publish_vital(PERIPH_RR, rr)

    def temp_task(self, now_us: int) -> None:
        frame = self.windows.pop("temp", None)
        if frame is None or not self._executor() or not self.enabled[PERIPH_TEMP_CORE]:
            return
        skin_c = float(frame.to_physical().mean())
        # identity core-offset model: core estimate = skin reading
        self.node.publish_vital(PERIPH_TEMP_CORE, skin_c)


class BpApp:
    """Vascular-transit-time blood pressure with a pre-calibrated model."""

    def __init__(self, node, cfg):
        self.node = node
        self.cfg = cfg
        m = cfg.model
        self.model = PersonalBpModel(m.a_s, m.b_s, m.c_s, m.a_d, m.b_d, m.c_d)
        self.windows: dict[str, SampleFrame] = {}
        self.enabled = True
        self.measure_requested = False

    def setup(self) -> None:
        cfg = self.cfg
        self.node.dist.subscribe(Subscription(
            "bp-ppg", PERIPH_PPG, cfg.ppg_rate_hz, cfg.window_s * 1000,
            lambda f: self.windows.__setitem__("ppg", f),
            overlap_pct=_overlap_for(cfg.window_s, cfg.period_s),
        ))
        self.node.dist.subscribe(Subscription(
            "bp-mic", PERIPH_MIC_IN, self.node.native.audio_hz, cfg.window_s * 1000,
            lambda f: self.windows.__setitem__("mic", f),
            overlap_pct=_overlap_for(cfg.window_s, cfg.period_s),
        ))

    def bp_task(self, now_us: int) -> None:
        ppg = self.windows.pop("ppg", None)
        mic = self.windows.pop("mic", None)
        if ppg is None or mic is None or not self.enabled:
            return
        if self.node.executor_of(PERIPH_BP) != self.node.side:
            return
        self.node.account("vitals", self.cfg.period_s * 1e6)
        try:
            series = vt.detect_pulse(ppg)
            s1 = vt.detect_s1(mic)
            feats = vt.vtt_et(s1, series)
            est = vt.bp_estimate(feats, self.model)
        except (vt.VitalsError, ValueError) as e:
            self.node.log_error("bp", str(e))
            return
        self.node.publish_vital(PERIPH_BP, est.sbp_mmhg, est.dbp_mmhg)
        self.measure_requested = False
