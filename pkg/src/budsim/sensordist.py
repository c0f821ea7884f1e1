"""Sensor fan-out: one physical stream, many subscribers, plus the on-IMU MLC.

The sensor runs at the maximum rate requested across live subscriptions and
every subscriber receives an integer-factor decimation of that stream, so
delivered samples are always bit-traceable to the source.  Rates that do not
divide the reconciled sensor rate are rejected rather than resampled.

The machine-learning core mimics an IMU that computes window statistics
on-sensor and routes them through a user decision tree, waking subscribers
only when the classified context changes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import SampleFrame, UnknownPeripheral

FEATURE_STATS = ("mean", "variance", "energy", "peak_to_peak")


class SensorDistError(Exception):
    pass


class RateUnsupported(SensorDistError):
    pass


class UnknownHandle(SensorDistError):
    pass


class InvalidTree(SensorDistError):
    pass


class NotConfigured(SensorDistError):
    pass


class BadWindow(SensorDistError):
    pass


@dataclass(frozen=True)
class Subscription:
    app_id: str
    peripheral: int
    rate_hz: int
    window_len_ms: int
    deliver: object  # callable(SampleFrame)
    overlap_pct: int = 0

    def __post_init__(self):
        if not 0 <= self.overlap_pct < 100:
            raise ValueError("overlap_pct outside [0, 100)")
        if self.rate_hz <= 0:
            raise RateUnsupported("rate must be positive")
        if self.window_len_ms * self.rate_hz < 1000:
            raise ValueError("window shorter than one sample period")

    @property
    def window_samples(self) -> int:
        return max(1, round(self.window_len_ms * self.rate_hz / 1000))

    @property
    def advance_samples(self) -> int:
        return max(1, round(self.window_samples * (100 - self.overlap_pct) / 100))


@dataclass(frozen=True)
class TreeNode:
    """Internal node (feature/threshold/left/right) or leaf (class_id)."""

    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    class_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.class_id >= 0


@dataclass(frozen=True)
class DecisionTree:
    nodes: tuple[TreeNode, ...]

    def validate(self, n_features: int) -> None:
        if not self.nodes:
            raise InvalidTree("empty tree")
        seen_path: set[int] = set()

        def walk(idx: int, path: tuple[int, ...]) -> None:
            if idx in path:
                raise InvalidTree(f"cycle through node {idx}")
            if not 0 <= idx < len(self.nodes):
                raise InvalidTree(f"node index {idx} out of range")
            node = self.nodes[idx]
            if node.is_leaf:
                return
            if not 0 <= node.feature < n_features:
                raise InvalidTree(f"feature index {node.feature} out of range")
            walk(node.left, path + (idx,))
            walk(node.right, path + (idx,))

        walk(0, ())

    def classify(self, features: np.ndarray) -> int:
        idx = 0
        for _ in range(len(self.nodes) + 1):
            node = self.nodes[idx]
            if node.is_leaf:
                return node.class_id
            idx = node.left if features[node.feature] <= node.threshold else node.right
        raise InvalidTree("walk did not terminate")  # guarded by validate


def compute_features(window: np.ndarray) -> np.ndarray:
    """Per-channel (mean, variance, energy, peak-to-peak), channel-major flat."""
    w = np.asarray(window, dtype=float)
    if w.ndim == 1:
        w = w.reshape(1, -1)
    feats = np.empty(w.shape[0] * len(FEATURE_STATS))
    for ch in range(w.shape[0]):
        x = w[ch]
        feats[ch * 4 : ch * 4 + 4] = (
            x.mean(),
            x.var(),
            np.mean(x**2),
            x.max() - x.min(),
        )
    return feats


class _SubscriberState:
    def __init__(self, sub: Subscription, start_index: int):
        self.sub = sub
        self.start_index = start_index  # sensor-stream index where this sub joined
        self.buffer: list[np.ndarray] = []
        self.buffered = 0
        self.buffer_t0_us: int | None = None


class SensorMux:
    """Fan-out for one peripheral: decimation, windowing, rate reconciliation."""

    def __init__(self, peripheral: int, max_rate_hz: int, channels: tuple[str, ...]):
        self.peripheral = peripheral
        self.max_rate_hz = max_rate_hz
        self.channels = channels
        self.subscribers: dict[int, _SubscriberState] = {}
        self.sample_index = 0  # absolute index in the sensor-rate stream
        self.mlc: "MlcCore | None" = None

    @property
    def sensor_rate(self) -> int:
        rates = [s.sub.rate_hz for s in self.subscribers.values()]
        if self.mlc is not None:
            rates.append(self.mlc.rate_hz)
        return max(rates, default=0)

    def check_rate(self, rate_hz: int) -> None:
        if rate_hz > self.max_rate_hz:
            raise RateUnsupported(f"{rate_hz} Hz > sensor max {self.max_rate_hz} Hz")
        candidate = max([rate_hz, *(s.sub.rate_hz for s in self.subscribers.values())])
        for r in [rate_hz, *(s.sub.rate_hz for s in self.subscribers.values())]:
            if candidate % r:
                raise RateUnsupported(f"{r} Hz does not divide sensor rate {candidate} Hz")
        if self.max_rate_hz % candidate:
            raise RateUnsupported(f"{candidate} Hz does not divide native {self.max_rate_hz} Hz")

    def push(self, frame: SampleFrame) -> None:
        """Feed a sensor-rate block; fans out decimated windows to subscribers."""
        rate = self.sensor_rate
        if rate == 0 or frame.fs != rate:
            return
        base = self.sample_index
        n = frame.n_samples
        for state in self.subscribers.values():
            sub = state.sub
            k = rate // sub.rate_hz
            # indices in this block belonging to the subscriber's comb
            offsets = np.arange(n)
            mask = ((base + offsets) - state.start_index) % k == 0
            take = offsets[mask]
            if len(take) == 0:
                continue
            if state.buffer_t0_us is None:
                state.buffer_t0_us = frame.t0_us + int(take[0]) * 1_000_000 // rate
            state.buffer.append(frame.data[:, take])
            state.buffered += len(take)
            self._flush_windows(state, rate)
        if self.mlc is not None:
            self.mlc.push(frame, base)
        self.sample_index += n

    def _flush_windows(self, state: _SubscriberState, rate: int) -> None:
        sub = state.sub
        w = sub.window_samples
        adv = sub.advance_samples
        while state.buffered >= w:
            data = np.concatenate(state.buffer, axis=1)
            window = data[:, :w]
            out = SampleFrame(
                self.peripheral, state.buffer_t0_us, sub.rate_hz, self.channels, window
            )
            rest = data[:, adv:]
            state.buffer = [rest] if rest.shape[1] else []
            state.buffered = rest.shape[1]
            state.buffer_t0_us += adv * 1_000_000 // sub.rate_hz
            sub.deliver(out)

    def flush_partial(self) -> None:
        """Drop buffered partial windows (rate/config changes restart windows)."""
        for state in self.subscribers.values():
            state.buffer = []
            state.buffered = 0
            state.buffer_t0_us = None


class MlcCore:
    """On-sensor feature extraction plus decision-tree classification."""

    def __init__(self, tree: DecisionTree, window_ms: int, rate_hz: int, n_channels: int,
                 on_class_change=None):
        tree.validate(n_channels * len(FEATURE_STATS))
        self.tree = tree
        self.window_ms = window_ms
        self.rate_hz = rate_hz
        self.n_channels = n_channels
        self.window_samples = max(1, round(window_ms * rate_hz / 1000))
        self.on_class_change = on_class_change
        self.last_class: int | None = None
        self._buf: list[np.ndarray] = []
        self._buffered = 0
        self._decim_anchor = 0

    def infer(self, window: np.ndarray) -> int:
        w = np.asarray(window)
        if w.ndim == 1:
            w = w.reshape(1, -1)
        if w.shape != (self.n_channels, self.window_samples):
            raise BadWindow(
                f"window {w.shape} != ({self.n_channels}, {self.window_samples})"
            )
        return self.tree.classify(compute_features(w))

    def push(self, frame: SampleFrame, base_index: int) -> None:
        k = frame.fs // self.rate_hz
        offsets = np.arange(frame.n_samples)
        take = offsets[((base_index + offsets) - self._decim_anchor) % k == 0]
        if len(take) == 0:
            return
        self._buf.append(frame.data[:, take])
        self._buffered += len(take)
        while self._buffered >= self.window_samples:
            data = np.concatenate(self._buf, axis=1)
            window, rest = data[:, : self.window_samples], data[:, self.window_samples :]
            self._buf = [rest] if rest.shape[1] else []
            self._buffered = rest.shape[1]
            cls = self.tree.classify(compute_features(window))
            if cls != self.last_class:
                self.last_class = cls
                if self.on_class_change is not None:
                    self.on_class_change(cls)


class Distributor:
    """Per-bud subscription broker over all local sensor muxes."""

    def __init__(self):
        self.muxes: dict[int, SensorMux] = {}
        self._handles: dict[int, tuple[int, int]] = {}  # handle -> (periph, key)
        self._next_handle = 1
        self.on_sensor_idle = None    # callable(peripheral) when last subscriber leaves
        self.on_sensor_active = None  # callable(peripheral, rate) on (re)configuration

    def add_sensor(self, peripheral: int, max_rate_hz: int, channels: tuple[str, ...]) -> SensorMux:
        mux = SensorMux(peripheral, max_rate_hz, channels)
        self.muxes[peripheral] = mux
        return mux

    def _mux(self, peripheral: int) -> SensorMux:
        if peripheral not in self.muxes:
            raise UnknownPeripheral(f"no sensor {peripheral:#04x} on this bud")
        return self.muxes[peripheral]

    def subscribe(self, sub: Subscription) -> int:
        mux = self._mux(sub.peripheral)
        mux.check_rate(sub.rate_hz)
        old_rate = mux.sensor_rate
        handle = self._next_handle
        self._next_handle += 1
        mux.subscribers[handle] = _SubscriberState(sub, mux.sample_index)
        self._handles[handle] = (sub.peripheral, handle)
        if mux.sensor_rate != old_rate:
            mux.flush_partial()
            for state in mux.subscribers.values():
                state.start_index = mux.sample_index
        if self.on_sensor_active is not None:
            self.on_sensor_active(sub.peripheral, mux.sensor_rate)
        return handle

    def unsubscribe(self, handle: int) -> int:
        if handle not in self._handles:
            raise UnknownHandle(f"handle {handle}")
        periph, _ = self._handles.pop(handle)
        mux = self.muxes[periph]
        mux.subscribers.pop(handle)
        remaining = len(mux.subscribers)
        if remaining == 0 and mux.mlc is None:
            if self.on_sensor_idle is not None:
                self.on_sensor_idle(periph)
        else:
            mux.flush_partial()
            for state in mux.subscribers.values():
                state.start_index = mux.sample_index
            if self.on_sensor_active is not None:
                self.on_sensor_active(periph, mux.sensor_rate)
        return remaining

    def update_rate(self, handle: int, rate_hz: int) -> None:
        """Re-negotiate one subscription's rate (hostlink CONFIG endpoint path)."""
        if handle not in self._handles:
            raise UnknownHandle(f"handle {handle}")
        periph, _ = self._handles[handle]
        mux = self.muxes[periph]
        state = mux.subscribers[handle]
        others = [s.sub.rate_hz for h, s in mux.subscribers.items() if h != handle]
        candidate = max([rate_hz, *others])
        if rate_hz > mux.max_rate_hz or mux.max_rate_hz % candidate:
            raise RateUnsupported(f"{rate_hz} Hz unsupported")
        for r in [rate_hz, *others]:
            if candidate % r:
                raise RateUnsupported(f"{r} Hz does not divide {candidate} Hz")
        state.sub = replace(state.sub, rate_hz=rate_hz)
        mux.flush_partial()
        for s in mux.subscribers.values():
            s.start_index = mux.sample_index
        if self.on_sensor_active is not None:
            self.on_sensor_active(periph, mux.sensor_rate)

    def update_window(self, handle: int, window_len_ms: int) -> None:
        if handle not in self._handles:
            raise UnknownHandle(f"handle {handle}")
        periph, _ = self._handles[handle]
        state = self.muxes[periph].subscribers[handle]
        state.sub = replace(state.sub, window_len_ms=window_len_ms)
        self.muxes[periph].flush_partial()

    def subscriber_rate(self, handle: int) -> int:
        periph, _ = self._handles[handle]
        return self.muxes[periph].subscribers[handle].sub.rate_hz

    def mlc_configure(self, peripheral: int, tree: DecisionTree, window_ms: int,
                      rate_hz: int, on_class_change=None) -> None:
        mux = self._mux(peripheral)
        mux.check_rate(rate_hz)
        mux.mlc = MlcCore(tree, window_ms, rate_hz, len(mux.channels), on_class_change)
        if self.on_sensor_active is not None:
            self.on_sensor_active(peripheral, mux.sensor_rate)

    def mlc_infer(self, peripheral: int, window: np.ndarray) -> int:
        mux = self._mux(peripheral)
        if mux.mlc is None:
            raise NotConfigured("MLC not configured")
        return mux.mlc.infer(window)
