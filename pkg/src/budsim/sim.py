"""Deterministic virtual-time simulation of two buds, a host, and their links.

The scheduler advances the clock to the earliest due instant and runs phases
in a fixed order at every timestamp: sensors, dsp, vitals, then a message
settlement loop (bus drains, link-port flushes, link deliveries) iterated to
quiescence, then load balancing.  All randomness derives from the scenario
seed, so a scenario run twice produces byte-identical traces and exports.

Link model: unidirectional channels with fixed latency, per-frame loss and
configured partition windows.  A partition blocks new sends (held in bounded
sender-side queues, oldest dropped) while frames already in flight still
deliver; that guarantee is what lets the role-swap handshake commit to a
switchover instant safely.
"""

from __future__ import annotations

import heapq
import json
import struct
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import imc, loadbalance, wire
from .apps import BpApp, VitalsApp
from .audiodsp import AudioConfig, AudioDsp
from .core import (
    ClockMode,
    PERIPH_BP,
    PERIPH_CNN,
    PERIPH_HR,
    PERIPH_HRV,
    PERIPH_IMU9,
    PERIPH_MIC_IN,
    PERIPH_MIC_OUT_BOT,
    PERIPH_MIC_OUT_TOP,
    PERIPH_MLC,
    PERIPH_NAMES,
    PERIPH_PPG,
    PERIPH_RR,
    PERIPH_SPO2,
    PERIPH_TEMP,
    PERIPH_TEMP_CORE,
    PeripheralDescriptor,
    PeripheralKind,
    PeripheralState,
    PeripheralRegistry,
    SampleFrame,
    VirtualClock,
)
from .hostlink import LinkDown, Router
from .imc import DEST_ECOSYSTEM, DEST_LOCAL, DEST_PEER, ImcBus
from .loadbalance import EnergyLedger, RoleManager, SharedPeripheralDb, assign_executor
from .mlengine import MlEngine, ModelTransfer
from .scenario import Scenario
from .sensordist import Distributor, RateUnsupported, Subscription
from .sensorsim import GroundTruth, PpgParams, gen_imu, gen_inear_audio, gen_ppg, gen_temp
from .wire import (
    EP_AUDIO_MODE,
    EP_ENABLE,
    EP_LED_CURRENT_MA,
    EP_MODEL_XFER,
    EP_POWER_MODE,
    EP_SAMPLING_RATE_HZ,
    EP_WINDOW_LEN_MS,
    ErrCode,
    FrameDecoder,
    HostFrame,
    MsgType,
    Reassembler,
    encode_frame,
    unpack_vital,
)

NODE_IDS = {"left": 1, "right": 2, "host": 3}
PHASES = ("sensors", "dsp", "vitals", "imc", "links", "loadbalance")
QUEUE_BOUND = 256
SENSOR_BLOCK_US = {
    PERIPH_PPG: 1_000_000,
    PERIPH_IMU9: 1_000_000,
    PERIPH_TEMP: 1_000_000,
    PERIPH_MIC_IN: 500_000,
}
SENSOR_ACTIVITY = {
    PERIPH_PPG: "ppg",
    PERIPH_IMU9: "imu",
    PERIPH_TEMP: "temp",
    PERIPH_MIC_IN: "mic",
}
DEFAULT_LED_MA = 5


class SimError(Exception):
    pass


class Trace:
    """Append-only event log with non-decreasing virtual timestamps."""

    def __init__(self):
        self.events: list[dict] = []

    def add(self, t_us: int, node: str, category: str, **detail) -> None:
        self.events.append({"t_us": int(t_us), "node": node, "category": category,
                            "detail": detail})

    def filtered(self, category: str) -> list[dict]:
        return [e for e in self.events if e["category"] == category]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for event in self.events:
                fh.write(json.dumps(event, sort_keys=True, default=str) + "\n")


class Channel:
    """One-directional link: latency, seeded per-frame loss, partition windows."""

    def __init__(self, name: str, latency_us: int, loss_pct: float,
                 partitions_us: list[tuple[int, int]], seed: int, clock: VirtualClock,
                 trace: Trace):
        self.name = name
        self.latency_us = latency_us
        self.loss_pct = loss_pct
        self.partitions_us = partitions_us
        self.rng = np.random.default_rng([seed & 0xFFFFFFFF, *name.encode()])
        self.clock = clock
        self.trace = trace
        self.receiver = lambda data, now: None
        self._flight: list[tuple[int, int, bytes]] = []
        self._order = 0
        self.tx = 0
        self.rx = 0
        self.lost = 0

    def partitioned(self, t_us: int) -> bool:
        return any(a <= t_us < b for a, b in self.partitions_us)

    def send(self, data: bytes, now_us: int) -> bool:
        if self.partitioned(now_us):
            return False
        self.tx += 1
        self.trace.add(now_us, self.name, "frame_tx", link=self.name, size=len(data))
        if self.loss_pct > 0 and self.rng.random() * 100.0 < self.loss_pct:
            self.lost += 1
            self.trace.add(now_us, self.name, "frame_drop", link=self.name)
            return True
        heapq.heappush(self._flight, (now_us + self.latency_us, self._order, data))
        self._order += 1
        return True

    def next_delivery(self) -> int | None:
        return self._flight[0][0] if self._flight else None

    def deliver_due(self, now_us: int) -> int:
        n = 0
        while self._flight and self._flight[0][0] <= now_us:
            _, _, data = heapq.heappop(self._flight)
            self.rx += 1
            self.trace.add(now_us, self.name, "frame_rx", link=self.name, size=len(data))
            self.receiver(data, now_us)
            n += 1
        return n

    def next_heal(self, now_us: int) -> int | None:
        ends = [b for a, b in self.partitions_us if a <= now_us < b]
        return min(ends) if ends else None


class LinkPort:
    """Sender-side endpoint with the bounded hold queue (drop-oldest)."""

    def __init__(self, channel: Channel, owner: str, on_bytes_sent=None):
        self.channel = channel
        self.owner = owner
        self.hold: list[bytes] = []
        self.dropped = 0
        self.on_bytes_sent = on_bytes_sent
        self.now_fn = lambda: 0

    def send(self, data: bytes) -> bool:
        now = self.now_fn()
        if self.hold or not self.channel.send(data, now):
            self.hold.append(data)
            if len(self.hold) > QUEUE_BOUND:
                self.hold.pop(0)
                self.dropped += 1
            return False
        if self.on_bytes_sent is not None:
            self.on_bytes_sent(len(data))
        return True

    def flush(self, now_us: int) -> int:
        n = 0
        while self.hold:
            if not self.channel.send(self.hold[0], now_us):
                break
            data = self.hold.pop(0)
            if self.on_bytes_sent is not None:
                self.on_bytes_sent(len(data))
            n += 1
        return n


def standard_registry() -> PeripheralRegistry:
    reg = PeripheralRegistry()
    phys = PeripheralKind.PHYSICAL
    virt = PeripheralKind.VIRTUAL
    sensor_eps = {EP_SAMPLING_RATE_HZ: "u16", EP_POWER_MODE: "u8", EP_ENABLE: "u8",
                  EP_WINDOW_LEN_MS: "u16"}
    reg.register(PeripheralDescriptor(PERIPH_PPG, phys, "ppg",
                                      {**sensor_eps, EP_LED_CURRENT_MA: "u8"}))
    reg.register(PeripheralDescriptor(PERIPH_IMU9, phys, "imu9", dict(sensor_eps)))
    reg.register(PeripheralDescriptor(PERIPH_TEMP, phys, "temp", dict(sensor_eps)))
    audio_eps = {EP_ENABLE: "u8", EP_AUDIO_MODE: "u8"}
    reg.register(PeripheralDescriptor(PERIPH_MIC_IN, phys, "mic_in",
                                      {**sensor_eps, EP_AUDIO_MODE: "u8"}))
    reg.register(PeripheralDescriptor(PERIPH_MIC_OUT_TOP, phys, "mic_out_top", dict(audio_eps)))
    reg.register(PeripheralDescriptor(PERIPH_MIC_OUT_BOT, phys, "mic_out_bot", dict(audio_eps)))
    for periph, name, deps in (
        (PERIPH_HR, "hr", (PERIPH_PPG,)),
        (PERIPH_HRV, "hrv", (PERIPH_PPG,)),
        (PERIPH_SPO2, "spo2", (PERIPH_PPG,)),
        (PERIPH_RR, "rr", (PERIPH_PPG,)),
        (PERIPH_BP, "bp", (PERIPH_PPG, PERIPH_MIC_IN)),
        (PERIPH_TEMP_CORE, "temp_core", (PERIPH_TEMP,)),
        (PERIPH_MLC, "mlc", (PERIPH_IMU9,)),
    ):
        reg.register(PeripheralDescriptor(periph, virt, name, {EP_ENABLE: "u8"}, depends_on=deps))
    reg.register(PeripheralDescriptor(PERIPH_CNN, virt, "cnn",
                                      {EP_ENABLE: "u8", EP_MODEL_XFER: "bytes"}))
    return reg


class SensorConfigTarget:
    """CONFIG endpoint handler for one physical sensor on one bud.

    An empty CONFIG payload is a read: the response echoes the current value.
    """

    def __init__(self, node: "BudNode", periph: int):
        self.node = node
        self.periph = periph
        self.values = {EP_SAMPLING_RATE_HZ: 0, EP_POWER_MODE: 0, EP_ENABLE: 0,
                       EP_WINDOW_LEN_MS: 1000}
        if periph == PERIPH_PPG:
            self.values[EP_LED_CURRENT_MA] = DEFAULT_LED_MA

    def __call__(self, endpoint: int, value: bytes) -> tuple[int, bytes]:
        if endpoint not in self.node.registry.get(self.periph).config_endpoints:
            return ErrCode.UNKNOWN_ENDPOINT, b""
        width = 2 if endpoint in (EP_SAMPLING_RATE_HZ, EP_WINDOW_LEN_MS) else 1
        if not value:  # read-back
            return ErrCode.OK, int(self.values.get(endpoint, 0)).to_bytes(width, "little")
        raw = int.from_bytes(value[:width], "little")
        if endpoint == EP_SAMPLING_RATE_HZ:
            try:
                self.node.set_host_stream_rate(self.periph, raw)
            except RateUnsupported:
                return ErrCode.BAD_VALUE, b""
        elif endpoint == EP_LED_CURRENT_MA:
            if not 1 <= raw <= 50:
                return ErrCode.BAD_VALUE, b""
        elif endpoint == EP_ENABLE:
            self.node.set_host_stream_enabled(self.periph, bool(raw))
        elif endpoint == EP_WINDOW_LEN_MS:
            if raw < 1:
                return ErrCode.BAD_VALUE, b""
            self.node.set_host_stream_window(self.periph, raw)
        elif endpoint == EP_AUDIO_MODE:
            if raw > 2:
                return ErrCode.BAD_VALUE, b""
            self.node.audio.set_mode(("off", "anc", "passthrough")[raw])
        self.values[endpoint] = raw
        return ErrCode.OK, raw.to_bytes(width, "little")


class AudioConfigTarget:
    def __init__(self, node: "BudNode"):
        self.node = node
        self.enabled = 0

    def __call__(self, endpoint: int, value: bytes) -> tuple[int, bytes]:
        if endpoint == EP_AUDIO_MODE:
            if not value:
                mode = ("off", "anc", "passthrough").index(self.node.audio.config.mode)
                return ErrCode.OK, bytes([mode])
            mode = value[0]
            if mode > 2:
                return ErrCode.BAD_VALUE, b""
            self.node.audio.set_mode(("off", "anc", "passthrough")[mode])
            return ErrCode.OK, bytes([mode])
        if endpoint == EP_ENABLE:
            if value:
                self.enabled = value[0]
            return ErrCode.OK, bytes([self.enabled])
        return ErrCode.UNKNOWN_ENDPOINT, b""


class VirtualConfigTarget:
    """Enable/disable a derived vital or compute peripheral."""

    def __init__(self, node: "BudNode", periph: int):
        self.node = node
        self.periph = periph

    def __call__(self, endpoint: int, value: bytes) -> tuple[int, bytes]:
        if endpoint == EP_MODEL_XFER and self.periph == PERIPH_CNN:
            return self.node.model_transfer.handle(value)
        if endpoint != EP_ENABLE:
            return ErrCode.UNKNOWN_ENDPOINT, b""
        state = self.node.registry.state(self.periph)
        if not value:
            return ErrCode.OK, bytes([1 if state is PeripheralState.ENABLED else 0])
        on = bool(value[0])
        self.node.registry.set_state(
            self.periph, PeripheralState.ENABLED if on else PeripheralState.DISABLED
        )
        self.node.set_vital_enabled(self.periph, on)
        return ErrCode.OK, bytes([1 if on else 0])


@dataclass
class _HostStream:
    handle: int | None = None
    rate_hz: int = 0
    window_ms: int = 1000
    enabled: bool = False


class BudNode:
    """One simulated earbud."""

    def __init__(self, side: str, eco: "Ecosystem"):
        self.side = side
        self.eco = eco
        self.node_id = NODE_IDS[side]
        self.native = eco.scenario.native
        self.registry = standard_registry()
        self.router = Router(side, self.registry, trace=eco.trace)
        self.bus = ImcBus(self.node_id, forward=self.router.forward_imc)
        self.router.on_imc_remote = self.bus.deliver_remote
        self.dist = Distributor()
        self.audio = AudioDsp(AudioConfig(fast_fs=eco.scenario.audio.fast_fs))
        self.engine = MlEngine(on_result=self._on_cnn_result)
        self.model_transfer = ModelTransfer(self.engine)
        self.ledger = EnergyLedger(on_depleted=self._on_depleted)
        self.db = SharedPeripheralDb(self.node_id)
        self.peer_drained: float = 0.0
        self.apps: dict[str, object] = {}
        self.host_streams: dict[int, _HostStream] = {}
        self.recorder_raw: dict[int, list] = defaultdict(list)
        self.recorder_vitals: list[tuple[int, int, tuple]] = []
        self.errors: list[tuple[int, str, str]] = []

        self.dist.add_sensor(PERIPH_PPG, self.native.ppg_hz, ("green", "red", "ir"))
        self.dist.add_sensor(PERIPH_IMU9, self.native.imu_hz,
                             ("ax", "ay", "az", "gx", "gy", "gz", "mx", "my", "mz"))
        self.dist.add_sensor(PERIPH_TEMP, self.native.temp_hz, ("skin_c",))
        self.dist.add_sensor(PERIPH_MIC_IN, self.native.audio_hz, ("mic",))
        self.dist.on_sensor_idle = self._sensor_idle
        self.dist.on_sensor_active = self._sensor_active

        for periph in (PERIPH_PPG, PERIPH_IMU9, PERIPH_TEMP, PERIPH_MIC_IN):
            self.router.config_targets[periph] = SensorConfigTarget(self, periph)
        audio_target = AudioConfigTarget(self)
        self.router.config_targets[PERIPH_MIC_OUT_TOP] = audio_target
        self.router.config_targets[PERIPH_MIC_OUT_BOT] = audio_target
        for periph in (PERIPH_HR, PERIPH_HRV, PERIPH_SPO2, PERIPH_RR, PERIPH_BP,
                       PERIPH_TEMP_CORE, PERIPH_MLC, PERIPH_CNN):
            self.router.config_targets[periph] = VirtualConfigTarget(self, periph)

        self.registry.on_state_change = self._on_state_change
        self.router.config_owner = self._config_owner
        self.router.mirror_filter = lambda periph: (
            periph in self.registry and self.registry.get(periph).kind is PeripheralKind.PHYSICAL
        )
        self.bus.register(imc.TRIG_DB_SYNC, self._on_db_sync, name="db-sync")
        self.bus.register(imc.TRIG_BATTERY, self._on_battery, name="battery")

    # -- wiring hooks -------------------------------------------------------

    def _on_state_change(self, periph: int, old, new) -> None:
        self.bus.send(imc.TRIG_PERIPH_STATE, bytes([periph, 1 if new is PeripheralState.ENABLED else 0]),
                      DEST_LOCAL)
        self.db.local_update(periph, state=new.value)

    def _config_owner(self, periph: int) -> str:
        entry = self.db.entries.get(periph)
        if (entry is not None and entry.executor and entry.executor != self.side
                and periph in self.registry
                and self.registry.get(periph).kind is PeripheralKind.VIRTUAL):
            return "peer"
        return "local"

    def _on_db_sync(self, msg) -> None:
        periph, entry = SharedPeripheralDb.decode_entry(msg.payload)
        self.db.merge({periph: entry})

    def _on_battery(self, msg) -> None:
        side_id, drained = struct.unpack("<Bd", msg.payload)
        if side_id != self.node_id:
            self.peer_drained = drained

    def _on_depleted(self, ledger) -> None:
        self.eco.trace.add(self.eco.clock.now_us, self.side, "error", kind="battery_depleted")

    def _on_cnn_result(self, result) -> None:
        argmax = int(np.argmax(result.output))
        payload = struct.pack("<HhI", argmax & 0xFFFF, int(result.output.reshape(-1)[argmax]),
                              result.latency_ticks & 0xFFFFFFFF)
        self.bus.send(imc.TRIG_CNN_RESULT, payload, DEST_LOCAL)
        self.account("cnn", result.energy_units)
        if self.registry.state(PERIPH_CNN) is PeripheralState.ENABLED:
            try:
                self.router.send_event(PERIPH_CNN, payload)
            except LinkDown:
                pass

    # -- helpers ------------------------------------------------------------

    def executor_of(self, periph: int) -> str:
        entry = self.db.entries.get(periph)
        return entry.executor if entry is not None and entry.executor else ""

    def account(self, activity: str, amount) -> None:
        self.ledger.account(activity, amount)

    def log_error(self, source: str, message: str) -> None:
        self.errors.append((self.eco.clock.now_us, source, message))
        self.eco.trace.add(self.eco.clock.now_us, self.side, "error", source=source,
                           message=message)

    def publish_vital(self, periph: int, *values: float) -> None:
        if self.registry.state(periph) is not PeripheralState.ENABLED:
            return
        now = self.eco.clock.now_us
        self.recorder_vitals.append((now, periph, values))
        payload = b"".join(wire.pack_vital(v) for v in values)
        try:
            self.router.send_event(periph, payload)
        except LinkDown:
            self.log_error("publish", f"host link down for {PERIPH_NAMES.get(periph)}")
        self.eco.trace.add(now, self.side, "vitals",
                           vital=PERIPH_NAMES.get(periph, hex(periph)),
                           values=[round(v, 2) for v in values])

    def set_vital_enabled(self, periph: int, on: bool) -> None:
        vit = self.apps.get("vitals")
        if vit is not None and periph in vit.enabled:
            vit.enabled[periph] = on
        bp = self.apps.get("bp")
        if bp is not None and periph == PERIPH_BP:
            bp.enabled = on
            bp.measure_requested = on

    # -- host raw-stream subscriptions ---------------------------------------

    def _host_stream(self, periph: int) -> _HostStream:
        return self.host_streams.setdefault(periph, _HostStream())

    def _default_host_rate(self, periph: int) -> int:
        rec = self.eco.scenario.recording
        return {PERIPH_PPG: rec.ppg_rate_hz, PERIPH_IMU9: rec.imu_rate_hz,
                PERIPH_TEMP: rec.temp_rate_hz}.get(periph, 0)

    def set_host_stream_enabled(self, periph: int, on: bool) -> None:
        stream = self._host_stream(periph)
        stream.enabled = on
        if on:
            self.registry.set_state(periph, PeripheralState.ENABLED)
            if stream.rate_hz == 0:
                stream.rate_hz = self._default_host_rate(periph)
            if stream.handle is None and stream.rate_hz:
                stream.handle = self.dist.subscribe(Subscription(
                    "host", periph, stream.rate_hz, stream.window_ms,
                    lambda f, p=periph: self._deliver_host_frame(p, f),
                ))
        elif stream.handle is not None:
            self.dist.unsubscribe(stream.handle)
            stream.handle = None

    def set_host_stream_rate(self, periph: int, rate_hz: int) -> None:
        stream = self._host_stream(periph)
        if stream.handle is not None:
            self.dist.update_rate(stream.handle, rate_hz)
        else:
            mux = self.dist.muxes.get(periph)
            if mux is not None and (rate_hz > mux.max_rate_hz or mux.max_rate_hz % rate_hz):
                raise RateUnsupported(f"{rate_hz} Hz")
        stream.rate_hz = rate_hz

    def set_host_stream_window(self, periph: int, window_ms: int) -> None:
        stream = self._host_stream(periph)
        stream.window_ms = window_ms
        if stream.handle is not None:
            self.dist.update_window(stream.handle, window_ms)

    def _deliver_host_frame(self, periph: int, frame: SampleFrame) -> None:
        if self.executor_of(periph) not in ("", self.side):
            return
        try:
            self.router.send_data(periph, wire.pack_samples(frame.t0_us, frame.fs, frame.data))
        except LinkDown:
            pass

    def _sensor_idle(self, periph: int) -> None:
        self.registry.set_state(periph, PeripheralState.DISABLED)

    def _sensor_active(self, periph: int, rate: int) -> None:
        if self.registry.state(periph) is not PeripheralState.ENABLED:
            self.registry.set_state(periph, PeripheralState.ENABLED)


class HostNode:
    """The external host: one logical device view over both buds."""

    def __init__(self, eco: "Ecosystem"):
        self.eco = eco
        self.decoder = FrameDecoder()
        self.reassembler = Reassembler()
        self.config_seq = 1
        self.pending_configs: dict[int, tuple[int, int]] = {}
        self.acks: list[dict] = []
        self.seq_log: list[int] = []
        self.vitals: dict[int, list[tuple[int, tuple]]] = defaultdict(list)
        self.raw: dict[int, list[tuple[int, int, np.ndarray]]] = defaultdict(list)
        self.periph_view: dict[int, dict] = {}
        self.tunnel_messages: list = []
        self.stream_hook = None  # callable(dict) for the gateway / dumps
        self.rx_frames = 0

    def on_bytes(self, data: bytes, now_us: int) -> None:
        for frame in self.decoder.feed(data):
            self.rx_frames += 1
            self._on_frame(frame, now_us)

    def _emit(self, message: dict) -> None:
        if self.stream_hook is not None:
            self.stream_hook(message)

    def _on_frame(self, frame: HostFrame, now_us: int) -> None:
        eco = self.eco
        if frame.msg_type in (MsgType.DATA, MsgType.EVENT):
            self.seq_log.append(frame.seq)
            logical = self.reassembler.feed(frame)
            if logical is None:
                return
            if frame.peripheral == 0x00 and frame.msg_type is MsgType.EVENT:
                msg = imc.decode_tunnel(logical, DEST_LOCAL)
                self.tunnel_messages.append(msg)
                if msg.trigger_id == imc.TRIG_REGISTRY_SNAPSHOT:
                    self._apply_registry_snapshot(msg.payload)
                return
            if frame.msg_type is MsgType.EVENT:
                values = tuple(
                    unpack_vital(logical[i : i + 4]) for i in range(0, len(logical), 4)
                )
                self.vitals[frame.peripheral].append((now_us, values))
                self._emit({"kind": "vital", "t_us": now_us,
                            "vital": PERIPH_NAMES.get(frame.peripheral, hex(frame.peripheral)),
                            "values": list(values)})
            else:
                try:
                    t0, fs, samples = wire.unpack_samples(logical)
                except (ValueError, struct.error):
                    self.eco.trace.add(now_us, "host", "error", kind="malformed_data",
                                       peripheral=frame.peripheral)
                    return
                self.raw[frame.peripheral].append((t0, fs, samples))
                self._emit({"kind": "plot", "t_us": t0, "fs": fs,
                            "peripheral": PERIPH_NAMES.get(frame.peripheral, hex(frame.peripheral)),
                            "n": int(samples.shape[1])})
        elif frame.msg_type is MsgType.CONFIG_RESP:
            target = self.pending_configs.pop(frame.seq, None)
            ack = {"seq": frame.seq, "peripheral": frame.peripheral,
                   "endpoint": frame.endpoint, "err": int(frame.err_code),
                   "value": frame.payload.hex(), "t_us": now_us,
                   "matched": target == (frame.peripheral, frame.endpoint)}
            self.acks.append(ack)
            self._emit({"kind": "ack", **ack})

    def _apply_registry_snapshot(self, payload: bytes) -> None:
        n = payload[0]
        view = {}
        for i in range(n):
            periph, state, executor = payload[1 + 3 * i : 4 + 3 * i]
            view[periph] = {"state": ("disabled", "enabled", "error")[state],
                            "executor": ("", "left", "right")[executor]}
        self.periph_view = view

    def send_config(self, periph: int, endpoint: int, value: bytes) -> int:
        seq = self.config_seq
        self.config_seq = (self.config_seq + 1) & 0xFFFF
        frame = HostFrame(MsgType.CONFIG, periph, endpoint=endpoint, seq=seq, payload=value)
        self.pending_configs[seq] = (periph, endpoint)
        self.eco.host_to_bud_port.send(encode_frame(frame))
        return seq

    def emit_summary(self, now_us: int) -> None:
        """Periodic roll-up stream message (consoles aggregate client-side)."""
        vitals = {}
        for periph, events in sorted(self.vitals.items()):
            values = [v[0] for _, v in events]
            vitals[PERIPH_NAMES.get(periph, hex(periph))] = {
                "mean": round(float(np.mean(values)), 2), "n": len(values),
                "last": list(events[-1][1]),
            }
        self._emit({"kind": "summary", "t_us": now_us, "vitals": vitals})

    def audit_sequences(self) -> dict:
        """Check the DATA/EVENT stream is gap-free and duplicate-free."""
        gaps = dups = 0
        for i, seq in enumerate(self.seq_log):
            expect = i & 0xFFFF
            if seq != expect:
                if seq in self.seq_log[max(0, i - 3) : i]:
                    dups += 1
                else:
                    gaps += 1
        return {"frames": len(self.seq_log), "gaps": gaps, "dups": dups}


@dataclass
class _Task:
    next_due: int
    order: int
    phase: str
    fn: object
    period: int | None = None


class Ecosystem:
    """Scenario assembly plus the deterministic scheduler."""

    def __init__(self, scenario: Scenario, mode: ClockMode = ClockMode.VIRTUAL):
        self.scenario = scenario.validate()
        self.clock = VirtualClock(mode)
        self.trace = Trace()
        self.truth: dict[str, GroundTruth] = {}
        self.streams: dict[str, dict[int, SampleFrame]] = {}
        self._pregen()

        self.host = HostNode(self)
        self.nodes: dict[str, BudNode] = {}
        for side in ("left", "right"):
            self.nodes[side] = BudNode(side, self)
        self._build_links()
        self._build_role_managers()
        self._tasks: list[_Task] = []
        self._task_order = 0
        self._build_apps_and_tasks()
        self._initial_assignments()

    # -- construction -------------------------------------------------------

    def _pregen(self) -> None:
        sc = self.scenario
        dur = sc.duration_s
        for i, side in enumerate(("left", "right")):
            seed = sc.seed * 2 + i + 1
            params = PpgParams(
                fs=sc.native.ppg_hz, hr_bpm=sc.subject.hr_bpm, rr_bpm=sc.subject.rr_bpm,
                riiv_depth=sc.subject.riiv_depth, ac_dc_green=sc.subject.ac_dc_green,
                ac_dc_red=sc.subject.ac_dc_red, ac_dc_ir=sc.subject.ac_dc_ir,
                noise_rms=sc.subject.noise_rms, motion=sc.subject.motion,
                ibi_jitter_ms=sc.subject.ibi_jitter_ms,
            )
            ppg, truth = gen_ppg(params, dur, seed=seed)
            imu_frame, imu_truth = gen_imu(sc.subject.motion, sc.native.imu_hz, dur, seed=seed)
            temp = gen_temp(sc.subject.temp_profile(), sc.native.temp_hz, dur, seed=seed)
            streams = {PERIPH_PPG: ppg, PERIPH_IMU9: imu_frame, PERIPH_TEMP: temp}
            if sc.bp.enabled:
                audio, audio_truth = gen_inear_audio(
                    truth, sc.native.audio_hz, sc.subject.vtt_ms, dur, seed=seed
                )
                streams[PERIPH_MIC_IN] = audio
                truth.s1_times = audio_truth.s1_times
                truth.vtt_ms = sc.subject.vtt_ms
            truth.step_times = imu_truth.step_times
            truth.nod_times = imu_truth.nod_times
            truth.core_temp_c = sc.subject.temp_c
            self.streams[side] = streams
            self.truth[side] = truth

    def _build_links(self) -> None:
        sc = self.scenario
        us = lambda s: int(s * 1e6)
        host_parts = [(us(a), us(b)) for a, b in sc.links.host_partitions_s]
        peer_parts = [(us(a), us(b)) for a, b in sc.links.peer_partitions_s]
        mk = lambda name, lat, loss, parts: Channel(
            name, int(lat * 1000), loss, parts, sc.seed, self.clock, self.trace
        )
        self.ch_l2r = mk("l2r", sc.links.peer_latency_ms, 0.0, peer_parts)
        self.ch_r2l = mk("r2l", sc.links.peer_latency_ms, 0.0, peer_parts)
        self.ch_to_host = mk("bud2host", sc.links.host_latency_ms, sc.links.host_loss_pct, host_parts)
        self.ch_to_bud = mk("host2bud", sc.links.host_latency_ms, sc.links.host_loss_pct, host_parts)
        self.ch_l2r.receiver = lambda data, now: self.nodes["right"].router.on_peer_bytes(data)
        self.ch_r2l.receiver = lambda data, now: self.nodes["left"].router.on_peer_bytes(data)
        self.ch_to_host.receiver = lambda data, now: self.host.on_bytes(data, now)
        self.ch_to_bud.receiver = lambda data, now: self.primary_node().router.on_host_bytes(data)

        self.ports: list[LinkPort] = []

        def port(channel, owner):
            p = LinkPort(channel, owner, on_bytes_sent=None)
            p.now_fn = lambda: self.clock.now_us
            self.ports.append(p)
            return p

        left, right = self.nodes["left"], self.nodes["right"]
        left_peer = port(self.ch_l2r, "left")
        right_peer = port(self.ch_r2l, "right")
        left_host = port(self.ch_to_host, "left")
        right_host = port(self.ch_to_host, "right")
        for p, side in ((left_peer, "left"), (right_peer, "right"),
                        (left_host, "left"), (right_host, "right")):
            node = self.nodes[side]
            p.on_bytes_sent = lambda n, node=node: node.account("radio", n)
        left.router.send_peer_raw = left_peer.send
        right.router.send_peer_raw = right_peer.send
        left.router.send_host_raw = left_host.send
        right.router.send_host_raw = right_host.send
        self.host_to_bud_port = port(self.ch_to_bud, "host")

    def _build_role_managers(self) -> None:
        sc = self.scenario
        period = sc.rotation.period_s if sc.rotation.enabled else 0
        self.role_mgrs: dict[str, RoleManager] = {}
        for side in ("left", "right"):
            node = self.nodes[side]
            hooks = {
                "freeze": node.router.freeze,
                "unfreeze": node.router.unfreeze,
                "collect_state": node.router.collect_session,
                "apply_state": node.router.apply_session,
                "set_role": lambda role, s=side: self._on_role_change(s, role),
                "schedule_flip": lambda ts, s=side: self.add_oneshot(
                    ts, "loadbalance", lambda now, s=s: self.role_mgrs[s].flip_check(now)
                ),
            }
            mgr = RoleManager(
                side, node.bus, self.clock, period,
                int(sc.links.peer_latency_ms * 1000), hooks,
                initial_primary=sc.initial_primary,
                trace=lambda cat, detail, s=side: self.trace.add(
                    self.clock.now_us, s, cat, **detail
                ),
            )
            self.role_mgrs[side] = mgr
            node.router.set_role(mgr.role)
        self._sync_host_flags()

    def _on_role_change(self, side: str, role: str) -> None:
        self.nodes[side].router.set_role(role)
        self.trace.add(self.clock.now_us, side, "role_swap", role=role)
        self._sync_host_flags()

    def _sync_host_flags(self) -> None:
        for side, node in self.nodes.items():
            node.router.host_up = self.role_mgrs[side].role == "primary"

    def primary_side(self) -> str:
        primaries = [s for s, m in self.role_mgrs.items() if m.role == "primary"]
        if len(primaries) != 1:
            raise SimError(f"primary invariant violated: {primaries}")
        return primaries[0]

    def primary_node(self) -> BudNode:
        return self.nodes[self.primary_side()]

    def peer_up(self, now_us: int) -> bool:
        return not (self.ch_l2r.partitioned(now_us) or self.ch_r2l.partitioned(now_us))

    # -- tasks ----------------------------------------------------------------

    def add_task(self, phase: str, period_us: int, fn, offset_us: int = 0) -> None:
        self._tasks.append(_Task(offset_us or period_us, self._task_order, phase, fn, period_us))
        self._task_order += 1

    def add_oneshot(self, due_us: int, phase: str, fn) -> None:
        self._tasks.append(_Task(due_us, self._task_order, phase, fn, None))
        self._task_order += 1

    def _build_apps_and_tasks(self) -> None:
        sc = self.scenario
        for side in ("left", "right"):
            node = self.nodes[side]
            for periph, block_us in SENSOR_BLOCK_US.items():
                if periph == PERIPH_MIC_IN and not sc.bp.enabled:
                    continue
                self.add_task("sensors", block_us,
                              lambda now, n=node, p=periph, b=block_us: self._emit_sensor(n, p, b, now))
            if sc.vitals.enabled:
                app = VitalsApp(node, sc.vitals)
                node.apps["vitals"] = app
                app.setup()
                # tasks poll at the HR cadence; each estimator's own cadence is
                # set by its subscription window advance (tasks no-op otherwise)
                poll_us = sc.vitals.hr_period_s * 1_000_000
                self.add_task("vitals", poll_us, app.hr_task)
                self.add_task("vitals", poll_us, app.spo2_task)
                self.add_task("vitals", poll_us, app.rr_task)
                self.add_task("vitals", poll_us, app.temp_task)
                for periph in (PERIPH_HR, PERIPH_HRV, PERIPH_SPO2, PERIPH_RR, PERIPH_TEMP_CORE):
                    node.registry.set_state(periph, PeripheralState.ENABLED)
            if sc.bp.enabled:
                app = BpApp(node, sc.bp)
                node.apps["bp"] = app
                app.setup()
                self.add_task("vitals", min(sc.bp.period_s, 5) * 1_000_000, app.bp_task)
                node.registry.set_state(PERIPH_BP, PeripheralState.ENABLED)
            if sc.audio.playback:
                self.add_task("dsp", 1_000_000,
                              lambda now, n=node: n.account("playback", 1_000_000))
            self.add_task("loadbalance", 1_000_000,
                          lambda now, n=node: self._db_sync(n))
            rot = self.role_mgrs[side]
            if sc.rotation.enabled:
                period_us = int(sc.rotation.period_s * 1e6)
                self.add_task("loadbalance", period_us,
                              lambda now, m=rot: m.maybe_initiate(now, self.peer_up(now)),
                              offset_us=period_us - loadbalance.SWAP_LEAD_US)
        self.add_task("loadbalance", 2_000_000, self._registry_snapshot)
        self.add_task("loadbalance", 10_000_000, self._energy_snapshot)
        self.add_task("loadbalance", 30_000_000, self.host.emit_summary)
        self.add_task("loadbalance", int(sc.reassign_period_s * 1e6), self._reassign)
        if sc.recording.host:
            self.add_oneshot(1_000, "loadbalance", self._host_recording_setup)

    def _initial_assignments(self) -> None:
        node = self.nodes[self.scenario.initial_primary]
        secondary = "right" if self.scenario.initial_primary == "left" else "left"
        for periph in (PERIPH_HR, PERIPH_BP, PERIPH_PPG, PERIPH_IMU9, PERIPH_TEMP,
                       PERIPH_MIC_IN):
            node.db.local_update(periph, executor=secondary if self.scenario.policy ==
                                 "balance_energy" else self.scenario.policy.split("_")[1])
        # seed both replicas before the first sync round
        for periph in list(node.db.dirty):
            entry = node.db.entries[periph]
            self.nodes[secondary].db.merge({periph: entry})

    # -- periodic work ---------------------------------------------------------

    def _emit_sensor(self, node: BudNode, periph: int, block_us: int, now_us: int) -> None:
        mux = node.dist.muxes.get(periph)
        if mux is None or node.registry.state(periph) is not PeripheralState.ENABLED:
            return
        rate = mux.sensor_rate
        if rate <= 0:
            return
        native = self.streams[node.side].get(periph)
        if native is None:
            return
        t_start = now_us - block_us
        step = native.fs // rate
        count = block_us * rate // 1_000_000
        i0 = t_start * native.fs // 1_000_000
        idx = i0 + np.arange(count) * step
        if len(idx) == 0 or idx[-1] >= native.n_samples:
            return
        data = native.data[:, idx]
        if periph == PERIPH_PPG:
            led = node.router.config_targets[PERIPH_PPG].values.get(
                wire.EP_LED_CURRENT_MA, DEFAULT_LED_MA
            )
            if led != DEFAULT_LED_MA:
                data = np.round(data.astype(np.float64) * led / DEFAULT_LED_MA).astype(np.int32)
        frame = SampleFrame(periph, t_start, rate, native.channels, data)
        mux.push(frame)
        node.account(SENSOR_ACTIVITY[periph], block_us)
        if self.scenario.recording.device:
            node.recorder_raw[periph].append((t_start, rate, data))

    def _db_sync(self, node: BudNode) -> None:
        for periph in sorted(node.db.dirty):
            try:
                node.bus.send(imc.TRIG_DB_SYNC, node.db.encode_entry(periph), DEST_PEER)
            except imc.ImcError:
                continue
        node.db.dirty.clear()
        node.bus.send(imc.TRIG_BATTERY,
                      struct.pack("<Bd", node.node_id, node.ledger.drained_mah), DEST_PEER)

    def _registry_snapshot(self, now_us: int) -> None:
        node = self.primary_node()
        periphs = node.registry.ids()[:20]
        payload = bytes([len(periphs)])
        for periph in periphs:
            state = node.registry.state(periph)
            code = ("disabled", "enabled", "error").index(state.value)
            executor = node.executor_of(periph)
            payload += bytes([periph, code, ("", "left", "right").index(executor)])
        node.bus.send(imc.TRIG_REGISTRY_SNAPSHOT, payload, DEST_ECOSYSTEM)

    def _energy_snapshot(self, now_us: int) -> None:
        for side, node in self.nodes.items():
            self.trace.add(now_us, side, "energy",
                           drained_mah=round(node.ledger.drained_mah, 6),
                           fraction=round(node.ledger.fraction, 6))

    def _reassign(self, now_us: int) -> None:
        side = self.primary_side()
        node = self.nodes[side]
        secondary = "right" if side == "left" else "left"
        ledgers = {side: node.ledger}
        peer_ledger = EnergyLedger()
        peer_ledger.drained_mah = node.peer_drained
        ledgers[secondary] = peer_ledger
        for periph in (PERIPH_HR, PERIPH_BP):
            try:
                chosen = assign_executor(periph, self.scenario.policy, ledgers, secondary)
            except loadbalance.NoCandidate:
                continue
            if node.executor_of(periph) != chosen:
                node.db.local_update(periph, executor=chosen)

    def _host_recording_setup(self, now_us: int) -> None:
        rec = self.scenario.recording
        for periph, on, rate in (
            (PERIPH_PPG, rec.ppg, rec.ppg_rate_hz),
            (PERIPH_IMU9, rec.imu, rec.imu_rate_hz),
            (PERIPH_TEMP, rec.temp, rec.temp_rate_hz),
        ):
            if on:
                self.host.send_config(periph, EP_SAMPLING_RATE_HZ,
                                      int(rate).to_bytes(2, "little"))
                self.host.send_config(periph, EP_ENABLE, b"\x01")

    # -- scheduler ---------------------------------------------------------------

    def _channels(self):
        return (self.ch_l2r, self.ch_r2l, self.ch_to_host, self.ch_to_bud)

    def _next_due(self) -> int | None:
        times = [t.next_due for t in self._tasks]
        for ch in self._channels():
            nxt = ch.next_delivery()
            if nxt is not None:
                times.append(nxt)
        for port in (*self.ports, self.host_to_bud_port):
            if port.hold:
                heal = port.channel.next_heal(self.clock.now_us)
                if heal is not None:
                    times.append(heal)
        return min(times) if times else None

    def _run_phase(self, phase: str, now_us: int) -> None:
        due = [t for t in self._tasks if t.phase == phase and t.next_due <= now_us]
        for task in sorted(due, key=lambda t: t.order):
            task.fn(now_us)
            if task.period is None:
                self._tasks.remove(task)
            else:
                while task.next_due <= now_us:
                    task.next_due += task.period

    def _settle_messages(self, now_us: int) -> None:
        for _ in range(64):
            active = 0
            for node in self.nodes.values():
                active += node.bus.drain()
            for port in (*self.ports, self.host_to_bud_port):
                active += port.flush(now_us)
            for ch in self._channels():
                active += ch.deliver_due(now_us)
            if not active:
                return
        raise SimError("message settlement did not converge")

    def step_until(self, t_end_us: int) -> None:
        while True:
            nxt = self._next_due()
            if nxt is None or nxt > t_end_us:
                break
            target = max(nxt, self.clock.now_us)
            self.clock.advance_to(target)
            for phase in ("sensors", "dsp", "vitals"):
                self._run_phase(phase, target)
            self._settle_messages(target)
            self._run_phase("loadbalance", target)
            self._settle_messages(target)
        self.clock.advance_to(t_end_us)

    def run(self, on_progress=None) -> dict:
        end_us = int(self.scenario.duration_s * 1e6)
        chunk = max(end_us // 100, 1_000_000)
        t = 0
        while t < end_us:
            t = min(t + chunk, end_us)
            self.step_until(t)
            if on_progress is not None:
                on_progress(t / end_us)
        return self.summary()

    # -- results -------------------------------------------------------------

    def link_conservation(self) -> dict:
        out = {}
        for ch in self._channels():
            in_flight = len(ch._flight)
            out[ch.name] = {"tx": ch.tx, "rx": ch.rx, "lost": ch.lost,
                            "in_flight": in_flight,
                            "balanced": ch.tx == ch.rx + ch.lost + in_flight}
        return out

    def summary(self) -> dict:
        sc = self.scenario
        truth = self.truth["left"]
        vit_err = {}
        for periph, name, true_value in (
            (PERIPH_HR, "hr_bpm", truth.hr_bpm),
            (PERIPH_RR, "rr_bpm", truth.rr_bpm),
            (PERIPH_SPO2, "spo2_pct", truth.spo2_pct),
        ):
            events = self.host.vitals.get(periph, [])
            if events:
                values = [v[0] for _, v in events]
                vit_err[name] = {
                    "mean": round(float(np.mean(values)), 3),
                    "truth": round(true_value, 3),
                    "abs_err": round(abs(float(np.mean(values)) - true_value), 3),
                    "n": len(values),
                }
        bp_events = self.host.vitals.get(PERIPH_BP, [])
        if bp_events:
            vit_err["bp"] = {"last_sbp": bp_events[-1][1][0], "last_dbp": bp_events[-1][1][1],
                             "n": len(bp_events)}
        audit = self.host.audit_sequences()
        swaps = sum(m.swap_count for m in self.role_mgrs.values()) // 2
        return {
            "scenario": sc.name,
            "seed": sc.seed,
            "duration_s": sc.duration_s,
            "vitals": vit_err,
            "host_seq_audit": audit,
            "links": self.link_conservation(),
            "swaps": swaps,
            "energy": {side: {"drained_mah": round(n.ledger.drained_mah, 6),
                              "by_activity": {k: round(v, 6) for k, v in
                                              sorted(n.ledger.by_activity.items())}}
                       for side, n in self.nodes.items()},
            "host_acks": len(self.host.acks),
            "errors": sum(len(n.errors) for n in self.nodes.values()),
        }
