"""WebSocket gateway: the host-side bridge a companion console connects to.

Messages are JSON objects ``{"type", "seq", "payload"}``.  Clients send
``command`` messages; the gateway translates each one into exactly one
hostlink CONFIG frame (it is a pure host-side client with no backdoor into
bud internals), relays the CONFIG_RESP as an ``ack`` carrying the device's
error code, and fans out ``stream`` messages for vitals, raw-plot windows and
periodic summaries.

Command vocabulary (payload ``{"cmd": ..., "args": {...}}``):

    set_audio_mode        {"mode": "off" | "anc" | "passthrough"}
    start_bp_measurement  {}
    set_sampling_rate     {"peripheral": "ppg", "hz": 50}
    set_led_current       {"ma": 12}
    toggle_sensor         {"peripheral": "imu9", "on": true}
    start_recording       {"peripheral": "ppg"}
    stop_recording        {"peripheral": "ppg"}
"""

from __future__ import annotations

import asyncio
import json
import logging
import queue
import threading
import time

from . import core, wire
from .wire import ErrCode

log = logging.getLogger("budsim.gateway")

_NAME_TO_PERIPH = {name: pid for pid, name in core.PERIPH_NAMES.items()}


class CommandError(Exception):
    pass


def translate_command(cmd: str, args: dict) -> tuple[int, int, bytes]:
    """Map a console command to one (peripheral, endpoint, value) CONFIG write."""
    if cmd == "set_audio_mode":
        modes = {"off": 0, "anc": 1, "passthrough": 2}
        if args.get("mode") not in modes:
            raise CommandError(f"unknown audio mode {args.get('mode')!r}")
        return core.PERIPH_MIC_OUT_TOP, wire.EP_AUDIO_MODE, bytes([modes[args["mode"]]])
    if cmd == "start_bp_measurement":
        return core.PERIPH_BP, wire.EP_ENABLE, b"\x01"
    if cmd == "set_sampling_rate":
        periph = _NAME_TO_PERIPH.get(args.get("peripheral", ""))
        if periph is None:
            raise CommandError(f"unknown peripheral {args.get('peripheral')!r}")
        return periph, wire.EP_SAMPLING_RATE_HZ, int(args["hz"]).to_bytes(2, "little")
    if cmd == "set_led_current":
        ma = int(args["ma"])
        if not 0 <= ma <= 255:
            raise CommandError("led current must fit one byte")
        return core.PERIPH_PPG, wire.EP_LED_CURRENT_MA, bytes([ma])
    if cmd in ("toggle_sensor", "start_recording", "stop_recording"):
        periph = _NAME_TO_PERIPH.get(args.get("peripheral", ""))
        if periph is None:
            raise CommandError(f"unknown peripheral {args.get('peripheral')!r}")
        on = args.get("on", cmd == "start_recording")
        return periph, wire.EP_ENABLE, b"\x01" if on else b"\x00"
    raise CommandError(f"unknown command {cmd!r}")


class StreamDump:
    """Record the gateway's outbound stream to a JSONL file (fixture replay)."""

    def __init__(self, path):
        self._fh = open(path, "w")
        self._seq = 0

    def __call__(self, message: dict) -> None:
        kind = message.get("kind")
        mtype = "ack" if kind == "ack" else "stream"
        self._seq += 1
        self._fh.write(json.dumps(
            {"type": mtype, "seq": self._seq, "payload": message}, sort_keys=True
        ) + "\n")

    def close(self) -> None:
        self._fh.close()


class Gateway:
    """Serves the console protocol for one running (realtime) ecosystem."""

    def __init__(self, eco, host: str = "127.0.0.1", port: int = 8765):
        self.eco = eco
        self.host = host
        self.port = port
        self.commands: "queue.Queue[tuple]" = queue.Queue()
        self._pending: dict[int, tuple[object, int, str]] = {}
        self._clients: set = set()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._server = None
        self._thread: threading.Thread | None = None
        self._stream_seq = 0
        self.bound: tuple[str, int] | None = None
        eco.host.stream_hook = self._on_host_stream

    # -- sim-thread side -----------------------------------------------------

    def poll_commands(self) -> None:
        """Apply queued console commands; called from the simulation loop."""
        while True:
            try:
                ws, client_seq, cmd, args = self.commands.get_nowait()
            except queue.Empty:
                return
            try:
                periph, endpoint, value = translate_command(cmd, args)
            except CommandError as e:
                self._send(ws, {"type": "error", "seq": client_seq,
                                "payload": {"message": str(e)}})
                continue
            config_seq = self.eco.host.send_config(periph, endpoint, value)
            self._pending[config_seq] = (ws, client_seq, cmd)

    def _on_host_stream(self, message: dict) -> None:
        if message.get("kind") == "ack":
            entry = self._pending.pop(message["seq"], None)
            if entry is None:
                return
            ws, client_seq, cmd = entry
            err = message["err"]
            self._send(ws, {"type": "ack", "seq": client_seq, "payload": {
                "cmd": cmd, "ok": err == 0, "err": err,
                "err_name": ErrCode(err).name, "value": message["value"],
            }})
            return
        self._stream_seq += 1
        self._broadcast({"type": "stream", "seq": self._stream_seq, "payload": message})

    # -- asyncio side -----------------------------------------------------------

    def _send(self, ws, message: dict) -> None:
        if self._loop is None or ws is None:
            return
        data = json.dumps(message, sort_keys=True)
        self._loop.call_soon_threadsafe(asyncio.ensure_future, self._safe_send(ws, data))

    def _broadcast(self, message: dict) -> None:
        for ws in list(self._clients):
            self._send(ws, message)

    async def _safe_send(self, ws, data: str) -> None:
        try:
            await ws.send(data)
        except Exception:
            self._clients.discard(ws)

    async def _handler(self, ws):
        self._clients.add(ws)
        hello = {"type": "hello", "seq": 0, "payload": {
            "scenario": self.eco.scenario.name,
            "peripherals": {core.PERIPH_NAMES.get(p, str(p)): v
                            for p, v in self.eco.host.periph_view.items()},
        }}
        await ws.send(json.dumps(hello, sort_keys=True))
        try:
            async for raw in ws:
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    continue
                if msg.get("type") == "command":
                    payload = msg.get("payload", {})
                    self.commands.put((ws, msg.get("seq", 0),
                                       payload.get("cmd", ""), payload.get("args", {})))
        finally:
            self._clients.discard(ws)

    def start(self) -> None:
        import websockets

        started = threading.Event()
        failure: list[BaseException] = []

        def runner():
            async def main():
                self._loop = asyncio.get_running_loop()
                self._shutdown = asyncio.Event()
                try:
                    self._server = await websockets.serve(self._handler, self.host, self.port)
                except OSError as e:
                    failure.append(e)
                    started.set()
                    return
                sock = next(iter(self._server.sockets))
                self.bound = sock.getsockname()[:2]
                started.set()
                await self._shutdown.wait()
                self._server.close()
                await self._server.wait_closed()

            asyncio.run(main())

        self._thread = threading.Thread(target=runner, daemon=True, name="gateway")
        self._thread.start()
        started.wait(timeout=10)
        if failure:
            raise BindFailed(str(failure[0]))
        if self.bound is None:
            raise BindFailed("gateway did not start")
        log.info("gateway listening on %s:%s", *self.bound)

    def stop(self) -> None:
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self._shutdown.set)
        if self._thread is not None:
            self._thread.join(timeout=5)


class BindFailed(Exception):
    pass


def run_realtime(eco, gateway: Gateway | None = None, speed: float = 1.0,
                 wall_poll_s: float = 0.005) -> dict:
    """Pace the simulation against the wall clock, applying console commands
    between steps.  Virtual time advances at ``speed`` times real time."""
    end_us = int(eco.scenario.duration_s * 1e6)
    wall0 = time.monotonic()
    while eco.clock.now_us < end_us:
        target = min(end_us, int((time.monotonic() - wall0) * speed * 1e6))
        if gateway is not None:
            gateway.poll_commands()
        if target > eco.clock.now_us:
            eco.step_until(target)
        else:
            time.sleep(wall_poll_s)
    if gateway is not None:
        gateway.poll_commands()
        eco.step_until(end_us)
    return eco.summary()
