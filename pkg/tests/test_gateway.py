import json
import threading
import time

import pytest

from budsim.core import ClockMode
from budsim.gateway import CommandError, Gateway, StreamDump, run_realtime, translate_command
from budsim.scenario import scenario_from_dict
from budsim.sim import Ecosystem
from budsim import core, wire


def test_command_translation_table():
    periph, ep, val = translate_command("set_audio_mode", {"mode": "anc"})
    assert (periph, ep, val) == (core.PERIPH_MIC_OUT_TOP, wire.EP_AUDIO_MODE, b"\x01")
    periph, ep, val = translate_command("start_bp_measurement", {})
    assert (periph, ep, val) == (core.PERIPH_BP, wire.EP_ENABLE, b"\x01")
    periph, ep, val = translate_command("set_sampling_rate", {"peripheral": "ppg", "hz": 100})
    assert (periph, ep, val) == (core.PERIPH_PPG, wire.EP_SAMPLING_RATE_HZ, b"\x64\x00")
    periph, ep, val = translate_command("set_led_current", {"ma": 250})
    assert val == bytes([250])  # out-of-range values still reach the device
    with pytest.raises(CommandError):
        translate_command("set_audio_mode", {"mode": "loud"})
    with pytest.raises(CommandError):
        translate_command("toggle_sensor", {"peripheral": "nope"})


def test_stream_dump_virtual_mode(tmp_path):
    sc = scenario_from_dict({
        "name": "dump", "seed": 6, "duration_s": 30.0,
        "rotation": {"enabled": False}, "recording": {"host": True},
        "bp": {"enabled": False},
    })
    eco = Ecosystem(sc)
    dump_path = tmp_path / "stream.jsonl"
    dump = StreamDump(dump_path)
    eco.host.stream_hook = dump
    eco.run()
    dump.close()
    lines = [json.loads(l) for l in dump_path.read_text().splitlines()]
    kinds = {l["payload"].get("kind") for l in lines if l["type"] == "stream"}
    assert "vital" in kinds and "plot" in kinds
    assert any(l["type"] == "ack" for l in lines)
    seqs = [l["seq"] for l in lines]
    assert seqs == sorted(seqs)


def test_gateway_live_roundtrip():
    from websockets.sync.client import connect

    sc = scenario_from_dict({
        "name": "live", "seed": 8, "duration_s": 25.0,
        "rotation": {"enabled": False}, "recording": {"host": False, "device": False},
        "vitals": {"enabled": True, "window_s": 11, "hr_period_s": 2},
        "bp": {"enabled": True, "period_s": 20, "window_s": 15},
    })
    eco = Ecosystem(sc, mode=ClockMode.REALTIME)
    gateway = Gateway(eco, "127.0.0.1", 0)
    gateway.start()
    host, port = gateway.bound

    result = {}

    def sim():
        result["summary"] = run_realtime(eco, gateway, speed=25.0)

    sim_thread = threading.Thread(target=sim, daemon=True)
    sim_thread.start()

    acks, streams = {}, []
    with connect(f"ws://{host}:{port}", open_timeout=10) as ws:
        hello = json.loads(ws.recv(timeout=10))
        assert hello["type"] == "hello"
        ws.send(json.dumps({"type": "command", "seq": 1,
                            "payload": {"cmd": "set_audio_mode", "args": {"mode": "anc"}}}))
        ws.send(json.dumps({"type": "command", "seq": 2,
                            "payload": {"cmd": "set_led_current", "args": {"ma": 250}}}))
        ws.send(json.dumps({"type": "command", "seq": 3,
                            "payload": {"cmd": "start_bp_measurement", "args": {}}}))
        deadline = time.monotonic() + 30
        got_hr = lambda: any(s["vital"] == "hr" for s in streams)
        while time.monotonic() < deadline and (len(acks) < 3 or not got_hr()):
            try:
                msg = json.loads(ws.recv(timeout=5))
            except TimeoutError:
                break
            if msg["type"] == "ack":
                acks[msg["seq"]] = msg["payload"]
            elif msg["type"] == "stream" and msg["payload"]["kind"] == "vital":
                streams.append(msg["payload"])

    sim_thread.join(timeout=30)
    gateway.stop()
    assert acks[1]["ok"] and acks[1]["cmd"] == "set_audio_mode"
    assert not acks[2]["ok"] and acks[2]["err_name"] == "BAD_VALUE"
    assert acks[3]["ok"]
    assert any(s["vital"] == "hr" for s in streams)
    # the anc command really reached the DSP on the bud
    assert eco.primary_node().audio.config.mode == "anc"


def test_gateway_neutrality_same_effect_as_raw_config():
    def run(via_gateway: bool):
        sc = scenario_from_dict({
            "name": "neutral", "seed": 4, "duration_s": 10.0,
            "rotation": {"enabled": False}, "recording": {"host": False, "device": False},
            "bp": {"enabled": False},
        })
        eco = Ecosystem(sc)
        eco.step_until(2_000_000)
        if via_gateway:
            periph, ep, val = translate_command("set_audio_mode", {"mode": "passthrough"})
            eco.host.send_config(periph, ep, val)
        else:
            eco.host.send_config(core.PERIPH_MIC_OUT_TOP, wire.EP_AUDIO_MODE, b"\x02")
        eco.step_until(10_000_000)
        return (eco.nodes["left"].audio.config.mode, eco.nodes["right"].audio.config.mode,
                [a["err"] for a in eco.host.acks])

    assert run(True) == run(False)
