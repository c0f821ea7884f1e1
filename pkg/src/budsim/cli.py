"""Command-line interface.

    budsim run <scenario.yaml> [--seed N] [--out DIR] [--realtime]
               [--gateway HOST:PORT] [--speed X] [--no-figures]
               [--stream-dump FILE]
    budsim vitals <ppg.csv> [--audio mic.csv]
    budsim validate-model <blob>
    budsim trace <trace.jsonl> --filter CATEGORY

``OB_LOG`` sets the log level (debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("budsim")


def _setup_logging() -> None:
    level = os.environ.get("OB_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def cmd_run(args) -> int:
    from .core import ClockMode
    from .gateway import Gateway, StreamDump, run_realtime
    from .scenario import load_scenario
    from .sim import Ecosystem

    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    outdir = Path(args.out or f"out/{scenario.name}")
    mode = ClockMode.REALTIME if args.realtime else ClockMode.VIRTUAL
    eco = Ecosystem(scenario, mode=mode)

    dump = None
    if args.stream_dump:
        dump = StreamDump(args.stream_dump)
        eco.host.stream_hook = dump

    if args.realtime:
        gateway = None
        if args.gateway:
            host, _, port = args.gateway.rpartition(":")
            gateway = Gateway(eco, host or "127.0.0.1", int(port))
            if dump is not None:
                log.warning("--stream-dump ignored when a gateway is attached")
            gateway.start()
            print(f"gateway listening on ws://{gateway.bound[0]}:{gateway.bound[1]}")
        summary = run_realtime(eco, gateway, speed=args.speed)
        if gateway is not None:
            gateway.stop()
    else:
        summary = eco.run()
    if dump is not None:
        dump.close()

    from .report import write_outputs  # deferred: pulls in matplotlib

    write_outputs(eco, outdir, figures=not args.no_figures)
    print(f"outputs written to {outdir}")
    print(json.dumps(summary["vitals"], indent=2, sort_keys=True))
    audit = summary["host_seq_audit"]
    print(f"host frames {audit['frames']}, gaps {audit['gaps']}, dups {audit['dups']}, "
          f"swaps {summary['swaps']}")
    return 0


def _frame_from_csv(path: str):
    from .core import PERIPH_PPG, SampleFrame

    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    t_us = np.array([int(float(r[0])) for r in rows])
    if len(t_us) < 2:
        raise SystemExit("csv too short")
    fs = round(1e6 / float(np.median(np.diff(t_us))))
    channels = tuple(header[1:])
    data = np.array([[float(v) for v in r[1:]] for r in rows]).T
    return SampleFrame(PERIPH_PPG, int(t_us[0]), int(fs), channels,
                       np.round(data).astype(np.int32))


def cmd_vitals(args) -> int:
    from . import vitals as vt
    from .core import PERIPH_MIC_IN, SampleFrame

    frame = _frame_from_csv(args.csv)
    print(f"loaded {frame.n_samples} samples at {frame.fs} Hz, "
          f"channels {', '.join(frame.channels)}")
    results = {}
    try:
        series = vt.detect_pulse(frame)
        hr, rmssd, sdnn = vt.hr_hrv(series)
        results.update(hr_bpm=round(hr, 2), rmssd_ms=round(rmssd, 2), sdnn_ms=round(sdnn, 2))
    except vt.VitalsError as e:
        results["hr_error"] = str(e)
    if {"red", "ir"} <= set(frame.channels):
        try:
            red = frame.slice_samples(0, frame.n_samples)
            from .apps import channel_frame

            res = vt.spo2(channel_frame(frame, "red"), channel_frame(frame, "ir"))
            results.update(spo2_pct=round(res.spo2_pct, 2), r_ratio=round(res.r_ratio, 4))
        except vt.VitalsError as e:
            results["spo2_error"] = str(e)
    try:
        results["rr_bpm"] = round(vt.respiration_rate(frame), 2)
    except vt.VitalsError as e:
        results["rr_error"] = str(e)
    if args.audio:
        audio = _frame_from_csv(args.audio)
        audio = SampleFrame(PERIPH_MIC_IN, audio.t0_us, audio.fs, audio.channels, audio.data)
        try:
            s1 = vt.detect_s1(audio)
            feats = vt.vtt_et(s1, series)
            results.update(vtt_ms=round(feats.vtt_ms, 2), et_ms=round(feats.et_ms, 2))
        except (vt.VitalsError, ValueError) as e:
            results["bp_error"] = str(e)
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def cmd_validate_model(args) -> int:
    from .mlengine import ChecksumMismatch, deserialize_model, validate_model

    blob = Path(args.blob).read_bytes()
    try:
        desc = deserialize_model(blob)
    except ChecksumMismatch as e:
        print(f"REJECTED: {e}")
        return 1
    violations = validate_model(desc)
    if violations:
        print(f"REJECTED ({len(violations)} violations):")
        for v in violations:
            print(f"  - {v}")
        return 1
    shapes = " -> ".join(str(tuple(l.out_shape)) for l in desc.layers)
    print(f"OK: {len(desc.layers)} layers, input {tuple(desc.input_shape)}, {shapes}")
    return 0


def cmd_trace(args) -> int:
    with open(args.trace) as fh:
        for line in fh:
            event = json.loads(line)
            if args.filter and event.get("category") != args.filter:
                continue
            detail = json.dumps(event["detail"], sort_keys=True)
            print(f"{event['t_us']:>12} {event['node']:<6} {event['category']:<12} {detail}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="budsim",
                                     description="dual-earbud platform simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--realtime", action="store_true")
    run.add_argument("--gateway", default=None, metavar="HOST:PORT")
    run.add_argument("--speed", type=float, default=1.0)
    run.add_argument("--no-figures", action="store_true")
    run.add_argument("--stream-dump", default=None, metavar="FILE")
    run.set_defaults(fn=cmd_run)

    vit = sub.add_parser("vitals", help="re-run estimators on a recorded CSV")
    vit.add_argument("csv")
    vit.add_argument("--audio", default=None)
    vit.set_defaults(fn=cmd_vitals)

    val = sub.add_parser("validate-model", help="check a model blob against accelerator limits")
    val.add_argument("blob")
    val.set_defaults(fn=cmd_validate_model)

    tr = sub.add_parser("trace", help="pretty-print a trace file")
    tr.add_argument("trace")
    tr.add_argument("--filter", default=None, metavar="CATEGORY")
    tr.set_defaults(fn=cmd_trace)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
