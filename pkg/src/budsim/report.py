"""Scenario outputs: delimited exports, summary, and rendered figures.

Layout under the output directory::

    trace.jsonl          every trace event, one JSON object per line
    summary.json         per-vital accuracy vs ground truth, link/energy audit
    host/                what the host observed over the wire
        records.csv      long format: t_us, peripheral, channel, value (raw)
        ppg.csv ...      wide per-sensor files in physical units
        vitals.csv       t_us, vital, value, value2
    left/ right/         the same schema from each bud's local recorder
    figures/             PNG renders of the raw streams, vitals and energy
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .core import PERIPH_BP, PERIPH_HR, PERIPH_NAMES, PERIPH_RR, PERIPH_SCALES, PERIPH_SPO2

_WIDE_FILES = {0x01: "ppg.csv", 0x02: "imu.csv", 0x03: "temp.csv", 0x04: "mic.csv"}
_CHANNELS = {
    0x01: ("green", "red", "ir"),
    0x02: ("ax", "ay", "az", "gx", "gy", "gz", "mx", "my", "mz"),
    0x03: ("skin_c",),
    0x04: ("mic",),
}


def _write_records(path: Path, blocks: dict[int, list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_us", "peripheral", "channel", "value"])
        for periph in sorted(blocks):
            channels = _CHANNELS.get(periph, ())
            for t0, fs, data in blocks[periph]:
                for ch_idx, ch_name in enumerate(channels[: data.shape[0]]):
                    step = 1_000_000 // fs
                    for i in range(data.shape[1]):
                        w.writerow([t0 + i * step, PERIPH_NAMES.get(periph, periph),
                                    ch_name, int(data[ch_idx, i])])


def _write_wide(dirpath: Path, blocks: dict[int, list]) -> None:
    for periph, file_blocks in sorted(blocks.items()):
        name = _WIDE_FILES.get(periph)
        if name is None or not file_blocks:
            continue
        scale = PERIPH_SCALES.get(periph, 1.0)
        channels = _CHANNELS.get(periph, ())
        with open(dirpath / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_us", *channels])
            for t0, fs, data in file_blocks:
                step = 1_000_000 // fs
                for i in range(data.shape[1]):
                    w.writerow([t0 + i * step] +
                               [f"{data[ch, i] * scale:.6f}" for ch in range(data.shape[0])])


def _write_vitals(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_us", "vital", "value", "value2"])
        for t_us, periph, values in rows:
            w.writerow([t_us, PERIPH_NAMES.get(periph, periph), f"{values[0]:.2f}",
                        f"{values[1]:.2f}" if len(values) > 1 else ""])


def _figure_raw(eco, figdir: Path) -> None:
    blocks = eco.host.raw.get(0x01) or eco.nodes["left"].recorder_raw.get(0x01)
    if not blocks:
        return
    t0, fs, _ = blocks[0]
    data = np.concatenate([b[2] for b in blocks], axis=1)
    n = min(data.shape[1], fs * 10)
    t = np.arange(n) / fs
    fig, axes = plt.subplots(3, 1, figsize=(9, 6), sharex=True)
    for ax, ch, label, color in zip(axes, range(3), ("green", "red", "ir"),
                                    ("tab:green", "tab:red", "tab:purple")):
        ax.plot(t, data[ch, :n], color=color, lw=0.8)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("time (s)")
    fig.suptitle("PPG channels (first 10 s)")
    fig.tight_layout()
    fig.savefig(figdir / "ppg.png", dpi=110)
    plt.close(fig)


def _figure_vitals(eco, figdir: Path) -> None:
    truth = eco.truth["left"]
    panels = [
        (PERIPH_HR, "HR (bpm)", truth.hr_bpm),
        (PERIPH_RR, "RR (breaths/min)", truth.rr_bpm),
        (PERIPH_SPO2, "SpO2 (%)", truth.spo2_pct),
        (PERIPH_BP, "BP (mmHg)", None),
    ]
    fig, axes = plt.subplots(len(panels), 1, figsize=(9, 9), sharex=True)
    for ax, (periph, label, true_val) in zip(axes, panels):
        events = eco.host.vitals.get(periph, [])
        if events:
            t = [e[0] / 1e6 for e in events]
            ax.plot(t, [e[1][0] for e in events], "o-", ms=3, label="device")
            if periph == PERIPH_BP:
                ax.plot(t, [e[1][1] for e in events], "s-", ms=3, label="diastolic")
        if true_val is not None:
            ax.axhline(true_val, color="k", ls="--", lw=1, label="truth")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend(loc="upper right", fontsize=8)
    axes[-1].set_xlabel("time (s)")
    fig.suptitle("Host-observed vitals vs ground truth")
    fig.tight_layout()
    fig.savefig(figdir / "vitals.png", dpi=110)
    plt.close(fig)


def _figure_energy(eco, figdir: Path) -> None:
    events = eco.trace.filtered("energy")
    if not events:
        return
    fig, ax = plt.subplots(figsize=(9, 4))
    for side, color in (("left", "tab:blue"), ("right", "tab:orange")):
        pts = [(e["t_us"] / 1e6, e["detail"]["drained_mah"]) for e in events
               if e["node"] == side]
        if pts:
            ax.plot(*zip(*pts), color=color, label=f"{side} bud")
    for e in eco.trace.filtered("role_swap"):
        if e["detail"].get("role") == "primary":
            ax.axvline(e["t_us"] / 1e6, color="gray", ls=":", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("drained (mAh)")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.suptitle("Battery drain per bud (dotted lines: role swaps)")
    fig.tight_layout()
    fig.savefig(figdir / "energy.png", dpi=110)
    plt.close(fig)


def write_outputs(eco, outdir: str | Path, figures: bool = True) -> dict:
    """Export trace, CSVs, summary and figures for a finished run."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    eco.trace.write_jsonl(outdir / "trace.jsonl")

    host_dir = outdir / "host"
    host_dir.mkdir(exist_ok=True)
    _write_records(host_dir / "records.csv", eco.host.raw)
    _write_wide(host_dir, eco.host.raw)
    host_vitals = [
        (t, periph, values)
        for periph, events in sorted(eco.host.vitals.items())
        for t, values in events
    ]
    host_vitals.sort(key=lambda r: (r[0], r[1]))
    _write_vitals(host_dir / "vitals.csv", host_vitals)

    for side in ("left", "right"):
        node = eco.nodes[side]
        side_dir = outdir / side
        side_dir.mkdir(exist_ok=True)
        _write_records(side_dir / "records.csv", node.recorder_raw)
        _write_wide(side_dir, node.recorder_raw)
        _write_vitals(side_dir / "vitals.csv", node.recorder_vitals)

    summary = eco.summary()
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=str)

    if figures:
        figdir = outdir / "figures"
        figdir.mkdir(exist_ok=True)
        _figure_raw(eco, figdir)
        _figure_vitals(eco, figdir)
        _figure_energy(eco, figdir)
    return summary
