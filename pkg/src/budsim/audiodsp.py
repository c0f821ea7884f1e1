"""Fast/slow audio DSP: ANC and pass-through filter banks, output limiter,
8:1 decimation and slow-path signal routing.

The fast path is a pure block transform: feed-forward filtering of the
external microphones plus feedback filtering of the in-ear reference, mixed
with playback and passed through a soft limiter that keeps every output
sample at or below the 85 dB-SPL ceiling.  Levels map between digital full
scale and sound pressure through a single configurable offset.  The slow path
decimates high-rate microphone blocks by eight with an anti-alias FIR and
routes the result to the MCU bus or the Bluetooth SoC.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import signal

MODES = ("off", "anc", "passthrough")
DECIMATION = 8
LIMITER_CEILING_DBSPL = 85.0
LIMITER_KNEE_DB = 3.0          # transparent below ceiling - knee
MAX_BANK_TAPS = 64
DESTINATIONS = ("mcu_bus", "bt_soc")


class AudioError(Exception):
    pass


class LengthMismatch(AudioError):
    pass


class BadLength(AudioError):
    pass


class UnknownDestination(AudioError):
    pass


@dataclass(frozen=True)
class FilterBankParams:
    feedforward: np.ndarray
    feedback: np.ndarray
    variant: str

    def __post_init__(self):
        for name, taps in (("feedforward", self.feedforward), ("feedback", self.feedback)):
            arr = np.asarray(taps, dtype=float)
            if arr.ndim != 1 or len(arr) > MAX_BANK_TAPS or not np.all(np.isfinite(arr)):
                raise AudioError(f"{name} bank must be <= {MAX_BANK_TAPS} finite taps")
            object.__setattr__(self, name, arr)


def default_variants() -> dict[str, FilterBankParams]:
    """Plausible placeholder banks; scenarios and tests load their own."""
    ident = np.array([1.0])
    anti = np.array([-0.8])
    return {
        "anc": FilterBankParams(anti, 0.3 * anti, "anc"),
        "passthrough": FilterBankParams(0.9 * ident, np.zeros(1), "passthrough"),
        "anc_with_playback": FilterBankParams(0.9 * anti, 0.25 * anti, "anc_with_playback"),
        "passthrough_with_playback": FilterBankParams(
            0.8 * ident, np.zeros(1), "passthrough_with_playback"
        ),
    }


@dataclass
class AudioConfig:
    fast_fs: int = 64_000          # desk scale; the full-rate pipeline uses 384 kHz
    mode: str = "off"
    playback_active: bool = False
    call_active: bool = False
    limiter_ceiling_dbspl: float = LIMITER_CEILING_DBSPL
    dbfs_to_dbspl_offset: float = 100.0   # 0 dBFS equals this many dB-SPL

    def __post_init__(self):
        if self.fast_fs % DECIMATION:
            raise AudioError(f"fast_fs {self.fast_fs} not divisible by {DECIMATION}")
        if self.mode not in MODES:
            raise AudioError(f"unknown mode {self.mode!r}")

    @property
    def slow_fs(self) -> int:
        return self.fast_fs // DECIMATION


def amplitude_for_dbspl(dbspl: float, offset: float) -> float:
    return 10.0 ** ((dbspl - offset) / 20.0)


def limiter(block: np.ndarray, ceiling_dbspl: float = LIMITER_CEILING_DBSPL,
            offset: float = 100.0) -> np.ndarray:
    """Soft clip: identity below (ceiling - 3 dB), asymptotic to the ceiling above.

    The exponential knee is continuous and has unit slope at its onset, so
    blocks peaking at or below the knee pass through bit-identically.
    """
    x = np.asarray(block, dtype=float)
    c = amplitude_for_dbspl(ceiling_dbspl, offset)
    a = amplitude_for_dbspl(ceiling_dbspl - LIMITER_KNEE_DB, offset)
    mag = np.abs(x)
    over = mag > a
    if not over.any():
        return x.copy()
    out = x.copy()
    span = c - a
    out[over] = np.sign(x[over]) * (c - span * np.exp(-(mag[over] - a) / span))
    return out


class AudioDsp:
    """Block-oriented DSP engine for one bud."""

    def __init__(self, config: AudioConfig | None = None,
                 variants: dict[str, FilterBankParams] | None = None):
        self.config = config or AudioConfig()
        self.variants = variants or default_variants()
        self.active_params: FilterBankParams | None = None
        self.queues: dict[str, deque] = {d: deque() for d in DESTINATIONS}
        self._decim_taps = self._design_decimator(self.config.fast_fs)

    @staticmethod
    def _design_decimator(fast_fs: int) -> np.ndarray:
        slow_nyq = fast_fs / DECIMATION / 2.0
        numtaps, beta = signal.kaiserord(65.0, (0.25 * slow_nyq * 2) / fast_fs)
        numtaps |= 1
        return signal.firwin(
            numtaps, 0.875 * slow_nyq, window=("kaiser", beta), fs=fast_fs
        )

    def _variant_name(self, mode: str) -> str | None:
        if mode == "off":
            return None
        if self.config.playback_active or self.config.call_active:
            return f"{mode}_with_playback"
        return mode

    def set_mode(self, mode: str) -> str:
        """Select ANC/pass-through/off; returns the previous mode.

        ANC and pass-through are mutually exclusive by construction (a single
        mode field); entering a mode while playback or a call is active loads
        the compensated filter variant.
        """
        if mode not in MODES:
            raise AudioError(f"unknown mode {mode!r}")
        prev = self.config.mode
        self.config.mode = mode
        name = self._variant_name(mode)
        self.active_params = self.variants[name] if name else None
        return prev

    def set_playback(self, active: bool) -> None:
        self.config.playback_active = active
        self.set_mode(self.config.mode)

    def set_call(self, active: bool) -> None:
        self.config.call_active = active
        self.set_mode(self.config.mode)

    def process_fast_block(
        self,
        ext_top: np.ndarray,
        ext_bot: np.ndarray,
        ref_in_ear: np.ndarray,
        playback: np.ndarray,
        params: FilterBankParams | None = None,
    ) -> np.ndarray:
        """speaker = limiter(FF(external mics) + FB(in-ear ref) + playback)."""
        blocks = [np.asarray(b, dtype=float) for b in (ext_top, ext_bot, ref_in_ear, playback)]
        n = len(blocks[0])
        if any(len(b) != n for b in blocks):
            raise LengthMismatch("input blocks differ in length")
        ext_top, ext_bot, ref, playback = blocks
        params = params if params is not None else self.active_params
        if self.config.mode == "off" or params is None:
            path = np.zeros(n)
        else:
            ext = 0.5 * (ext_top + ext_bot)
            path = signal.lfilter(params.feedforward, 1.0, ext)
            path += signal.lfilter(params.feedback, 1.0, ref)
        mixed = path + playback
        return limiter(mixed, self.config.limiter_ceiling_dbspl, self.config.dbfs_to_dbspl_offset)

    def decimate_8x(self, block: np.ndarray) -> np.ndarray:
        """Anti-alias low-pass then keep every eighth sample."""
        x = np.asarray(block, dtype=float)
        if len(x) % DECIMATION:
            raise BadLength(f"length {len(x)} not divisible by {DECIMATION}")
        filtered = np.convolve(x, self._decim_taps, mode="same")
        return filtered[::DECIMATION]

    def route_slow(self, block: np.ndarray, destination: str | None = None) -> str:
        """Queue a slow-rate block toward the MCU bus or the Bluetooth SoC."""
        if destination is None:
            destination = "bt_soc" if self.config.call_active else "mcu_bus"
        if destination not in self.queues:
            raise UnknownDestination(f"{destination!r}")
        self.queues[destination].append(np.asarray(block))
        return destination


def export_pcm(block: np.ndarray, path) -> int:
    """Dump a processed block as header-less mono 16-bit LE PCM; returns bytes written.

    Full-scale (+/-1.0) maps to the int16 range; samples outside it clip.
    """
    x = np.asarray(block, dtype=float)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)
