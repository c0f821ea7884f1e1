"""FIR filtering and spectral helpers shared by the vitals and audio pipelines.

All filters are linear-phase FIR; ``apply_fir`` compensates the group delay so
event times read off filtered signals line up with the input timeline.
"""

from __future__ import annotations

import numpy as np
from scipy import signal


def _odd(n: int) -> int:
    return n if n % 2 else n + 1


def fir_lowpass(cutoff_hz: float, fs: float, transition_hz: float, atten_db: float = 60.0):
    """Kaiser-windowed low-pass; cutoff at the passband edge."""
    numtaps, beta = signal.kaiserord(atten_db, transition_hz / (fs / 2))
    numtaps = _odd(numtaps)
    return signal.firwin(
        numtaps, cutoff_hz + transition_hz / 2, window=("kaiser", beta), fs=fs
    )


def fir_highpass(cutoff_hz: float, fs: float, transition_hz: float, atten_db: float = 60.0):
    numtaps, beta = signal.kaiserord(atten_db, transition_hz / (fs / 2))
    numtaps = _odd(numtaps)
    return signal.firwin(
        numtaps, cutoff_hz, window=("kaiser", beta), fs=fs, pass_zero=False
    )


def fir_bandpass(lo_hz: float, hi_hz: float, fs: float, transition_hz: float, atten_db: float = 50.0):
    numtaps, beta = signal.kaiserord(atten_db, transition_hz / (fs / 2))
    numtaps = _odd(numtaps)
    return signal.firwin(
        numtaps, [lo_hz, hi_hz], window=("kaiser", beta), fs=fs, pass_zero=False
    )


def apply_fir(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Filter with group delay removed; output aligned with and sized like x."""
    if len(taps) % 2 == 0:
        raise ValueError("group-delay compensation needs an odd tap count")
    return np.convolve(x, taps, mode="same")


def envelope(x: np.ndarray) -> np.ndarray:
    return np.abs(signal.hilbert(x))


def quad_interp_peak(y: np.ndarray, i: int) -> float:
    """Sub-sample peak position via a parabola through y[i-1..i+1]."""
    if i <= 0 or i >= len(y) - 1:
        return float(i)
    denom = y[i - 1] - 2.0 * y[i] + y[i + 1]
    if denom == 0:
        return float(i)
    delta = 0.5 * (y[i - 1] - y[i + 1]) / denom
    return i + float(np.clip(delta, -1.0, 1.0))


def dominant_frequency(
    x: np.ndarray, fs: float, band: tuple[float, float]
) -> tuple[float, float]:
    """Dominant component in ``band``: (frequency, amplitude of the sinusoid).

    Hann-windowed FFT with parabolic bin interpolation; the amplitude estimate
    is normalised by the window sum so a pure unit sinusoid reads ~1.0.
    """
    n = len(x)
    win = np.hanning(n)
    spec = np.abs(np.fft.rfft((x - np.mean(x)) * win))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    mask = (freqs >= band[0]) & (freqs <= band[1])
    if not mask.any():
        raise ValueError("band outside spectrum")
    idx = np.flatnonzero(mask)
    k = idx[np.argmax(spec[idx])]
    k_ref = quad_interp_peak(spec, k)
    freq = k_ref * fs / n
    amp = 2.0 * spec[k] / win.sum()
    return float(freq), float(amp)


def band_rms(x: np.ndarray, fs: float, lo_hz: float, hi_hz: float, transition_hz: float = 0.3) -> float:
    taps = fir_bandpass(lo_hz, hi_hz, fs, transition_hz)
    return float(np.sqrt(np.mean(apply_fir(x.astype(float), taps) ** 2)))


def rolling_rms(x: np.ndarray, window: int) -> np.ndarray:
    """RMS over a centred moving window (same length as x)."""
    kernel = np.ones(window) / window
    return np.sqrt(np.convolve(x.astype(float) ** 2, kernel, mode="same"))
