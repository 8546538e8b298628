"""Minimal numerical kernels: dense products, activations, windowed DFTs.

Everything here is a pure function of its inputs.  Arrays are float64
unless the caller supplies float32; complex values use numpy's complex
dtype with real/imaginary parts of matching width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError, NumericError

# Floor applied wherever a magnitude is divided by or passed to a log.
MAG_FLOOR = 1e-7


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with explicit shape checking.

    Parameters
    ----------
    m : (rows, cols) array
    v : (cols,) array

    Returns
    -------
    (rows,) array
    """
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1:
        raise DimensionError(f"matvec needs a 2-d matrix and 1-d vector, got {m.ndim}-d and {v.ndim}-d")
    if m.shape[1] != v.shape[0]:
        raise DimensionError(f"matvec shape mismatch: {m.shape} @ {v.shape}")
    return m @ v


def sigmoid(x):
    """Logistic function, overflow-safe on both tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softsign(x):
    """x / (1 + |x|), a bounded gate in (-1, 1) with 0 meaning bypass."""
    x = np.asarray(x, dtype=np.float64)
    out = x / (1.0 + np.abs(x))
    return out if out.ndim else float(out)


_ACTIVATIONS = {
    "sigmoid": sigmoid,
    "tanh": np.tanh,
    "softsign": softsign,
}


def activation(kind: str, x):
    """Evaluate one of the scalar activations used by the models.

    ``kind`` is one of ``sigmoid`` (range (0,1)), ``tanh`` or ``softsign``
    (both range (-1,1)).  Non-finite input raises NumericError.
    """
    if kind not in _ACTIVATIONS:
        raise InputError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"activation({kind}) received a non-finite input")
    out = _ACTIVATIONS[kind](arr)
    return float(out) if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude spectrogram of a real signal.

    ``magnitudes`` has shape (frames, bins) with bins = window_size//2 + 1.
    ``window`` records the analysis window ("hann" or "rectangular") so a
    report can state how it was produced.
    """

    magnitudes: np.ndarray
    window_size: int
    hop: int
    window: str = "hann"

    def __post_init__(self):
        mags = np.asarray(self.magnitudes)
        if mags.ndim != 2:
            raise DimensionError("magnitudes must be 2-d (frames, bins)")
        if mags.shape[1] != self.window_size // 2 + 1:
            raise DimensionError(
                f"bins {mags.shape[1]} inconsistent with window_size {self.window_size}"
            )
        if mags.size and mags.min() < 0:
            raise InputError("magnitudes must be non-negative")

    @property
    def frames(self) -> int:
        return self.magnitudes.shape[0]

    @property
    def bins(self) -> int:
        return self.magnitudes.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(signal: np.ndarray, window_size: int, hop: int) -> np.ndarray:
    """Slice a 1-d signal into (frames, window_size) rows, no padding.

    Frame count is floor((len - window_size) / hop) + 1; a signal shorter
    than one window raises InputError.
    """
    signal = np.asarray(signal)
    if signal.ndim != 1:
        raise DimensionError("expected a 1-d signal")
    n = signal.shape[0]
    if n < window_size:
        raise InputError(f"signal of {n} samples is shorter than one {window_size}-sample window")
    n_frames = (n - window_size) // hop + 1
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return signal[idx]


def stft_mag(signal: np.ndarray, window_size: int, hop: int, window: str = "hann") -> Spectrogram:
    """Magnitude STFT of a real signal.

    Frames are not centered and the signal is not padded, so every frame
    holds real samples only.  ``window`` selects the analysis window;
    "hann" is the default used by every metric in this package,
    "rectangular" applies no taper.
    """
    frames = frame_signal(signal, window_size, hop).astype(np.float64)
    if window == "hann":
        frames = frames * hann_window(window_size)
    elif window != "rectangular":
        raise InputError(f"unknown window {window!r}; expected 'hann' or 'rectangular'")
    mags = np.abs(np.fft.rfft(frames, axis=1))
    return Spectrogram(magnitudes=mags, window_size=window_size, hop=hop, window=window)
