"""Log-mel spectrogram with the hop tied to the video frame rate.

Framing, window, FFT size and the mel filterbank follow the VGGish input
pipeline (periodic Hann, 25 ms window, 125-7500 Hz HTK-mel triangles with
the DC bin zeroed). The hop is one video frame, so row i of the output
lines up with frame i.
"""
from __future__ import annotations

import numpy as np

from .formats import SAMPLE_RATE

MEL_BINS = 64
WINDOW_SEC = 0.025
LOG_FLOOR = 1e-6
MEL_LOW_HZ = 125.0
MEL_HIGH_HZ = 7500.0


def hertz_to_mel(f):
    return 1127.0 * np.log(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_matrix(num_mel_bins: int = MEL_BINS, num_spectrogram_bins: int = 257,
               sample_rate: int = SAMPLE_RATE, lower_hz: float = MEL_LOW_HZ,
               upper_hz: float = MEL_HIGH_HZ) -> np.ndarray:
    """``[num_spectrogram_bins, num_mel_bins]`` triangular weights."""
    nyquist = sample_rate / 2.0
    if not 0.0 <= lower_hz < upper_hz <= nyquist:
        raise ValueError(f"bad mel range [{lower_hz}, {upper_hz}] for nyquist {nyquist}")
    bins_mel = hertz_to_mel(np.linspace(0.0, nyquist, num_spectrogram_bins))
    edges = np.linspace(hertz_to_mel(lower_hz), hertz_to_mel(upper_hz), num_mel_bins + 2)
    weights = np.empty((num_spectrogram_bins, num_mel_bins))
    for i in range(num_mel_bins):
        lo, center, hi = edges[i:i + 3]
        lower_slope = (bins_mel - lo) / (center - lo)
        upper_slope = (hi - bins_mel) / (hi - center)
        weights[:, i] = np.maximum(0.0, np.minimum(lower_slope, upper_slope))
    weights[0, :] = 0.0
    return weights


def hop_samples(fps: float, sample_rate: int = SAMPLE_RATE) -> int:
    return int(round(sample_rate / fps))


def extract_logmel(wav: np.ndarray, fps: float, sample_rate: int = SAMPLE_RATE,
                   num_mel_bins: int = MEL_BINS) -> np.ndarray:
    """``[n_rows, num_mel_bins]`` log-mel energies, one row per video frame tick."""
    if sample_rate != SAMPLE_RATE:
        raise ValueError(f"sample rate must be {SAMPLE_RATE}, got {sample_rate}")
    if fps <= 0:
        raise ValueError(f"fps must be positive, got {fps}")
    x = np.asarray(wav, dtype=np.float64).ravel()
    win = int(round(WINDOW_SEC * sample_rate))
    hop = hop_samples(fps, sample_rate)
    n_fft = 2 ** int(np.ceil(np.log2(win)))
    if x.size < win:
        x = np.pad(x, (0, win - x.size))
    n_rows = 1 + (x.size - win) // hop
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(n_rows, win), strides=(x.strides[0] * hop, x.strides[0]), writeable=False)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    spec = np.abs(np.fft.rfft(frames * window, n=n_fft))
    mel = spec @ mel_matrix(num_mel_bins, n_fft // 2 + 1, sample_rate)
    return np.log(mel + LOG_FLOOR).astype(np.float32)


def audio_patches(logmel: np.ndarray, n_patch: int) -> np.ndarray:
    """``[N, 1, mel, n_patch]``: for frame t the rows t-n_patch+1 .. t (first row repeated at the start)."""
    n = logmel.shape[0]
    idx = np.arange(n)[:, None] + np.arange(-n_patch + 1, 1)[None, :]
    idx = np.clip(idx, 0, n - 1)
    return logmel[idx].transpose(0, 2, 1)[:, None, :, :]
