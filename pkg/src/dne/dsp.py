"""Deterministic signal-processing frontend.

Framing and STFT/ISTFT with a periodic Hann window (32 ms window, 8 ms hop,
512-point FFT at 16 kHz), magnitude/phase splitting, 40-band log mel
filterbank features, per-utterance standardization, and strict 16-bit PCM
WAV I/O.
"""

from __future__ import annotations

import wave

import numpy as np

SAMPLE_RATE = 16000
WIN_LENGTH = 512
HOP_LENGTH = 128
FFT_SIZE = 512
N_BINS = FFT_SIZE // 2 + 1
EDGE_PAD = WIN_LENGTH // 2
N_MELS = 40
MEL_FMIN = 0.0
MEL_FMAX = 8000.0
LOG_FLOOR = 1e-10


def hann_window(length: int = WIN_LENGTH) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant, not symmetric)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)


def frame_count(n_samples: int) -> int:
    """Number of STFT frames produced for an n-sample waveform."""
    padded = n_samples + 2 * EDGE_PAD
    return 1 + (padded - WIN_LENGTH) // HOP_LENGTH


def frame_signal(x: np.ndarray) -> np.ndarray:
    """Reflect-pad by half a window on both ends and slice into frames.

    Returns a (T, WIN_LENGTH) array of copies. Every original sample is
    covered by at least one frame.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("empty waveform")
    padded = np.pad(x, EDGE_PAD, mode="reflect")
    n_frames = 1 + (padded.size - WIN_LENGTH) // HOP_LENGTH
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    return padded[idx]


def stft(x: np.ndarray) -> np.ndarray:
    """Short-time Fourier transform, returning a (T, 257) complex grid."""
    frames = frame_signal(x) * hann_window()
    return np.fft.rfft(frames, n=FFT_SIZE, axis=1)


def istft(spec: np.ndarray, length: int | None = None) -> np.ndarray:
    """Invert an STFT grid by windowed overlap-add with COLA normalization.

    The half-window edge padding added by :func:`stft` is stripped, so
    ``istft(stft(x))`` lines up sample-for-sample with ``x``. If ``length``
    is given the result is cropped or zero-padded to that many samples.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != N_BINS:
        raise ValueError(f"expected {N_BINS} frequency bins, got shape {spec.shape}")
    n_frames = spec.shape[0]
    win = hann_window()
    frames = np.fft.irfft(spec, n=FFT_SIZE, axis=1) * win

    padded_len = (n_frames - 1) * HOP_LENGTH + WIN_LENGTH
    acc = np.zeros(padded_len)
    norm = np.zeros(padded_len)
    win_sq = win * win
    for t in range(n_frames):
        start = t * HOP_LENGTH
        acc[start:start + WIN_LENGTH] += frames[t]
        norm[start:start + WIN_LENGTH] += win_sq
    out = acc / np.maximum(norm, 1e-12)

    # Strip the leading half-window pad only; the overlap-add output may end
    # short of the trailing pad when the padded length is not a hop multiple.
    out = out[EDGE_PAD:]
    if length is None:
        length = padded_len - 2 * EDGE_PAD
    if length <= out.size:
        out = out[:length]
    else:
        out = np.pad(out, (0, length - out.size))
    return out


def split_mag_phase(spec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a complex grid into magnitude and phase; zero bins get phase 0."""
    spec = np.asarray(spec)
    return np.abs(spec), np.angle(spec)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS) -> np.ndarray:
    """Unit-peak triangular mel filters as an (n_mels, 257) weight matrix."""
    mel_pts = np.linspace(_hz_to_mel(MEL_FMIN), _hz_to_mel(MEL_FMAX), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    bin_freqs = np.arange(N_BINS) * (SAMPLE_RATE / FFT_SIZE)

    weights = np.zeros((n_mels, N_BINS))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        weights[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return weights


def log_mfb(mag: np.ndarray, filterbank: np.ndarray | None = None) -> np.ndarray:
    """Log mel filterbank features, (T, 257) magnitude -> (T, 40)."""
    mag = np.asarray(mag)
    if mag.ndim != 2 or mag.shape[1] != N_BINS:
        raise ValueError(f"expected {N_BINS} frequency bins, got shape {mag.shape}")
    if filterbank is None:
        filterbank = mel_filterbank()
    mel = mag @ filterbank.T
    return np.log(np.maximum(mel, LOG_FLOOR))


def standardize(mag: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Standardize a magnitude grid to zero mean, unit variance.

    Statistics are scalars over the whole utterance. Returns
    ``(standardized, mean, std)`` so the transform is traceable. A constant
    grid has no meaningful scale and is rejected.
    """
    mag = np.asarray(mag, dtype=np.float64)
    mean = float(mag.mean())
    std = float(mag.std())
    if std < 1e-12:
        raise ValueError("degenerate utterance: zero variance magnitude grid")
    return (mag - mean) / std, mean, std


def read_wav(path) -> np.ndarray:
    """Read a mono 16-bit PCM WAV at 16 kHz into a float array in [-1, 1].

    Any other channel count, sample width, or rate is rejected outright;
    this pipeline never resamples.
    """
    with wave.open(str(path), "rb") as wf:
        channels = wf.getnchannels()
        width = wf.getsampwidth()
        rate = wf.getframerate()
        if channels != 1:
            raise ValueError(f"{path}: expected mono audio, got {channels} channels")
        if width != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
        if rate != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise ValueError(f"{path}: empty waveform")
    return samples


def write_wav(path, x: np.ndarray) -> None:
    """Write a float waveform in [-1, 1] as mono 16-bit PCM at 16 kHz."""
    x = np.asarray(x, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
