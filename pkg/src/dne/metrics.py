"""Objective evaluation: STOI and segmental SNR.

STOI follows the published procedure: 10 kHz reference rate, silent-frame
removal over a 40 dB dynamic range, 256-point short-time DFT, 15 one-third
octave bands from 150 Hz, 30-frame (384 ms) segments, clipped normalized
correlation averaged over bands and segments. Segmental SNR is the quality
proxy: per 32 ms speech-active frame 10*log10(clean/noise-residual power),
clamped to [-10, 35] dB, averaged.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

from dne import dsp

STOI_FS = 10000
STOI_FRAME = 256
STOI_FFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEG = 30
STOI_BETA = -15.0
DYN_RANGE = 40.0

SSNR_FRAME = 512  # 32 ms at 16 kHz
SSNR_FLOOR = -10.0
SSNR_CEIL = 35.0


def _stoi_window():
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _frame(x, frame, hop):
    n = (len(x) - frame) // hop + 1
    if n < 1:
        return np.empty((0, frame))
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _remove_silent_frames(x, y, dyn_range, frame, hop):
    w = _stoi_window()
    fx = _frame(x, frame, hop) * w
    fy = _frame(y, frame, hop) * w
    energies = 20 * np.log10(np.linalg.norm(fx, axis=1) / math.sqrt(frame) + 1e-20)
    keep = energies > energies.max() - dyn_range
    fx, fy = fx[keep], fy[keep]
    n_out = (len(fx) - 1) * hop + frame if len(fx) else 0
    xs = np.zeros(n_out)
    ys = np.zeros(n_out)
    for j in range(len(fx)):
        sl = slice(j * hop, j * hop + frame)
        xs[sl] += fx[j]
        ys[sl] += fy[j]
    return xs, ys


def _thirdoct(fs, nfft, num_bands, min_freq):
    f = np.linspace(0, fs / 2, nfft // 2 + 1)
    k = np.arange(num_bands)
    cf = min_freq * 2.0 ** (k / 3.0)
    fl = cf * 2.0 ** (-1.0 / 6.0)
    fr = cf * 2.0 ** (1.0 / 6.0)
    obm = np.zeros((num_bands, len(f)))
    for i in range(num_bands):
        lo = int(np.argmin((f - fl[i]) ** 2))
        hi = int(np.argmin((f - fr[i]) ** 2))
        obm[i, lo:hi] = 1
    if (obm.sum(axis=1) == 0).any():
        raise RuntimeError("empty one-third octave band; check band layout")
    return obm


def _stdft(x):
    w = _stoi_window()
    frames = _frame(x, STOI_FRAME, STOI_FRAME // 2) * w
    return np.fft.rfft(frames, n=STOI_FFT, axis=1)


def stoi(clean, degraded):
    """Short-time objective intelligibility of ``degraded`` given ``clean``."""
    clean = np.asarray(clean, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    n = min(len(clean), len(degraded))
    clean, degraded = clean[:n], degraded[:n]
    if n == 0 or np.abs(clean).max() == 0:
        raise ValueError("reference signal is silent")

    x = resample_poly(clean, STOI_FS, dsp.SAMPLE_RATE)
    y = resample_poly(degraded, STOI_FS, dsp.SAMPLE_RATE)
    x, y = _remove_silent_frames(x, y, DYN_RANGE, STOI_FRAME, STOI_FRAME // 2)

    spec_x = _stdft(x)
    spec_y = _stdft(y)
    if spec_x.shape[0] < STOI_SEG:
        raise ValueError("signal too short for the segment length after silence removal")

    obm = _thirdoct(STOI_FS, STOI_FFT, STOI_BANDS, STOI_MIN_FREQ)
    bands_x = np.sqrt(obm @ (np.abs(spec_x) ** 2).T)  # (bands, frames)
    bands_y = np.sqrt(obm @ (np.abs(spec_y) ** 2).T)

    clip = 10 ** (-STOI_BETA / 20.0)
    total = 0.0
    count = 0
    for m in range(STOI_SEG, bands_x.shape[1] + 1):
        seg_x = bands_x[:, m - STOI_SEG : m]
        seg_y = bands_y[:, m - STOI_SEG : m]
        alpha = np.sqrt(
            (seg_x**2).sum(axis=1, keepdims=True) / ((seg_y**2).sum(axis=1, keepdims=True) + 1e-20)
        )
        seg_y = np.minimum(alpha * seg_y, seg_x * (1 + clip))
        xn = seg_x - seg_x.mean(axis=1, keepdims=True)
        yn = seg_y - seg_y.mean(axis=1, keepdims=True)
        xn /= np.linalg.norm(xn, axis=1, keepdims=True) + 1e-20
        yn /= np.linalg.norm(yn, axis=1, keepdims=True) + 1e-20
        total += (xn * yn).sum() / STOI_BANDS
        count += 1
    return total / count


def ssnr_frames(clean, degraded, frame=SSNR_FRAME):
    """Per-frame segmental SNRs over speech-active frames, already clamped."""
    clean = np.asarray(clean, dtype=np.float64)
    degraded = np.asarray(degraded, dtype=np.float64)
    if clean.shape != degraded.shape:
        raise ValueError("length mismatch")
    n_frames = len(clean) // frame
    if n_frames == 0:
        return np.array([])
    c = clean[: n_frames * frame].reshape(n_frames, frame)
    d = degraded[: n_frames * frame].reshape(n_frames, frame)
    energy = (c**2).sum(axis=1)
    peak = energy.max()
    if peak <= 0:
        return np.array([])
    active = energy > peak * 10 ** (-DYN_RANGE / 10)
    c, d = c[active], d[active]
    num = (c**2).sum(axis=1)
    den = ((c - d) ** 2).sum(axis=1)
    with np.errstate(divide="ignore"):
        vals = 10 * np.log10(num / den)
    return np.clip(vals, SSNR_FLOOR, SSNR_CEIL)


def ssnr(clean, degraded):
    """Mean clamped segmental SNR in dB over speech-active 32 ms frames."""
    vals = ssnr_frames(clean, degraded)
    if vals.size == 0:
        raise ValueError("no active frames in reference")
    return float(vals.mean())


@dataclass
class UttScore:
    noisy_path: str
    noise_kind: str
    snr_db: float
    stoi: float
    ssnr: float


@dataclass
class EvalReport:
    utterances: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def aggregates(self):
        """(noise_kind, snr_db) -> dict with mean stoi/ssnr and count."""
        groups = {}
        for u in self.utterances:
            groups.setdefault((u.noise_kind, u.snr_db), []).append(u)
        out = {}
        for key in sorted(groups):
            members = groups[key]
            out[key] = {
                "stoi": sum(m.stoi for m in members) / len(members),
                "ssnr": sum(m.ssnr for m in members) / len(members),
                "count": len(members),
            }
        return out

    def mean_stoi(self, noise_kind=None):
        vals = [u.stoi for u in self.utterances if noise_kind in (None, u.noise_kind)]
        return sum(vals) / len(vals) if vals else float("nan")

    def mean_ssnr(self, noise_kind=None):
        vals = [u.ssnr for u in self.utterances if noise_kind in (None, u.noise_kind)]
        return sum(vals) / len(vals) if vals else float("nan")

    def to_table(self):
        lines = ["noise\tsnr_db\tcount\tstoi\tssnr"]
        for (kind, snr), agg in self.aggregates().items():
            lines.append(f"{kind}\t{snr:g}\t{agg['count']}\t{agg['stoi']:.4f}\t{agg['ssnr']:.2f}")
        return "\n".join(lines)

    def to_json(self):
        return json.dumps(
            {
                "utterances": [vars(u) for u in self.utterances],
                "aggregates": [
                    {"noise": k, "snr_db": s, **agg} for (k, s), agg in self.aggregates().items()
                ],
                "errors": [{"path": p, "error": msg} for p, msg in self.errors],
            },
            indent=2,
            sort_keys=True,
        )


def evaluate_corpus(manifest, enhance_fn, entries=None):
    """Enhance and score every entry; failures are recorded, not fatal.

    ``enhance_fn(noisy_waveform) -> enhanced_waveform``; pass ``None`` for the
    identity-mask debug path (reconstruction of the unmodified spectrogram).
    """
    from dne import corpus as corpus_mod

    if entries is None:
        entries = manifest.entries
    if not entries:
        raise ValueError("empty manifest")
    if enhance_fn is None:
        def enhance_fn(noisy):
            spec = dsp.stft(noisy)
            mag, phase = dsp.split_mag_phase(spec)
            return dsp.istft(mag * np.exp(1j * phase), length=len(noisy))

    report = EvalReport()
    for entry in entries:
        try:
            noisy, clean, _ = corpus_mod.load_entry(manifest, entry)
            enhanced = enhance_fn(noisy)
            report.utterances.append(
                UttScore(
                    entry.noisy_path,
                    entry.noise_kind,
                    entry.snr_db,
                    stoi(clean, enhanced),
                    ssnr(clean, enhanced),
                )
            )
        except (OSError, ValueError) as exc:
            report.errors.append((entry.noisy_path, str(exc)))
    return report
