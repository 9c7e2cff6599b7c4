"""Synthetic corpus: speech-like signals, noise generators, SNR mixing.

Clean "speech" is a schedule of harmonic tone bursts with vibrato, amplitude
modulation, and silence gaps. Seen (training) noises are stationary white and
pink; unseen (test-only) noises are sporadic amplitude-gated bursts and a
slowly wandering pair of narrowband partials. Each noise source is split in
half so train and test never draw from the same segment.

SNR is defined against clean power over active-speech samples only; mixtures
that would clip are peak-normalized together with their clean reference so
the pairing stays metric-consistent. All randomness derives from
(seed, split, index), so generation is reproducible and parallel-safe.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from dne import dsp

UTT_SAMPLES = 16256  # 128 STFT frames exactly
SEEN_NOISES = ("white", "pink")
UNSEEN_NOISES = ("bursts", "wander")
ENERGY_FLOOR_DB = 40.0
CLOSE_GAP = 2

_SPLIT_CODES = {"train": 0, "test": 1}
_KIND_CODES = {"white": 10, "pink": 11, "bursts": 12, "wander": 13}


# -- signal generators --------------------------------------------------------


def synth_speech(rng, n_samples=UTT_SAMPLES, return_schedule=False):
    """Harmonic tone bursts with AM, vibrato, and silences."""
    sr = dsp.SAMPLE_RATE
    x = np.zeros(n_samples)
    schedule = []
    cursor = int(rng.integers(0, int(0.08 * sr)))
    while cursor < n_samples - int(0.12 * sr):
        burst_len = int(rng.integers(int(0.15 * sr), int(0.35 * sr)))
        end = min(cursor + burst_len, n_samples)
        t = np.arange(end - cursor) / sr
        f0 = rng.uniform(100.0, 280.0)
        vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
        phase = 2 * np.pi * np.cumsum(f0 * vibrato) / sr
        tone = np.zeros_like(t)
        n_harm = int(rng.integers(3, 7))
        for h in range(1, n_harm + 1):
            if h * f0 >= sr / 2:
                break
            tone += (rng.uniform(0.6, 1.0) / h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
        am = 0.7 + 0.3 * np.sin(2 * np.pi * rng.uniform(1.5, 4.0) * t + rng.uniform(0, 2 * np.pi))
        ramp = min(int(0.01 * sr), (end - cursor) // 2)
        env = np.ones(end - cursor)
        env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[-ramp:] = env[:ramp][::-1]
        x[cursor:end] += tone * am * env
        schedule.append((cursor, end))
        cursor = end + int(rng.integers(int(0.05 * sr), int(0.25 * sr)))
    peak = np.abs(x).max()
    if peak > 0:
        x *= 0.4 / peak
    if return_schedule:
        return x, schedule
    return x


def _pink(rng, n):
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    k = np.arange(spec.size, dtype=np.float64)
    spec /= np.sqrt(np.maximum(k, 1.0))
    out = np.fft.irfft(spec, n=n)
    return out / (np.abs(out).max() + 1e-12)


def _bursts(rng, n):
    sr = dsp.SAMPLE_RATE
    out = 0.02 * rng.standard_normal(n)
    cursor = int(rng.integers(0, int(0.1 * sr)))
    while cursor < n:
        on = int(rng.integers(int(0.03 * sr), int(0.08 * sr)))
        end = min(cursor + on, n)
        amp = rng.uniform(0.5, 1.5)
        seg = amp * rng.standard_normal(end - cursor)
        ramp = min(32, (end - cursor) // 2)
        if ramp > 0:
            edge = np.linspace(0, 1, ramp)
            seg[:ramp] *= edge
            seg[-ramp:] *= edge[::-1]
        out[cursor:end] += seg
        cursor = end + int(rng.integers(int(0.1 * sr), int(0.4 * sr)))
    return out / (np.abs(out).max() + 1e-12)


def _wander(rng, n):
    sr = dsp.SAMPLE_RATE
    out = 0.02 * rng.standard_normal(n)
    for _ in range(2):
        steps = rng.standard_normal(n // 256 + 2) * 30.0
        coarse = np.cumsum(steps) + rng.uniform(400, 2500)
        freq = np.interp(np.arange(n), np.arange(coarse.size) * 256, coarse)
        freq = np.clip(freq, 80.0, sr / 2 - 200.0)
        phase = 2 * np.pi * np.cumsum(freq) / sr
        am = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * np.arange(n) / sr)
        out += rng.uniform(0.5, 1.0) * am * np.sin(phase + rng.uniform(0, 2 * np.pi))
    return out / (np.abs(out).max() + 1e-12)


_GENERATORS = {
    "white": lambda rng, n: rng.standard_normal(n) / 4.0,
    "pink": _pink,
    "bursts": _bursts,
    "wander": _wander,
}


def noise_source(kind, seed, n_samples):
    """Full noise source for a kind; callers slice disjoint halves."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown noise kind {kind!r}")
    rng = np.random.default_rng([seed, _KIND_CODES[kind]])
    return _GENERATORS[kind](rng, n_samples)


def noise_half(kind, seed, split, n_samples):
    full = noise_source(kind, seed, 2 * n_samples)
    lo = 0 if split == "train" else n_samples
    return full[lo : lo + n_samples]


# -- labeling and mixing ------------------------------------------------------


def _close_gaps(labels, max_gap):
    out = labels.copy()
    ones = np.flatnonzero(out)
    for a, b in zip(ones[:-1], ones[1:]):
        if 1 < b - a <= max_gap + 1:
            out[a:b] = 1
    return out


def label_frames(clean):
    """Frame labels: 1 where frame energy clears (max - 40 dB), gaps <= 2 closed."""
    frames = dsp.frame_signal(np.asarray(clean, dtype=np.float64))
    energy = (frames * frames).sum(axis=1)
    peak = energy.max()
    if peak <= 1e-20:
        return np.zeros(len(energy), dtype=np.int64)
    labels = (energy > peak * 10 ** (-ENERGY_FLOOR_DB / 10)).astype(np.int64)
    return _close_gaps(labels, CLOSE_GAP)


def active_sample_mask(clean, labels=None):
    """Samples covered by any speech-labeled frame's analysis window."""
    clean = np.asarray(clean)
    if labels is None:
        labels = label_frames(clean)
    mask = np.zeros(clean.size, dtype=bool)
    for t in np.flatnonzero(labels):
        start = t * dsp.HOP_LENGTH - dsp.EDGE_PAD
        mask[max(start, 0) : max(start + dsp.WIN_LENGTH, 0)] = True
    return mask


def measure_snr(clean, noise, labels=None):
    """SNR in dB: active-speech clean power over whole-signal noise power."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    mask = active_sample_mask(clean, labels)
    if not mask.any():
        raise ValueError("clean signal has no active speech")
    p_clean = float(np.mean(clean[mask] ** 2))
    p_noise = float(np.mean(noise**2))
    if p_clean <= 0 or p_noise <= 0:
        raise ValueError("silent input")
    return 10.0 * math.log10(p_clean / p_noise)


@dataclass
class MixResult:
    noisy: np.ndarray
    clean: np.ndarray
    noise_gain: float
    norm_scale: float


def mix_at_snr(clean, noise, snr_db, rng=None):
    """Mix noise into clean at an exact SNR; returns the consistent pair.

    The noise is tiled and randomly offset to the clean length. If the sum
    would clip, mixture and clean reference are scaled together.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not np.any(clean) or not np.any(noise):
        raise ValueError("silent input")
    rng = rng or np.random.default_rng(0)
    if noise.size < clean.size:
        reps = int(np.ceil(clean.size / noise.size))
        noise = np.tile(noise, reps)
    offset = int(rng.integers(0, noise.size - clean.size + 1))
    noise = noise[offset : offset + clean.size]
    if not np.any(noise):
        raise ValueError("selected noise segment is silent")

    current = measure_snr(clean, noise)
    gain = 10 ** ((current - snr_db) / 20.0)
    noisy = clean + gain * noise
    scale = 1.0
    peak = np.abs(noisy).max()
    if peak > 0.99:
        scale = 0.99 / peak
        noisy = noisy * scale
        clean = clean * scale
    return MixResult(noisy, clean, gain, scale)


# -- corpus generation --------------------------------------------------------


@dataclass
class CorpusConfig:
    out_dir: str
    n_train: int = 200
    n_test: int = 40
    train_snrs: tuple = (-5, 0, 5, 10)
    test_snrs: tuple = (-5, 0, 5)
    train_noises: tuple = SEEN_NOISES
    test_noises: tuple = SEEN_NOISES + UNSEEN_NOISES
    utt_samples: int = UTT_SAMPLES
    noise_half_samples: int = 20 * UTT_SAMPLES


@dataclass
class ManifestEntry:
    noisy_path: str
    clean_path: str
    label_path: str
    noise_kind: str
    snr_db: float


@dataclass
class CorpusManifest:
    root: str
    entries: list = field(default_factory=list)

    def path(self):
        return os.path.join(self.root, "manifest.tsv")


def _write_labels(path, labels):
    with open(path, "w", encoding="utf-8") as f:
        f.write("".join("1" if v else "0" for v in labels) + "\n")


def read_labels(path):
    with open(path, encoding="utf-8") as f:
        text = f.read().strip()
    return np.array([int(ch) for ch in text], dtype=np.int64)


def _make_split(root, split, count, snrs, kinds, seed, cfg, manifest):
    halves = {k: noise_half(k, seed, split, cfg.noise_half_samples) for k in kinds}
    os.makedirs(os.path.join(root, split), exist_ok=True)
    for i in range(count):
        rng = np.random.default_rng([seed, _SPLIT_CODES[split], i])
        clean = synth_speech(rng, cfg.utt_samples)
        kind = kinds[i % len(kinds)]
        snr = snrs[(i // len(kinds)) % len(snrs)]
        mix = mix_at_snr(clean, halves[kind], snr, rng)
        labels = label_frames(mix.clean)

        stem = f"{split}/utt{i:04d}"
        noisy_rel = f"{stem}_noisy.wav"
        clean_rel = f"{stem}_clean.wav"
        label_rel = f"{stem}_labels.txt"
        dsp.write_wav(os.path.join(root, noisy_rel), mix.noisy)
        dsp.write_wav(os.path.join(root, clean_rel), mix.clean)
        _write_labels(os.path.join(root, label_rel), labels)
        manifest.entries.append(ManifestEntry(noisy_rel, clean_rel, label_rel, kind, float(snr)))


def generate_synthetic_corpus(config, seed):
    """Write WAVs, labels, and a tab-separated manifest; fully deterministic."""
    root = config.out_dir
    os.makedirs(root, exist_ok=True)
    manifest = CorpusManifest(root)
    _make_split(root, "train", config.n_train, config.train_snrs, tuple(config.train_noises), seed, config, manifest)
    _make_split(root, "test", config.n_test, config.test_snrs, tuple(config.test_noises), seed, config, manifest)

    with open(manifest.path(), "w", encoding="utf-8") as f:
        for e in manifest.entries:
            f.write(f"{e.noisy_path}\t{e.clean_path}\t{e.label_path}\t{e.noise_kind}\t{e.snr_db:g}\n")
    return manifest


def load_manifest(path):
    root = os.path.dirname(os.path.abspath(path))
    manifest = CorpusManifest(root)
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            noisy, clean, label, kind, snr = line.split("\t")
            manifest.entries.append(ManifestEntry(noisy, clean, label, kind, float(snr)))
    return manifest


def split_entries(manifest):
    """(train, test) partition keyed off the path prefix."""
    train = [e for e in manifest.entries if e.noisy_path.startswith("train/")]
    test = [e for e in manifest.entries if e.noisy_path.startswith("test/")]
    return train, test


def load_entry(manifest, entry):
    """Returns (noisy waveform, clean waveform, frame labels)."""
    noisy = dsp.read_wav(os.path.join(manifest.root, entry.noisy_path))
    clean = dsp.read_wav(os.path.join(manifest.root, entry.clean_path))
    labels = read_labels(os.path.join(manifest.root, entry.label_path))
    return noisy, clean, labels
