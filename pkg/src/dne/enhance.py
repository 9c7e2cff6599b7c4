"""Mask-estimating enhancement backbones and spectrogram reconstruction.

Three architectures, each in a plain and a noise-embedding-conditioned
variant. All emit a sigmoid T-F mask over 257 bins; the mask multiplies the
raw noisy magnitude and the result is inverted with the noisy phase.

U-Net runs on fixed 64-frame chunks (training picks aligned chunks, inference
averages 50%-overlapped chunks). The embedding joins it as a second input
channel, so its embedding width is 257; the dense and recurrent backbones
take the 128-wide embedding concatenated per frame.
"""

from dataclasses import dataclass

import numpy as np

from dne.dsp import N_BINS, istft
from dne.nncore import (
    BatchNorm,
    BiLstm,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Dropout,
    Module,
    ModuleList,
    Tensor,
    astensor,
    concat,
    no_grad,
    pad_axis,
)

UNET_CHUNK = 64
UNET_CHANNELS = (16, 32, 64, 64)
DDAE_CONTEXT = 5
DDAE_HIDDEN = (1024, 512, 256, 128, 256, 512, 1024)
BLSTM_HIDDEN = 512
BLSTM_HEAD = 300

BACKBONES = ("unet", "ddae", "blstm")


@dataclass
class BackboneConfig:
    kind: str
    use_dne: bool = False

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ValueError(f"kind must be one of {BACKBONES}")

    @property
    def dne_dim(self):
        return N_BINS if self.kind == "unet" else 128


def make_backbone(config, rng=None, dtype=np.float32, **kwargs):
    rng = rng or np.random.default_rng(0)
    if config.kind == "unet":
        return UNet(in_channels=2 if config.use_dne else 1, rng=rng, dtype=dtype, **kwargs)
    if config.kind == "ddae":
        return Ddae(use_dne=config.use_dne, rng=rng, dtype=dtype, **kwargs)
    return Blstm(use_dne=config.use_dne, rng=rng, dtype=dtype, **kwargs)


def _pad_to_multiple(n, m):
    return (n + m - 1) // m * m


class _ConvBlock(Module):
    def __init__(self, c_in, c_out, rng, dtype, transpose=False):
        super().__init__()
        conv_cls = ConvTranspose2d if transpose else Conv2d
        self.conv = conv_cls(c_in, c_out, kernel=4, stride=2, padding=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype=dtype)

    def __call__(self, x):
        return self.bn(self.conv(x)).leaky_relu(0.01)


class UNet(Module):
    """Encoder-decoder with skip concatenation over (channel, time, freq).

    The frequency axis is zero-padded to a multiple of 4 on the way in and
    cropped on the way out; decoder stages pad or crop their frequency size
    to the encoder partner before concatenating, which absorbs the odd sizes
    the strided halvings produce.
    """

    def __init__(self, in_channels=1, channels=UNET_CHANNELS, bins=N_BINS, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_channels = in_channels
        self.bins = bins
        self.padded_bins = _pad_to_multiple(bins, 4)
        self.encoder = ModuleList()
        c_prev = in_channels
        for c in channels:
            self.encoder.append(_ConvBlock(c_prev, c, rng, dtype))
            c_prev = c
        self.decoder = ModuleList()
        skip_channels = list(channels[:-1])[::-1]  # encoder outputs paired in reverse
        dec_out = skip_channels + [channels[0]]
        for c in dec_out:
            self.decoder.append(_ConvBlock(c_prev, c, rng, dtype, transpose=True))
            c_prev = c + (skip_channels.pop(0) if skip_channels else 0)
            # consume the matching skip width for the next stage input
        self.final = Conv2d(dec_out[-1], 1, kernel=1, stride=1, padding=0, rng=rng, dtype=dtype)

    def __call__(self, x):
        x = astensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, T, {self.bins}) input, got {x.shape}")
        if x.shape[3] != self.bins:
            raise ValueError(f"expected {self.bins} frequency bins, got {x.shape[3]}")
        h = pad_axis(x, 3, 0, self.padded_bins - self.bins)
        skips = []
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        skips.pop()  # the bottleneck is not its own skip
        for block in self.decoder:
            h = block(h)
            if skips:
                partner = skips.pop()
                h = _match_freq(h, partner.shape[3])
                h = concat([h, partner], axis=1)
        mask = self.final(h).sigmoid()
        key = (slice(None), slice(None), slice(None), slice(0, self.bins))
        return mask[key].reshape(mask.shape[0], mask.shape[2], self.bins)


def _match_freq(h, want):
    have = h.shape[3]
    if have < want:
        return pad_axis(h, 3, 0, want - have)
    if have > want:
        key = (slice(None), slice(None), slice(None), slice(0, want))
        return h[key]
    return h


def unet_stack_channels(mag_std, dne=None):
    """(T, 257) [+ embedding] -> (1, C, T, 257) channel volume."""
    mag_std = astensor(mag_std)
    planes = [mag_std]
    if dne is not None:
        dne = astensor(dne)
        if dne.shape != mag_std.shape:
            raise ValueError(f"embedding {dne.shape} does not match magnitude {mag_std.shape}")
        planes.append(dne)
    t_len, bins = mag_std.shape
    vol = concat([p.reshape(1, 1, t_len, bins) for p in planes], axis=1)
    return vol


def unet_forward(model, mag_std, dne=None):
    """Arbitrary-length inference: 64-frame chunks, 50% overlap, averaged."""
    vol = unet_stack_channels(mag_std, dne)
    t_len = vol.shape[2]
    with no_grad():
        if t_len <= UNET_CHUNK:
            padded = pad_axis(vol, 2, 0, UNET_CHUNK - t_len)
            out = model(padded).data[0]
            return out[:t_len]
        starts = list(range(0, t_len - UNET_CHUNK + 1, UNET_CHUNK // 2))
        if starts[-1] + UNET_CHUNK < t_len:
            starts.append(t_len - UNET_CHUNK)
        acc = np.zeros((t_len, model.bins))
        count = np.zeros((t_len, 1))
        key = lambda s: (slice(None), slice(None), slice(s, s + UNET_CHUNK), slice(None))
        for s in starts:
            out = model(vol[key(s)]).data[0]
            acc[s : s + UNET_CHUNK] += out
            count[s : s + UNET_CHUNK] += 1
        return acc / count


class Ddae(Module):
    """Dense stack over 5-frame context windows; edge frames replicate.

    Per-frame features are 257 standardized bins, plus the 128-wide embedding
    when conditioned, giving 1285- or 1925-dim context inputs. Hidden layers
    are linear -> batchnorm -> ReLU -> dropout(0.2); the head is a 257-way
    sigmoid for the center frame.
    """

    def __init__(self, use_dne=False, hidden=DDAE_HIDDEN, dropout=0.2, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.use_dne = use_dne
        self.frame_dim = N_BINS + (128 if use_dne else 0)
        self.in_dim = DDAE_CONTEXT * self.frame_dim
        self.blocks = ModuleList()
        d = self.in_dim
        for width in hidden:
            block = Module()
            block.lin = Dense(d, width, activation="none", rng=rng, dtype=dtype)
            block.bn = BatchNorm(width, dtype=dtype)
            block.drop = Dropout(dropout, rng=np.random.default_rng(rng.integers(2**31)))
            self.blocks.append(block)
            d = width
        self.head = Dense(d, N_BINS, activation="sigmoid", rng=rng, dtype=dtype)

    def __call__(self, mag_std, dne=None):
        feats = _per_frame_features(mag_std, dne, self.use_dne, 128)
        batched = feats.ndim == 3
        ctx = _context_window(feats)
        if batched:
            n, t_len, d = ctx.shape
            ctx = ctx.reshape(n * t_len, d)
        h = ctx
        for block in self.blocks:
            h = block.drop(block.bn(block.lin(h)).relu())
        mask = self.head(h)
        if batched:
            mask = mask.reshape(n, t_len, N_BINS)
        return mask


def _per_frame_features(mag_std, dne, use_dne, dne_dim):
    mag_std = astensor(mag_std)
    if mag_std.shape[-1] != N_BINS:
        raise ValueError(f"expected {N_BINS} bins, got {mag_std.shape}")
    if not use_dne:
        if dne is not None:
            raise ValueError("model was built without embedding input")
        return mag_std
    if dne is None:
        raise ValueError("model expects an embedding input")
    dne = astensor(dne)
    if dne.shape[-1] != dne_dim or dne.shape[:-1] != mag_std.shape[:-1]:
        raise ValueError(f"embedding {dne.shape} does not match magnitude {mag_std.shape}")
    return concat([mag_std, dne], axis=mag_std.ndim - 1)


def _context_window(feats):
    t_len = feats.shape[-2]
    offsets = np.arange(DDAE_CONTEXT) - DDAE_CONTEXT // 2
    idx = np.clip(np.arange(t_len)[:, None] + offsets[None, :], 0, t_len - 1).reshape(-1)
    if feats.ndim == 2:
        gathered = feats[idx]
        return gathered.reshape(t_len, DDAE_CONTEXT * feats.shape[-1])
    key = (slice(None), idx)
    gathered = feats[key]
    return gathered.reshape(feats.shape[0], t_len, DDAE_CONTEXT * feats.shape[-1])


class Blstm(Module):
    """Bidirectional recurrent backbone; the reversed-time stream feeds a
    small dense head. Per-step input is 257 bins or 385 with the embedding."""

    def __init__(self, use_dne=False, hidden=BLSTM_HIDDEN, layers=2, head_hidden=BLSTM_HEAD,
                 rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.use_dne = use_dne
        self.in_dim = N_BINS + (128 if use_dne else 0)
        self.stack = BiLstm(self.in_dim, hidden, layers=layers, rng=rng, dtype=dtype)
        self.head = Dense(hidden, head_hidden, activation="leaky_relu", rng=rng, dtype=dtype)
        self.out = Dense(head_hidden, N_BINS, activation="sigmoid", rng=rng, dtype=dtype)

    def __call__(self, mag_std, dne=None):
        feats = _per_frame_features(mag_std, dne, self.use_dne, 128)
        _, stream_b = self.stack(feats)
        return self.out(self.head(stream_b))


def apply_mask(mag, mask):
    """Elementwise product; accepts tensors so gradients pass through."""
    mag_t = astensor(mag)
    mask_t = astensor(mask)
    if mag_t.shape != mask_t.shape:
        raise ValueError(f"shape mismatch: {mag_t.shape} vs {mask_t.shape}")
    return mag_t * mask_t


def reconstruct(enh_mag, noisy_phase, length=None):
    """Waveform from enhanced magnitude and the noisy phase."""
    enh_mag = enh_mag.data if isinstance(enh_mag, Tensor) else np.asarray(enh_mag)
    return istft(enh_mag * np.exp(1j * np.asarray(noisy_phase)), length=length)
