"""Dynamic noise embedding: distill noise statistics into a per-frame code.

The posterior flags frames that are confidently noise-only. Averaging their
magnitude rows gives a stationary noise summary; the absolute deviation of
every frame from that summary captures how the noise moves. Both are pooled
to 128 bins, concatenated with the posterior itself, and passed through a
two-layer head to produce one embedding per frame.

Frame selection and the averages are computed outside the gradient tape; the
posterior's slot in the concatenation is the only differentiable input, so
enhancement-loss gradient reaches the VAD solely through that path.
"""

from dataclasses import dataclass

import numpy as np

from dne.nncore import Dense, Module, Tensor, astensor, concat
from dne.dsp import N_BINS

POOLED_BINS = 128
CONCAT_DIM = 2 * POOLED_BINS + 1
EMBED_DIMS = (N_BINS, POOLED_BINS)


def _posterior_data(post):
    return post.data if isinstance(post, Tensor) else np.asarray(post)


def select_confident_frames(post, eta):
    """Indices taking posterior below eta; falls back to the single argmin.

    Ties in the fallback go to the smallest index.
    """
    if not 0 < eta <= 1:
        raise ValueError("eta must be in (0, 1]")
    post = _posterior_data(post)
    if post.ndim != 1:
        raise ValueError("posterior must be a 1-D sequence")
    idx = np.flatnonzero(post < eta)
    if idx.size == 0:
        idx = np.array([int(post.argmin())])
    return idx


def confident_noise_average(mag, indices):
    """Elementwise mean of the selected magnitude rows."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("confident frame set is empty")
    mag = np.asarray(mag)
    return mag[indices].mean(axis=0)


def framewise_difference(mag, n_avg):
    """Absolute deviation of every frame from the noise average."""
    return np.abs(np.asarray(mag) - np.asarray(n_avg))


def avg_pool_half(v):
    """Window-2 stride-2 mean over the first 256 bins; the odd bin drops."""
    v = np.asarray(v)
    if v.shape[-1] != N_BINS:
        raise ValueError(f"expected {N_BINS} bins, got {v.shape[-1]}")
    trimmed = v[..., : N_BINS - 1]
    return trimmed.reshape(*v.shape[:-1], POOLED_BINS, 2).mean(axis=-1)


def simple_noise_feature(mag):
    """Mean of the first 10 magnitude rows (all rows when T < 10)."""
    mag = np.asarray(mag)
    return mag[: min(10, mag.shape[0])].mean(axis=0)


def confident_noise_feature(mag, post, eta):
    """Confident-frame noise average for use as a broadcast feature."""
    return confident_noise_average(mag, select_confident_frames(post, eta))


@dataclass
class NoiseProfile:
    confident_set: np.ndarray
    n_avg: np.ndarray
    n_avg_pooled: np.ndarray
    count: int


def noise_profile(mag, post, eta):
    idx = select_confident_frames(post, eta)
    n_avg = confident_noise_average(mag, idx)
    return NoiseProfile(idx, n_avg, avg_pool_half(n_avg), int(idx.size))


def dump_noise_profile(path, utt_id, profile):
    """Append one utterance's confident set and noise average, text format."""
    with open(path, "a", encoding="utf-8") as f:
        indices = ",".join(str(i) for i in profile.confident_set)
        avg = " ".join(f"{v:.6e}" for v in profile.n_avg)
        f.write(f"{utt_id}\t{indices}\t{avg}\n")


class DneExtractor(Module):
    """Per-frame embedding head: dense 257->128 leaky ReLU, dense to out_dim
    with tanh. out_dim is 257 for the U-Net backbone, 128 for the others."""

    def __init__(self, out_dim, rng=None, dtype=np.float32):
        super().__init__()
        if out_dim not in EMBED_DIMS:
            raise ValueError(f"out_dim must be one of {EMBED_DIMS}")
        rng = rng or np.random.default_rng(0)
        self.out_dim = out_dim
        self.hidden = Dense(CONCAT_DIM, POOLED_BINS, activation="leaky_relu", rng=rng, dtype=dtype)
        self.out = Dense(POOLED_BINS, out_dim, activation="tanh", rng=rng, dtype=dtype)

    def features(self, mag, post, eta):
        """Concatenated (.., T, 257) input: pooled noise average, pooled
        framewise difference, posterior. Only the posterior carries grad."""
        post_t = astensor(post)
        post_nd = post_t.data
        mag = np.asarray(mag)
        if mag.ndim == 2:
            mags = mag[None]
            posts = post_nd[None]
        else:
            mags = mag
            posts = post_nd
        if mags.shape[:-1] != posts.shape:
            raise ValueError(f"magnitude {mag.shape} does not match posterior {post_nd.shape}")

        stat_rows = []
        for one_mag, one_post in zip(mags, posts):
            idx = select_confident_frames(one_post, eta)
            n_avg = confident_noise_average(one_mag, idx)
            fd = framewise_difference(one_mag, n_avg)
            t_len = one_mag.shape[0]
            pooled = np.concatenate(
                [np.broadcast_to(avg_pool_half(n_avg), (t_len, POOLED_BINS)), avg_pool_half(fd)],
                axis=1,
            )
            stat_rows.append(pooled)
        stats = np.stack(stat_rows).astype(post_nd.dtype, copy=False)
        if mag.ndim == 2:
            stats = stats[0]

        p_col = post_t.reshape(*post_t.shape, 1)
        return concat([Tensor(stats), p_col], axis=mag.ndim - 1)

    def __call__(self, mag, post, eta):
        return self.out(self.hidden(self.features(mag, post, eta)))
