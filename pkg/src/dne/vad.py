"""LSTM voice activity detector emitting per-frame speech posteriors.

Two unidirectional LSTM layers over log mel features, then a small dense
head ending in a sigmoid. Trained on cross-entropy plus a weighted share of
the enhancement loss; that second term reaches these parameters only through
the posterior's use inside the noise-embedding input.
"""

import numpy as np

from dne.nncore import Dense, Lstm, Module, astensor, bce_loss


class VadModel(Module):
    """(T, 40) or (N, T, 40) features -> (T,) or (N, T) posteriors in (0, 1)."""

    def __init__(self, in_dim=40, hidden=64, layers=2, head_hidden=32, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.lstm = Lstm(in_dim, hidden, layers=layers, rng=rng, dtype=dtype)
        self.head = Dense(hidden, head_hidden, activation="relu", rng=rng, dtype=dtype)
        self.out = Dense(head_hidden, 1, activation="sigmoid", rng=rng, dtype=dtype)

    def __call__(self, feats):
        feats = astensor(feats)
        p = self.out(self.head(self.lstm(feats)))
        return p.reshape(p.shape[:-1])


def vad_loss(posterior, labels, se_mse=0.0, lam=1.0):
    """Cross-entropy plus ``lam`` times the enhancement MSE.

    ``se_mse`` may be a live graph node, in which case its gradient flows
    into whatever produced it; frame selection never carries gradient.
    """
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    posterior = astensor(posterior)
    labels = astensor(np.asarray(labels, dtype=posterior.data.dtype))
    ce = bce_loss(posterior, labels)
    if lam == 0:
        return ce
    return ce + lam * astensor(se_mse)
