"""Adam over a named parameter store."""

import numpy as np


class ParamEntry:
    """One optimized parameter: the tensor plus Adam moments and step count."""

    __slots__ = ("param", "m", "v", "step")

    def __init__(self, param):
        self.param = param
        self.m = np.zeros_like(param.data)
        self.v = np.zeros_like(param.data)
        self.step = 0

    @property
    def value(self):
        return self.param.data

    @property
    def grad(self):
        return self.param.grad


class ParameterStore:
    """Name -> ParamEntry map tying tensors to their optimizer state."""

    def __init__(self, named_params):
        self.entries = {name: ParamEntry(p) for name, p in dict(named_params).items()}

    def names(self):
        return list(self.entries)

    def zero_grad(self):
        for entry in self.entries.values():
            entry.param.grad = None

    def state_arrays(self):
        """Flat name -> array view of the optimizer state, for checkpoints."""
        out = {}
        for name, entry in self.entries.items():
            out[name + ".m"] = entry.m
            out[name + ".v"] = entry.v
            out[name + ".step"] = np.array(entry.step, dtype=np.int64)
        return out

    def load_state_arrays(self, arrays):
        for name, entry in self.entries.items():
            entry.m = arrays[name + ".m"].astype(entry.m.dtype)
            entry.v = arrays[name + ".v"].astype(entry.v.dtype)
            entry.step = int(arrays[name + ".step"])


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over every entry; gradients are zeroed afterwards.

    A missing gradient counts as zero, so untouched parameters keep their
    values while the step counter still advances.
    """
    for entry in store.entries.values():
        p = entry.param
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        entry.step += 1
        entry.m = beta1 * entry.m + (1 - beta1) * g
        entry.v = beta2 * entry.v + (1 - beta2) * (g * g)
        m_hat = entry.m / (1 - beta1**entry.step)
        v_hat = entry.v / (1 - beta2**entry.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


class Adam:
    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = ParameterStore(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        adam_step(self.store, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        self.store.zero_grad()
