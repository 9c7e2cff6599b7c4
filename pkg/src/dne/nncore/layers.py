"""Layer modules over the tensor tape.

Recurrent, convolutional, and batchnorm layers record one fused graph node
per call with a hand-derived backward pass; everything else composes
elementwise tensor ops. Weight init is symmetric uniform scaled by fan-in,
and LSTM forget gates start with bias 1.0.
"""

import numpy as np

from dne.nncore.tensor import Tensor, _sigmoid, astensor, make_op

_ACTIVATIONS = {
    "none": lambda t: t,
    "relu": lambda t: t.relu(),
    "leaky_relu": lambda t: t.leaky_relu(0.01),
    "sigmoid": lambda t: t.sigmoid(),
    "tanh": lambda t: t.tanh(),
}


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class with named parameter/buffer/submodule registration."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = np.asarray(value)
        object.__setattr__(self, name, self._buffers[name])

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, mod in self._modules.items():
            yield from mod.named_buffers(prefix + name + ".")

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for mod in self._modules.values():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_state(self, params, buffers=None):
        """Copy arrays into existing parameters/buffers by name."""
        own = dict(self.named_parameters())
        for name, value in params.items():
            if name not in own:
                raise KeyError(f"unknown parameter {name!r}")
            if own[name].data.shape != value.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            own[name].data = value.astype(own[name].data.dtype)
        if buffers:
            own_buf = dict(self.named_buffers())
            for name, value in buffers.items():
                if name not in own_buf:
                    raise KeyError(f"unknown buffer {name!r}")
                own_buf[name][...] = value


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for mod in modules:
            self.append(mod)

    def append(self, mod):
        setattr(self, str(len(self._items)), mod)
        self._items.append(mod)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Dense(Module):
    def __init__(self, in_dim, out_dim, activation="none", rng=None, dtype=np.float32):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = Tensor(_uniform(rng, (in_dim, out_dim), in_dim, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        x = astensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected last dim {self.in_dim}, got {x.shape}")
        return _ACTIVATIONS[self.activation](x @ self.weight + self.bias)


def lstm_seq(x, wx, wh, b):
    """Full-sequence LSTM layer, (N, T, in) -> (N, T, H), fused backward.

    Gate order along the 4H axis is input, forget, cell candidate, output.
    Initial hidden and cell states are zero.
    """
    xd, wxd, whd, bd = x.data, wx.data, wh.data, b.data
    n, t_len, _ = xd.shape
    hidden = whd.shape[0]

    xproj = xd @ wxd + bd
    h = np.zeros((n, hidden), dtype=xd.dtype)
    c = np.zeros((n, hidden), dtype=xd.dtype)
    hs = np.empty((n, t_len, hidden), dtype=xd.dtype)
    cache = []
    for t in range(t_len):
        a = xproj[:, t] + h @ whd
        i = _sigmoid(a[:, :hidden])
        f = _sigmoid(a[:, hidden : 2 * hidden])
        g = np.tanh(a[:, 2 * hidden : 3 * hidden])
        o = _sigmoid(a[:, 3 * hidden :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((i, f, g, o, c_prev, h_prev, tc))

    def backward(grad):
        da_all = np.zeros((n, t_len, 4 * hidden), dtype=xd.dtype)
        dwh = np.zeros_like(whd)
        dh = np.zeros((n, hidden), dtype=xd.dtype)
        dc = np.zeros((n, hidden), dtype=xd.dtype)
        for t in range(t_len - 1, -1, -1):
            i, f, g, o, c_prev, h_prev, tc = cache[t]
            dh = dh + grad[:, t]
            do = dh * tc
            dc = dc + dh * o * (1 - tc * tc)
            di = dc * g
            df = dc * c_prev
            dg = dc * i
            da = da_all[:, t]
            da[:, :hidden] = di * i * (1 - i)
            da[:, hidden : 2 * hidden] = df * f * (1 - f)
            da[:, 2 * hidden : 3 * hidden] = dg * (1 - g * g)
            da[:, 3 * hidden :] = do * o * (1 - o)
            dwh += h_prev.T @ da
            dh = da @ whd.T
            dc = dc * f
        dx = da_all @ wxd.T
        dwx = np.einsum("nti,ntj->ij", xd, da_all)
        db = da_all.sum(axis=(0, 1))
        return dx, dwx, dwh, db

    return make_op(hs, (x, wx, wh, b), backward)


class Lstm(Module):
    """Stacked unidirectional LSTM; input (T, in) or (N, T, in)."""

    def __init__(self, in_dim, hidden, layers=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden = hidden
        self.layers = ModuleList()
        dim = in_dim
        for _ in range(layers):
            self.layers.append(_LstmLayer(dim, hidden, rng, dtype))
            dim = hidden

    def __call__(self, x):
        x = astensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        for layer in self.layers:
            x = lstm_seq(x, layer.wx, layer.wh, layer.b)
        if squeeze:
            x = x.reshape(x.shape[1], x.shape[2])
        return x


class _LstmLayer(Module):
    def __init__(self, in_dim, hidden, rng, dtype):
        super().__init__()
        self.wx = Tensor(_uniform(rng, (in_dim, 4 * hidden), hidden, dtype), requires_grad=True)
        self.wh = Tensor(_uniform(rng, (hidden, 4 * hidden), hidden, dtype), requires_grad=True)
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden : 2 * hidden] = 1.0
        self.b = Tensor(bias, requires_grad=True)


def _reverse_time(x):
    key = (slice(None), slice(None, None, -1))
    return x[key]


class BiLstm(Module):
    """Independent forward-time and reversed-time LSTM stacks.

    Returns the pair of per-step streams; the backward stream is the
    reversed-input stack's output flipped back to input time order.
    """

    def __init__(self, in_dim, hidden, layers=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.fwd = Lstm(in_dim, hidden, layers, rng, dtype)
        self.bwd = Lstm(in_dim, hidden, layers, rng, dtype)

    def __call__(self, x):
        x = astensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        out_f = self.fwd(x)
        out_b = _reverse_time(self.bwd(_reverse_time(x)))
        if squeeze:
            out_f = out_f.reshape(out_f.shape[1], out_f.shape[2])
            out_b = out_b.reshape(out_b.shape[1], out_b.shape[2])
        return out_f, out_b


def _windows(x, kh, kw, stride):
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation, input (N, C_in, H, W), weight (C_out, C_in, kh, kw)."""
    xd, wd = x.data, weight.data
    c_out, c_in, kh, kw = wd.shape
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ValueError(f"expected (N, {c_in}, H, W) input, got {xd.shape}")
    if xd.shape[2] + 2 * padding < kh or xd.shape[3] + 2 * padding < kw:
        raise ValueError("input smaller than kernel")
    pad_spec = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(xd, pad_spec) if padding else xd
    win = _windows(xp, kh, kw, stride)
    out = np.einsum("ncijkl,ockl->noij", win, wd, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    h_out, w_out = out.shape[2], out.shape[3]

    def backward(g):
        dw = np.einsum("ncijkl,noij->ockl", win, g, optimize=True)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b_ in range(kw):
                patch = np.einsum("noij,oc->ncij", g, wd[:, :, a, b_], optimize=True)
                dxp[:, :, a : a + h_out * stride : stride, b_ : b_ + w_out * stride : stride] += patch
        dx = dxp[:, :, padding : xp.shape[2] - padding, padding : xp.shape[3] - padding] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


def conv_transpose2d(x, weight, bias, stride=1, padding=0):
    """Transposed conv (gradient-of-conv), weight (C_in, C_out, kh, kw)."""
    xd, wd = x.data, weight.data
    c_in, c_out, kh, kw = wd.shape
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ValueError(f"expected (N, {c_in}, H, W) input, got {xd.shape}")
    n, _, h_in, w_in = xd.shape
    h_full = (h_in - 1) * stride + kh
    w_full = (w_in - 1) * stride + kw
    yp = np.zeros((n, c_out, h_full, w_full), dtype=xd.dtype)
    for a in range(kh):
        for b_ in range(kw):
            contrib = np.einsum("ncij,co->noij", xd, wd[:, :, a, b_], optimize=True)
            yp[:, :, a : a + h_in * stride : stride, b_ : b_ + w_in * stride : stride] += contrib
    if padding:
        if h_full - 2 * padding <= 0 or w_full - 2 * padding <= 0:
            raise ValueError("padding larger than produced output")
        out = yp[:, :, padding : h_full - padding, padding : w_full - padding]
    else:
        out = yp
    out = np.ascontiguousarray(out)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        win = _windows(gp, kh, kw, stride)
        dx = np.einsum("noijkl,cokl->ncij", win, wd, optimize=True)
        dw = np.einsum("ncij,noijkl->cokl", xd, win, optimize=True)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=4, stride=2, padding=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return conv2d(astensor(x), self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel=4, stride=2, padding=1, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * kernel * kernel
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _uniform(rng, (c_in, c_out, kernel, kernel), fan_in, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return conv_transpose2d(astensor(x), self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Normalize over every axis except the feature axis (axis 1, or the
    last axis for 2-D inputs). Running stats use biased variance and
    running = momentum * running + (1 - momentum) * batch."""

    def __init__(self, num_features, eps=1e-5, momentum=0.9, dtype=np.float32):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def __call__(self, x):
        x = astensor(x)
        xd = x.data
        feat_axis = 1 if xd.ndim > 2 else xd.ndim - 1
        if xd.shape[feat_axis] != self.num_features:
            raise ValueError(
                f"expected {self.num_features} features on axis {feat_axis}, got {xd.shape}"
            )
        red_axes = tuple(i for i in range(xd.ndim) if i != feat_axis)
        shape = [1] * xd.ndim
        shape[feat_axis] = self.num_features
        m = xd.size // self.num_features

        if self.training:
            if m < 2:
                raise ValueError("batchnorm needs at least 2 elements per feature in training")
            mean = xd.mean(axis=red_axes)
            var = xd.var(axis=red_axes)
            self.running_mean[...] = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var[...] = self.momentum * self.running_var + (1 - self.momentum) * var

            mu = mean.reshape(shape)
            invstd = (1.0 / np.sqrt(var + self.eps)).reshape(shape)
            xhat = (xd - mu) * invstd
            gd = self.gamma.data.reshape(shape)

            def backward(g):
                dbeta = g.sum(axis=red_axes)
                dgamma = (g * xhat).sum(axis=red_axes)
                dxhat = g * gd
                s1 = dxhat.sum(axis=red_axes, keepdims=True)
                s2 = (dxhat * xhat).sum(axis=red_axes, keepdims=True)
                dx = (invstd / m) * (m * dxhat - s1 - xhat * s2)
                return dx.astype(xd.dtype), dgamma, dbeta

            out = xhat * gd + self.beta.data.reshape(shape)
            return make_op(out, (x, self.gamma, self.beta), backward)

        mu = self.running_mean.reshape(shape)
        invstd = (1.0 / np.sqrt(self.running_var + self.eps)).reshape(shape)
        xhat = (x - mu) * invstd
        return xhat * self.gamma.reshape(tuple(shape)) + self.beta.reshape(tuple(shape))


class Dropout(Module):
    """Inverted dropout: identity at inference, mask/keep at training."""

    def __init__(self, p, rng=None):
        super().__init__()
        if not 0 <= p < 1:
            raise ValueError("dropout probability must be in [0, 1)")
        self.p = p
        self.rng = rng or np.random.default_rng(0)

    def __call__(self, x):
        x = astensor(x)
        if not self.training or self.p == 0:
            return x
        keep = 1.0 - self.p
        mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * mask

    def reseed(self, seed):
        self.rng = np.random.default_rng(seed)
