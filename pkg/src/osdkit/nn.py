"""Minimal differentiable numerics for the CRNN.

Every layer caches what its gradient needs during ``forward`` and returns the
input gradient from ``backward``, accumulating parameter gradients into
``layer.grads``. Activations use channels-last layout: convolutional tensors
are (batch, time, mel, channel), recurrent tensors are (batch, time, feature).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from osdkit import _backend

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_FLOOR = 1e-12
# cap on the im2col buffer per chunk of the batch
_COL_BYTES = 64 * 1024 * 1024


class BackwardError(RuntimeError):
    """Raised when backward is called without a matching forward."""


def glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.grads = {}
        return self

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


class Conv2d(Layer):
    """3x3 cross-correlation, stride 1, zero 'same' padding."""

    def __init__(self, in_channels, out_channels, rng=None, weight=None, bias=None):
        super().__init__()
        if weight is None:
            fan_in, fan_out = 9 * in_channels, 9 * out_channels
            weight = glorot(rng, (3, 3, in_channels, out_channels), fan_in, fan_out)
        if bias is None:
            bias = np.zeros(out_channels)
        self.params["weight"] = np.asarray(weight, dtype=np.float64)
        self.params["bias"] = np.asarray(bias, dtype=np.float64)

    def _chunks(self, x):
        B, T, F, C = x.shape
        per_item = max(1, T * F * 9 * C * 8)
        step = max(1, _COL_BYTES // per_item)
        return range(0, B, step), step

    def forward(self, x, train=False):
        w = self.params["weight"]
        if x.ndim != 4 or x.shape[-1] != w.shape[2]:
            raise ValueError(f"conv input {x.shape} does not match weights {w.shape}")
        B, T, F, C = x.shape
        w2 = w.reshape(9 * C, -1)
        out = np.empty((B, T, F, w.shape[3]), dtype=np.result_type(x, w))
        starts, step = self._chunks(x)
        for s in starts:
            cols = _backend.im2col3x3(x[s : s + step]).reshape(-1, 9 * C)
            out[s : s + step] = (cols @ w2).reshape(-1, T, F, w.shape[3])
        out += self.params["bias"]
        self._cache = x
        return out

    def backward(self, dy):
        x = self._take_cache()
        w = self.params["weight"]
        B, T, F, C = x.shape
        cout = w.shape[3]
        w2 = w.reshape(9 * C, cout)
        dw = np.zeros_like(w2)
        dx = np.empty_like(x)
        starts, step = self._chunks(x)
        for s in starts:
            cols = _backend.im2col3x3(x[s : s + step]).reshape(-1, 9 * C)
            dy2 = dy[s : s + step].reshape(-1, cout)
            dw += cols.T @ dy2
            del cols
            dcols = (dy2 @ w2.T).reshape(-1, T, F, 9, C)
            dx[s : s + step] = _backend.col2im3x3(dcols)
        self._accumulate("weight", dw.reshape(w.shape))
        self._accumulate("bias", dy.reshape(-1, cout).sum(axis=0))
        return dx


class BatchNorm(Layer):
    """Per-channel normalization over every axis except the last."""

    def __init__(self, channels, gamma=None, beta=None):
        super().__init__()
        self.params["gamma"] = np.ones(channels) if gamma is None else np.asarray(gamma, float)
        self.params["beta"] = np.zeros(channels) if beta is None else np.asarray(beta, float)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x, train=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        x2 = x.reshape(-1, x.shape[-1])
        n = x2.shape[0]
        if train:
            mu = x2.mean(axis=0)
            xhat = x2 - mu
            var = np.einsum("ij,ij->j", xhat, xhat) / n
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - BN_MOMENTUM
            rm += BN_MOMENTUM * mu
            rv *= 1.0 - BN_MOMENTUM
            rv += BN_MOMENTUM * var * (n / (n - 1) if n > 1 else 1.0)
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
            xhat = x2 - mu
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat *= inv_std
        self._cache = (xhat, inv_std, train)
        y = xhat * gamma
        y += beta
        return y.reshape(x.shape)

    def backward(self, dy):
        xhat, inv_std, train = self._take_cache()
        gamma = self.params["gamma"]
        dy2 = dy.reshape(-1, dy.shape[-1])
        n = dy2.shape[0]
        dbeta = dy2.sum(axis=0)
        dgamma = np.einsum("ij,ij->j", dy2, xhat)
        self._accumulate("gamma", dgamma)
        self._accumulate("beta", dbeta)
        if not train:
            return (dy2 * (gamma * inv_std)).reshape(dy.shape)
        # gamma/sigma * (dy - mean(dy) - xhat * mean(dy * xhat))
        dx = dy2 - dbeta / n
        dx -= xhat * (dgamma / n)
        dx *= gamma * inv_std
        return dx.reshape(dy.shape)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy):
        return dy * self._take_cache()


class LeakyReLU(Layer):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, self.slope * x)

    def backward(self, dy):
        mask = self._take_cache()
        return np.where(mask, dy, self.slope * dy)


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1-p) so eval is identity."""

    def __init__(self, p=0.5, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._cache = None
            self._passthrough = True
            return x
        self._passthrough = False
        mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        if getattr(self, "_passthrough", False):
            return dy
        return dy * self._take_cache()


class SqueezeExcite(Layer):
    """Channel gates sigmoid(relu(mean_TF(x) @ w1) @ w2) rescaling x."""

    def __init__(self, channels, reduction=16, rng=None, w1=None, w2=None):
        super().__init__()
        hidden = channels // reduction if w1 is None else np.shape(w1)[1]
        if hidden < 1:
            raise ValueError(
                f"SE bottleneck is empty: {channels} channels with reduction {reduction}"
            )
        if w1 is None:
            w1 = glorot(rng, (channels, hidden), channels, hidden)
        if w2 is None:
            w2 = glorot(rng, (hidden, channels), hidden, channels)
        self.params["w1"] = np.asarray(w1, dtype=np.float64)
        self.params["w2"] = np.asarray(w2, dtype=np.float64)

    def forward(self, x, train=False):
        s = x.mean(axis=(1, 2))
        a = s @ self.params["w1"]
        h = np.maximum(a, 0.0)
        e = sigmoid(h @ self.params["w2"])
        self._cache = (x, s, a, h, e)
        return x * e[:, None, None, :]

    def backward(self, dy):
        x, s, a, h, e = self._take_cache()
        _, T, F, _ = x.shape
        de = (dy * x).sum(axis=(1, 2))
        dz = de * e * (1.0 - e)
        self._accumulate("w2", h.T @ dz)
        da = (dz @ self.params["w2"].T) * (a > 0)
        self._accumulate("w1", s.T @ da)
        ds = da @ self.params["w1"].T
        return dy * e[:, None, None, :] + ds[:, None, None, :] / (T * F)


class AvgPool2d(Layer):
    """Non-overlapping mean over (time, mel) windows."""

    def __init__(self, pool):
        super().__init__()
        self.pool = tuple(int(p) for p in pool)

    def forward(self, x, train=False):
        pt, pf = self.pool
        B, T, F, C = x.shape
        if T % pt or F % pf:
            raise ValueError(f"pool {self.pool} does not divide extents ({T}, {F})")
        self._cache = x.shape
        return x.reshape(B, T // pt, pt, F // pf, pf, C).mean(axis=(2, 4))

    def backward(self, dy):
        shape = self._take_cache()
        pt, pf = self.pool
        dx = np.repeat(np.repeat(dy, pt, axis=1), pf, axis=2) / (pt * pf)
        return dx.reshape(shape)


class MelMean(Layer):
    """Average over the mel axis: (B, T, F, C) -> (B, T, C)."""

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.mean(axis=2)

    def backward(self, dy):
        shape = self._take_cache()
        return np.broadcast_to(dy[:, :, None, :] / shape[2], shape).copy()


class Linear(Layer):
    """Affine map on the last axis."""

    def __init__(self, in_features, out_features, rng=None, weight=None, bias=None):
        super().__init__()
        if weight is None:
            weight = glorot(rng, (in_features, out_features), in_features, out_features)
        if bias is None:
            bias = np.zeros(out_features)
        self.params["weight"] = np.asarray(weight, dtype=np.float64)
        self.params["bias"] = np.asarray(bias, dtype=np.float64)

    def forward(self, x, train=False):
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dy):
        x = self._take_cache()
        w = self.params["weight"]
        self._accumulate("weight", x.reshape(-1, w.shape[0]).T @ dy.reshape(-1, w.shape[1]))
        self._accumulate("bias", dy.reshape(-1, w.shape[1]).sum(axis=0))
        return dy @ w.T


class GRU(Layer):
    """Single-direction GRU over (B, T, D) with gate order (reset, update, new).

    r = sig(x Wir + bir + h Whr + bhr)
    z = sig(x Wiz + biz + h Whz + bhz)
    n = tanh(x Win + bin + r * (h Whn + bhn))
    h' = (1 - z) * n + z * h
    """

    def __init__(self, input_size, hidden_size, rng=None, reverse=False):
        super().__init__()
        H = hidden_size
        self.hidden_size = H
        self.reverse = reverse
        if rng is not None:
            self.params["w_ih"] = glorot(rng, (input_size, 3 * H), input_size, 3 * H)
            self.params["w_hh"] = glorot(rng, (H, 3 * H), H, 3 * H)
        else:
            self.params["w_ih"] = np.zeros((input_size, 3 * H))
            self.params["w_hh"] = np.zeros((H, 3 * H))
        self.params["b_ih"] = np.zeros(3 * H)
        self.params["b_hh"] = np.zeros(3 * H)

    def forward(self, x, train=False):
        B, T, _ = x.shape
        if T == 0:
            raise ValueError("GRU needs at least one time step")
        if self.reverse:
            x = x[:, ::-1]
        H = self.hidden_size
        w_hh, b_hh = self.params["w_hh"], self.params["b_hh"]
        xg = x @ self.params["w_ih"] + self.params["b_ih"]
        h = np.zeros((B, H), dtype=xg.dtype)
        hs = np.empty((B, T, H), dtype=xg.dtype)
        steps = []
        for t in range(T):
            hg = h @ w_hh + b_hh
            r = sigmoid(xg[:, t, :H] + hg[:, :H])
            z = sigmoid(xg[:, t, H : 2 * H] + hg[:, H : 2 * H])
            n = np.tanh(xg[:, t, 2 * H :] + r * hg[:, 2 * H :])
            steps.append((h, r, z, n, hg[:, 2 * H :]))
            h = (1.0 - z) * n + z * h
            hs[:, t] = h
        self._cache = (x, steps)
        return hs[:, ::-1] if self.reverse else hs

    def backward(self, dy):
        x, steps = self._take_cache()
        if self.reverse:
            dy = dy[:, ::-1]
        B, T, D = x.shape
        H = self.hidden_size
        w_hh = self.params["w_hh"]
        dtype = np.result_type(dy, w_hh)
        dxg = np.empty((B, T, 3 * H), dtype=dtype)
        dw_hh = np.zeros_like(w_hh)
        db_hh = np.zeros(3 * H, dtype=w_hh.dtype)
        dh_next = np.zeros((B, H), dtype=dtype)
        for t in range(T - 1, -1, -1):
            h_prev, r, z, n, hn = steps[t]
            dh = dy[:, t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dar = dan * hn * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dhg = np.concatenate([dar, daz, dan * r], axis=1)
            dxg[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dw_hh += h_prev.T @ dhg
            db_hh += dhg.sum(axis=0)
            dh_next = dh * z + dhg @ w_hh.T
        self._accumulate("w_hh", dw_hh)
        self._accumulate("b_hh", db_hh)
        self._accumulate("w_ih", x.reshape(-1, D).T @ dxg.reshape(-1, 3 * H))
        self._accumulate("b_ih", dxg.reshape(-1, 3 * H).sum(axis=0))
        dx = dxg @ self.params["w_ih"].T
        return dx[:, ::-1] if self.reverse else dx


class BiGRU(Layer):
    """Forward and time-reversed GRU with outputs concatenated per frame."""

    def __init__(self, input_size, hidden_size, rng=None):
        super().__init__()
        self.fwd = GRU(input_size, hidden_size, rng)
        self.bwd = GRU(input_size, hidden_size, rng, reverse=True)
        self.hidden_size = hidden_size
        for prefix, g in (("fwd", self.fwd), ("bwd", self.bwd)):
            for k, v in g.params.items():
                self.params[f"{prefix}.{k}"] = v

    def _sync_grads(self):
        for prefix, g in (("fwd", self.fwd), ("bwd", self.bwd)):
            for k, v in g.grads.items():
                self.grads[f"{prefix}.{k}"] = v

    def zero_grad(self):
        self.fwd.zero_grad()
        self.bwd.zero_grad()
        self._sync_grads()

    def astype(self, dtype):
        self.fwd.astype(dtype)
        self.bwd.astype(dtype)
        for prefix, g in (("fwd", self.fwd), ("bwd", self.bwd)):
            for k, v in g.params.items():
                self.params[f"{prefix}.{k}"] = v
        self.grads = {}
        return self

    def forward(self, x, train=False):
        return np.concatenate([self.fwd.forward(x, train), self.bwd.forward(x, train)], axis=-1)

    def backward(self, dy):
        H = self.hidden_size
        dx = self.fwd.backward(dy[..., :H]) + self.bwd.backward(dy[..., H:])
        self._sync_grads()
        return dx


class Sequential(Layer):
    """Chain of named layers; backward runs them in reverse order."""

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def astype(self, dtype):
        for _, layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, x, train=False):
        for _, layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# --- functional surface -------------------------------------------------


def conv2d_forward(x, weights, bias):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    y = Conv2d(0, 0, weight=weights, bias=bias).forward(x[None] if single else x)
    return y[0] if single else y


def batchnorm_forward(x, gamma, beta, mode="train", running_mean=None, running_var=None):
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    bn = BatchNorm(len(gamma), gamma, beta)
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("eval-mode batch norm needs running statistics")
        bn.buffers["running_mean"] = np.asarray(running_mean, float)
        bn.buffers["running_var"] = np.asarray(running_var, float)
    return bn.forward(np.asarray(x, dtype=np.float64), train=mode == "train")


def se_block(x, w1, w2):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    y = SqueezeExcite(x.shape[-1], w1=w1, w2=w2).forward(x[None] if single else x)
    return y[0] if single else y


def avg_pool2d(x, pool):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    y = AvgPool2d(pool).forward(x[None] if single else x)
    return y[0] if single else y


def bigru_forward(x, fwd_params, bwd_params):
    """Run a bidirectional GRU on a (T, D) or (B, T, D) sequence.

    ``fwd_params``/``bwd_params`` map ``w_ih, w_hh, b_ih, b_hh`` to arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    H = np.shape(fwd_params["w_hh"])[0]
    layer = BiGRU(x.shape[-1], H)
    for g, p in ((layer.fwd, fwd_params), (layer.bwd, bwd_params)):
        for k in g.params:
            g.params[k] = np.asarray(p[k], dtype=np.float64)
    y = layer.forward(x[None] if single else x)
    return y[0] if single else y


def linear_forward(x, W, b):
    return np.asarray(x, dtype=np.float64) @ W + b


def relu(x):
    return np.maximum(x, 0.0)


def leaky_relu(x, slope=0.01):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, slope * x)


def dropout(x, p, mode="train", rng=None):
    return Dropout(p, rng).forward(np.asarray(x, dtype=np.float64), train=mode == "train")


def softmax(logits):
    logits = np.asarray(logits)
    if logits.dtype not in (np.float32, np.float64):
        logits = logits.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_ce_loss(probs, labels, class_weights):
    """Weighted cross-entropy normalized by the sum of the applied weights."""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, np.shape(probs)[-1])
    labels = np.asarray(labels).reshape(-1)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    picked = np.maximum(probs[np.arange(labels.size), labels], PROB_FLOOR)
    return float(np.sum(w * -np.log(picked)) / np.sum(w))


def weighted_ce_grad(probs, labels, class_weights):
    """Gradient of :func:`weighted_ce_loss` with respect to the softmax logits."""
    shape = np.shape(probs)
    probs = np.asarray(probs).reshape(-1, shape[-1])
    labels = np.asarray(labels).reshape(-1)
    w = np.asarray(class_weights, dtype=probs.dtype)[labels]
    d = probs.copy()
    d[np.arange(labels.size), labels] -= 1.0
    return (d * (w / w.sum())[:, None]).reshape(shape)


def class_weights_from_counts(counts):
    """w[c] = total / (K * counts[c]), so every class carries equal weighted mass."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError(f"every class needs at least one frame, got counts {counts.tolist()}")
    return counts.sum() / (counts.size * counts)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update of ``params`` (name -> array)."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if lr == 0.0:
            continue
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def cosine_lr(step, total_steps, lr_max, lr_min=0.0):
    if total_steps <= 0:
        return float(lr_max)
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
