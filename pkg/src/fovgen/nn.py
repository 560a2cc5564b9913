"""Minimal numpy layer library with explicit forward/backward passes.

Design rules:
  * forward(x, cache) never mutates module state; intermediates go into the
    per-call ``cache`` dict, so forward-only calls (cache=None) are reentrant
    and thread-safe with immutable weights.
  * backward(dy, cache) accumulates into Param.grad and returns dx.
  * every module takes an explicit rng and dtype at construction, so model
    builds are bit-reproducible.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from fovgen import kernels
from fovgen.errors import GeometryError


class Param:
    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.ascontiguousarray(data)
        self.grad = None

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


class Module:
    def __init__(self):
        self._params: dict[str, Param] = {}
        self._children: dict[str, Module] = {}

    def new_param(self, name: str, data: np.ndarray) -> Param:
        p = Param(data)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_params(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_params(prefix + cname + ".")

    def params(self):
        for _, p in self.named_params():
            yield p

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_params()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_params())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state dict: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise GeometryError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = np.ascontiguousarray(arr)


def subcache(cache, name):
    if cache is None:
        return None
    return cache.setdefault(name, {})


# ---------------------------------------------------------------------------
# elementwise ops


def sigmoid(x):
    # exp overflow for very negative x saturates to inf -> 1/inf = 0, which
    # is the correct limit; suppress the warning instead of branching
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    return x * sigmoid(x)


def silu_cached(x):
    """Returns (silu(x), sigmoid(x)) so backward can reuse the sigmoid."""
    s = sigmoid(x)
    return x * s, s


def silu_grad(x, s=None):
    if s is None:
        s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    phi = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + erf(x / math.sqrt(2.0))) + x * phi


def softmax(s, axis=-1):
    m = np.max(s, axis=axis, keepdims=True)
    # rows that are entirely -inf would produce NaN; callers guarantee at
    # least one finite entry per row (latent keys are never masked)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_grad(p, dp, axis=-1):
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# layers


class Linear(Module):
    def __init__(self, d_in, d_out, rng, bias=True, init="xavier", dtype=np.float32):
        super().__init__()
        if init == "xavier":
            std = math.sqrt(2.0 / (d_in + d_out))
        elif init == "he":
            std = math.sqrt(2.0 / d_in)
        elif init == "zero":
            std = 0.0
        else:
            raise ValueError(init)
        w = rng.standard_normal((d_in, d_out)) * std
        self.w = self.new_param("w", w.astype(dtype))
        self.b = self.new_param("b", np.zeros(d_out, dtype=dtype)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x, cache=None):
        y = x @ self.w.data
        if self.b is not None:
            y = y + self.b.data
        if cache is not None:
            cache["x"] = x
        return y

    def backward(self, dy, cache):
        x = cache["x"]
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.w.add_grad(x2.T @ dy2)
        if self.b is not None:
            self.b.add_grad(dy2.sum(axis=0))
        return (dy2 @ self.w.data.T).reshape(x.shape)


class Conv2d(Module):
    """k x k convolution via im2col + GEMM in patch-major layout; cols are
    recomputed in backward to keep activation memory at O(x) not O(x * k^2)."""

    def __init__(self, c_in, c_out, k, rng, stride=1, pad=None, init="he", dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        fan_in = c_in * k * k
        std = 0.0 if init == "zero" else math.sqrt(2.0 / fan_in)
        w = rng.standard_normal((c_out, c_in, k, k)) * std
        self.w = self.new_param("w", w.astype(dtype))
        self.b = self.new_param("b", np.zeros(c_out, dtype=dtype))

    def _wmat(self):
        # (c_out, c_in, k, k) flattens directly to the cols' patch index order
        return self.w.data.reshape(self.c_out, self.c_in * self.k * self.k)

    def forward(self, x, cache=None):
        n, c, h, w = x.shape
        if c != self.c_in:
            raise GeometryError(f"conv expects {self.c_in} channels, got {c}")
        cols = kernels.im2col(x, self.k, self.k, self.stride, self.pad)
        oh = kernels.conv_out_size(h, self.k, self.stride, self.pad)
        ow = kernels.conv_out_size(w, self.k, self.stride, self.pad)
        wm = self._wmat()
        y = np.empty((n, self.c_out, cols.shape[2]), dtype=cols.dtype)
        for i in range(n):  # per-sample 2-D GEMMs keep BLAS on the fast path
            np.matmul(wm, cols[i], out=y[i])
        y += self.b.data[:, None]
        if cache is not None:
            cache["x"] = x
        return y.reshape(n, self.c_out, oh, ow)

    def backward(self, dy, cache):
        x = cache["x"]
        n = x.shape[0]
        dy2 = np.ascontiguousarray(dy.reshape(n, self.c_out, -1))  # (N, c_out, L)
        cols = kernels.im2col(x, self.k, self.k, self.stride, self.pad)
        ckk = cols.shape[1]
        dwm = np.zeros((self.c_out, ckk), dtype=cols.dtype)
        dcols = kernels.scratch(("dcols",) + cols.shape, cols.dtype)
        wm_t = np.ascontiguousarray(self._wmat().T)
        for i in range(n):
            dwm += dy2[i] @ cols[i].T  # BLAS handles the transposed view
            np.matmul(wm_t, dy2[i], out=dcols[i])
        self.w.add_grad(dwm.reshape(self.w.data.shape))
        self.b.add_grad(dy2.sum(axis=(0, 2)))
        return kernels.col2im(dcols, x.shape, self.k, self.k, self.stride, self.pad)


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps=1e-5):
        super().__init__()
        if channels % groups:
            raise GeometryError("channels must divide into groups")
        self.groups, self.channels, self.eps = groups, channels, eps
        self.g = self.new_param("g", np.ones(channels, dtype=dtype))
        self.b = self.new_param("b", np.zeros(channels, dtype=dtype))

    def forward(self, x, cache=None):
        n, c, h, w = x.shape
        xg = x.reshape(n, self.groups, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(n, c, h, w)
        if cache is not None:
            cache["xhat"], cache["inv"] = xhat, inv
        return xhat * self.g.data[:, None, None] + self.b.data[:, None, None]

    def backward(self, dy, cache):
        xhat, inv = cache["xhat"], cache["inv"]
        n, c, h, w = dy.shape
        self.g.add_grad((dy * xhat).sum(axis=(0, 2, 3)))
        self.b.add_grad(dy.sum(axis=(0, 2, 3)))
        dxhat = (dy * self.g.data[:, None, None]).reshape(n, self.groups, -1)
        xh = xhat.reshape(n, self.groups, -1)
        m1 = dxhat.mean(axis=2, keepdims=True)
        m2 = (dxhat * xh).mean(axis=2, keepdims=True)
        dx = inv * (dxhat - m1 - xh * m2)
        return dx.reshape(n, c, h, w)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.dim, self.eps = dim, eps
        self.g = self.new_param("g", np.ones(dim, dtype=dtype))
        self.b = self.new_param("b", np.zeros(dim, dtype=dtype))

    def forward(self, x, cache=None):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if cache is not None:
            cache["xhat"], cache["inv"] = xhat, inv
        return xhat * self.g.data + self.b.data

    def backward(self, dy, cache):
        xhat, inv = cache["xhat"], cache["inv"]
        red = tuple(range(dy.ndim - 1))
        self.g.add_grad((dy * xhat).sum(axis=red))
        self.b.add_grad(dy.sum(axis=red))
        dxhat = dy * self.g.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class SiLU(Module):
    def forward(self, x, cache=None):
        y, s = silu_cached(x)
        if cache is not None:
            cache["x"], cache["s"] = x, s
        return y

    def backward(self, dy, cache):
        return dy * silu_grad(cache["x"], cache["s"])


class GELU(Module):
    def forward(self, x, cache=None):
        if cache is not None:
            cache["x"] = x
        return gelu(x)

    def backward(self, dy, cache):
        return dy * gelu_grad(cache["x"])


class FeedForward(Module):
    """Pre-LN transformer feedforward: LN -> Linear -> GELU -> Linear, residual
    added by the caller."""

    def __init__(self, dim, rng, mult=4, dtype=np.float32):
        super().__init__()
        self.ln = self.add_child("ln", LayerNorm(dim, dtype=dtype))
        self.fc1 = self.add_child("fc1", Linear(dim, dim * mult, rng, dtype=dtype))
        self.act = self.add_child("act", GELU())
        self.fc2 = self.add_child("fc2", Linear(dim * mult, dim, rng, dtype=dtype))

    def forward(self, x, cache=None):
        h = self.ln.forward(x, subcache(cache, "ln"))
        h = self.fc1.forward(h, subcache(cache, "fc1"))
        h = self.act.forward(h, subcache(cache, "act"))
        return self.fc2.forward(h, subcache(cache, "fc2"))

    def backward(self, dy, cache):
        d = self.fc2.backward(dy, cache["fc2"])
        d = self.act.backward(d, cache["act"])
        d = self.fc1.backward(d, cache["fc1"])
        return self.ln.backward(d, cache["ln"])


# ---------------------------------------------------------------------------
# attention primitives


def split_heads(x, heads):
    """(..., n, h*d) -> (..., h, n, d)"""
    *lead, n, hd = x.shape
    d = hd // heads
    x = x.reshape(*lead, n, heads, d)
    return np.moveaxis(x, -2, -3)


def merge_heads(x):
    """(..., h, n, d) -> (..., n, h*d)"""
    x = np.moveaxis(x, -3, -2)
    *lead, n, h, d = x.shape
    return np.ascontiguousarray(x).reshape(*lead, n, h * d)


def attention_forward(q, k, v, scale, key_mask=None, cache=None):
    """softmax(q k^T * scale) v with optional boolean key mask (True = keep).

    q (..., nq, dk), k (..., nk, dk), v (..., nk, dv), key_mask (..., nk)
    broadcastable against the score matrix's key axis.
    """
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    if key_mask is not None:
        s = np.where(key_mask[..., None, :], s, -np.inf)
    p = softmax(s)
    y = p @ v
    if cache is not None:
        cache.update(q=q, k=k, v=v, p=p, scale=scale)
    return y


def attention_backward(dy, cache):
    q, k, v, p, scale = cache["q"], cache["k"], cache["v"], cache["p"], cache["scale"]
    dv = np.swapaxes(p, -1, -2) @ dy
    dp = dy @ np.swapaxes(v, -1, -2)
    ds = softmax_grad(p, dp)
    dq = (ds @ k) * scale
    dk = (np.swapaxes(ds, -1, -2) @ q) * scale
    return dq, dk, dv


# ---------------------------------------------------------------------------
# misc structural ops


def upsample_nearest2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2_backward(dy):
    n, c, h2, w2 = dy.shape
    return dy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal embedding of integer timesteps; t is a 1-D int array."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half - 1, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay (decay applied directly to weights)."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data -= self.lr * update

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = [np.asarray(a) for a in state["m"]]
        self.v = [np.asarray(a) for a in state["v"]]


# ---------------------------------------------------------------------------
# finite-difference checking


def finite_difference_check(module, loss_fn, rng, n_coords=4, eps=1e-5, max_tensors=None):
    """Compare analytic grads against central differences.

    loss_fn(no_grad=...) -> scalar must run forward+backward with grads
    accumulated on the module when no_grad is False.  Checks ``n_coords``
    random coordinates per parameter tensor (optionally on a random subset of
    ``max_tensors`` tensors); returns the max relative error.
    """
    module.zero_grad()
    loss_fn()
    params = [(name, p) for name, p in module.named_params() if p.grad is not None]
    if max_tensors is not None and len(params) > max_tensors:
        idx = rng.choice(len(params), size=max_tensors, replace=False)
        params = [params[i] for i in idx]
    worst = 0.0
    for name, p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn(no_grad=True)
            flat[i] = orig - eps
            lm = loss_fn(no_grad=True)
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            an = gflat[i]
            denom = max(abs(fd), abs(an))
            err = 0.0 if denom < 1e-10 else abs(fd - an) / denom
            worst = max(worst, err)
    return worst
