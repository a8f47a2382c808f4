"""Numpy layers with hand-written reverse-mode gradients, plus Adam.

Each layer caches what its backward pass needs during ``forward`` and
exposes ``params`` / ``grads`` dictionaries keyed by parameter name. Tensors
are 4-D (batch, maps, height, width) except for ``Dense`` which works on
(batch, features).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _backend
from .errors import NumericError, ShapeError


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


class Layer:
    trainable = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self


def _same_pad(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


class Conv2D(Layer):
    """Stride-1 cross-correlation with 'same' or 'valid' padding.

    weight: (out_maps, in_maps, kh, kw); bias: (out_maps,).
    """

    def __init__(self, in_maps, out_maps, kernel, padding="same", bias=True, rng=None, dtype=np.float32):
        super().__init__()
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.in_maps, self.out_maps = in_maps, out_maps
        self.kernel = tuple(kernel)
        self.padding = padding
        # set False on a first layer whose input gradient nobody consumes
        self.input_grad = True
        kh, kw = self.kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = glorot_uniform(rng, (out_maps, in_maps, kh, kw), in_maps * kh * kw,
                                               out_maps * kh * kw, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_maps, dtype=dtype)
        self.zero_grad()

    def _pads(self):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        return _same_pad(self.kernel[0]), _same_pad(self.kernel[1])

    def output_shape(self, in_shape):
        (pt, pb), (pl, pr) = self._pads()
        b, _, h, w = in_shape
        return b, self.out_maps, h + pt + pb - self.kernel[0] + 1, w + pl + pr - self.kernel[1] + 1

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.in_maps:
            raise ShapeError(f"Conv2D expects (batch, {self.in_maps}, h, w), got {x.shape}")
        (pt, pb), (pl, pr) = self._pads()
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
        if xp.shape[2] < self.kernel[0] or xp.shape[3] < self.kernel[1]:
            raise ShapeError(f"kernel {self.kernel} larger than padded input {xp.shape[2:]}")
        y = _backend.corr2d(xp, self.params["weight"])
        if "bias" in self.params:
            y += self.params["bias"][None, :, None, None]
        self._cache = (xp, x.shape)
        return y

    def backward(self, dy):
        xp, in_shape = self._cache
        kh, kw = self.kernel
        self.grads["weight"] = _backend.corr2d_grad_weight(xp, dy, kh, kw)
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        if not self.input_grad:
            return None
        dxp = _backend.corr2d_grad_input(dy, self.params["weight"], xp.shape[2], xp.shape[3])
        (pt, _), (pl, _) = self._pads()
        return dxp[:, :, pt:pt + in_shape[2], pl:pl + in_shape[3]]


class Deconv2D(Layer):
    """Transposed convolution: the input-adjoint of a Conv2D with the same kernel.

    weight: (in_maps, out_maps, kh, kw) -- laid out like the forward Conv2D
    that maps out_maps -> in_maps. 'valid' grows the extents by kernel-1;
    'same' keeps them.
    """

    def __init__(self, in_maps, out_maps, kernel, padding="same", bias=True, rng=None, dtype=np.float32):
        super().__init__()
        if padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        self.in_maps, self.out_maps = in_maps, out_maps
        self.kernel = tuple(kernel)
        self.padding = padding
        kh, kw = self.kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = glorot_uniform(rng, (in_maps, out_maps, kh, kw), out_maps * kh * kw,
                                               in_maps * kh * kw, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_maps, dtype=dtype)
        self.zero_grad()

    def _crop(self, h, w):
        kh, kw = self.kernel
        if self.padding == "valid":
            return 0, h + kh - 1, 0, w + kw - 1
        return _same_pad(kh)[0], h, _same_pad(kw)[0], w

    def output_shape(self, in_shape):
        b, _, h, w = in_shape
        _, oh, _, ow = self._crop(h, w)
        return b, self.out_maps, oh, ow

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.in_maps:
            raise ShapeError(f"Deconv2D expects (batch, {self.in_maps}, h, w), got {x.shape}")
        kh, kw = self.kernel
        full_h, full_w = x.shape[2] + kh - 1, x.shape[3] + kw - 1
        top, oh, left, ow = self._crop(x.shape[2], x.shape[3])
        full = _backend.corr2d_grad_input(x, self.params["weight"], full_h, full_w)
        y = np.ascontiguousarray(full[:, :, top:top + oh, left:left + ow])
        if "bias" in self.params:
            y += self.params["bias"][None, :, None, None]
        self._cache = (x, full.shape, top, left)
        return y

    def backward(self, dy):
        x, full_shape, top, left = self._cache
        dfull = np.zeros(full_shape, dtype=dy.dtype)
        dfull[:, :, top:top + dy.shape[2], left:left + dy.shape[3]] = dy
        kh, kw = self.kernel
        self.grads["weight"] = _backend.corr2d_grad_weight(dfull, x, kh, kw)
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        return _backend.corr2d(dfull, self.params["weight"])


class BatchNorm(Layer):
    """Per-map normalization over (batch, height, width).

    Running statistics follow ``r <- momentum * r + (1 - momentum) * batch``
    with the biased batch variance. Inference mode refuses to run until the
    statistics were updated by a training pass or explicitly initialized.
    """

    def __init__(self, n_maps, eps=1e-3, momentum=0.99, dtype=np.float32):
        super().__init__()
        self.n_maps = n_maps
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(n_maps, dtype=dtype)
        self.params["beta"] = np.zeros(n_maps, dtype=dtype)
        self.running_mean = np.zeros(n_maps, dtype=dtype)
        self.running_var = np.ones(n_maps, dtype=dtype)
        self.stats_ready = False
        self.update_stats = True
        self.zero_grad()

    def reset_running_stats(self):
        """Explicitly initialize running statistics to mean 0, variance 1."""
        self.running_mean = np.zeros_like(self.running_mean)
        self.running_var = np.ones_like(self.running_var)
        self.stats_ready = True

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.n_maps:
            raise ShapeError(f"BatchNorm expects (batch, {self.n_maps}, h, w), got {x.shape}")
        g = self.params["gamma"][None, :, None, None]
        b = self.params["beta"][None, :, None, None]
        if not train:
            if not self.stats_ready:
                raise RuntimeError("BatchNorm inference before running statistics were initialized")
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self._cache = ("infer", xhat, inv)
            return xhat * g + b
        if x.shape[0] < 2:
            raise ShapeError("BatchNorm training mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        if self.update_stats:
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype)
            self.stats_ready = True
        self._cache = ("train", xhat, inv)
        return xhat * g + b

    def backward(self, dy):
        g = self.params["gamma"]
        mode, xhat, inv = self._cache
        self.grads["beta"] = dy.sum(axis=(0, 2, 3))
        self.grads["gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
        if mode == "infer":
            # frozen statistics: a per-map affine map
            return dy * (g * inv)[None, :, None, None]
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dxhat = dy * g[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv[None, :, None, None] / n * (n * dxhat - s1 - xhat * s2)


class ELU(Layer):
    trainable = False

    def __init__(self, alpha=1.0):
        super().__init__()
        self.alpha = alpha

    def forward(self, x, train=True):
        y = np.where(x > 0, x, x.dtype.type(self.alpha) * np.expm1(np.minimum(x, 0)))
        self._cache = (x, y)
        return y

    def backward(self, dy):
        x, y = self._cache
        one = dy.dtype.type(1)
        return dy * np.where(x > 0, one, y + dy.dtype.type(self.alpha))


class MeanPool(Layer):
    """Average non-overlapping windows along the width axis."""

    trainable = False

    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x, train=True):
        b, c, h, w = x.shape
        if w % self.factor:
            raise ShapeError(f"width {w} not divisible by pool factor {self.factor}")
        self._cache = x.shape
        return x.reshape(b, c, h, w // self.factor, self.factor).mean(axis=-1)

    def backward(self, dy):
        return np.repeat(dy, self.factor, axis=-1) / dy.dtype.type(self.factor)


class Upsample(Layer):
    """Nearest-neighbour repetition along the width axis."""

    trainable = False

    def __init__(self, factor=2):
        super().__init__()
        self.factor = factor

    def forward(self, x, train=True):
        return np.repeat(x, self.factor, axis=-1)

    def backward(self, dy):
        b, c, h, w = dy.shape
        return dy.reshape(b, c, h, w // self.factor, self.factor).sum(axis=-1)


class Dense(Layer):
    """Affine map ``x @ W + b`` on (batch, in_features)."""

    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float32):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense expects (batch, {self.in_features}), got {x.shape}")
        self._cache = x
        y = x @ self.params["weight"]
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        x = self._cache
        self.grads["weight"] = x.T @ dy
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=0)
        return dy @ self.params["weight"].T


# ---------------------------------------------------------------- optimizer


@dataclass
class Adam:
    """Adam with bias correction; updates parameter arrays in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}; Adam step aborted at t={self.t}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params: dict, grads: dict, state: Adam) -> Adam:
    state.step(params, grads)
    return state


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_coords: int


def grad_check(loss_fn: Callable[[], float], targets: dict, h: float = 1e-5, max_coords: int = 40,
               floor: float = 1e-7, rng=None, skip: Callable | None = None) -> list[GradCheckResult]:
    """Compare analytic gradients with central differences.

    ``targets`` maps a name to ``(array, analytic_grad)``; arrays are
    perturbed in place and restored. At most ``max_coords`` coordinates per
    array are probed (all of them when the array is smaller). The relative
    error is ``|a - n| / max(|a|, |n|, floor)``. ``skip(name, index)``
    may exclude coordinates, e.g. sitting exactly on an ELU kink.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    first, second = loss_fn(), loss_fn()
    if first != second:
        raise RuntimeError("loss function is not deterministic; freeze noise and BN mode first")
    results = []
    for name, (arr, grad) in targets.items():
        if arr.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 arrays ({name} is {arr.dtype})")
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        used = 0
        for i in coords:
            if skip is not None and skip(name, int(i)):
                continue
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn()
            flat[i] = old - h
            lm = loss_fn()
            flat[i] = old
            num = (lp - lm) / (2 * h)
            ana = float(gflat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            used += 1
        results.append(GradCheckResult(name, worst, used))
    return results
