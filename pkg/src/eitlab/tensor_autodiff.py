"""Minimal differentiable compute core for the two small networks.

No tape: the model zoo is fixed and tiny, so every layer is a class with
an explicit ``forward`` that caches what its ``backward`` needs.  Backward
returns the gradient with respect to the layer input and accumulates
parameter gradients in place.  Layers run in whatever float dtype their
parameters were built with; float32 is the training default and float64 is
used by the finite-difference verification suite.

Convolutions lower to batched GEMM through an im2col buffer; the buffer is
dropped after backward so memory is bounded by one step's activations.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Parameter:
    """Named value/gradient pair; names key the checkpoint format."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)


def kaiming_uniform(
    shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype
) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def params(self) -> list[Parameter]:
        return []


class Conv2d(Layer):
    """Cross-correlation with odd square kernels, NCHW layout."""

    def __init__(
        self,
        name: str,
        in_ch: int,
        out_ch: int,
        kernel: int = 3,
        stride: int = 1,
        pad: int = 0,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if kernel % 2 != 1:
            raise ContractError("conv kernels must be odd-sized")
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_ch * kernel * kernel
        self.weight = Parameter(
            f"{name}.weight",
            kaiming_uniform((out_ch, in_ch, kernel, kernel), fan_in, rng, dtype),
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch, dtype=dtype))
        self._cols = None
        self._x_shape = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ContractError(
                f"conv expected {self.in_ch} input channels, got {c}"
            )
        k, s, p = self.kernel, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ContractError("conv output would be empty")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                cols[:, :, di, dj] = xp[
                    :, :, di : di + ho * s : s, dj : dj + wo * s : s
                ]
        self._cols = cols.reshape(n, c * k * k, ho * wo)
        self._x_shape = x.shape
        w2 = self.weight.value.reshape(self.out_ch, -1)
        y = np.matmul(w2, self._cols).reshape(n, self.out_ch, ho, wo)
        return y + self.bias.value[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, _, ho, wo = dy.shape
        k, s, p = self.kernel, self.stride, self.pad
        _, c, h, w = self._x_shape
        dym = dy.reshape(n, self.out_ch, ho * wo)
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        dw2 = np.matmul(dym, self._cols.transpose(0, 2, 1)).sum(axis=0)
        self.weight.grad += dw2.reshape(self.weight.value.shape)
        w2 = self.weight.value.reshape(self.out_ch, -1)
        dcols = np.matmul(w2.T, dym).reshape(n, c, k, k, ho, wo)
        self._cols = None
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di : di + ho * s : s, dj : dj + wo * s : s] += dcols[
                    :, :, di, dj
                ]
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class Dense(Layer):
    def __init__(
        self,
        name: str,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(
            f"{name}.weight", kaiming_uniform((out_dim, in_dim), in_dim, rng, dtype)
        )
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ContractError(
                f"dense expected (batch, {self.in_dim}), got {x.shape}"
            )
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.weight.grad += dy.T @ self._x
        self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, dy.dtype.type(0))


class SiLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        self._sig = 1.0 / (1.0 + np.exp(-x))
        return x * self._sig

    def backward(self, dy: np.ndarray) -> np.ndarray:
        s = self._sig
        return dy * (s * (1.0 + self._x * (1.0 - s)))


class GroupNorm(Layer):
    """Normalize over channel groups of an NCHW tensor, then affine."""

    def __init__(self, name: str, groups: int, channels: int, eps: float = 1e-5,
                 dtype=np.float32):
        if channels % groups != 0:
            raise ContractError("channels must divide evenly into groups")
        self.groups, self.channels, self.eps = groups, channels, eps
        self.gamma = Parameter(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(channels, dtype=dtype))

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ContractError("group_norm channel mismatch")
        g = self.groups
        xg = x.reshape(n, g, -1)
        mu = xg.mean(axis=2, keepdims=True)
        var = xg.var(axis=2, keepdims=True)
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (xg - mu) * ivar
        self._xhat = xhat
        self._ivar = ivar
        self._shape = (n, c, h, w)
        y = xhat.reshape(n, c, h, w) * self.gamma.value[None, :, None, None]
        return y + self.beta.value[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        g = self.groups
        xhat_nc = self._xhat.reshape(n, c, h, w)
        self.gamma.grad += (dy * xhat_nc).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = (dy * self.gamma.value[None, :, None, None]).reshape(n, g, -1)
        xhat = self._xhat
        m = xhat.shape[2]
        # dx for y=(x-mu)*ivar with mu/var over the group axis
        sum_d = dxhat.sum(axis=2, keepdims=True)
        sum_dx = (dxhat * xhat).sum(axis=2, keepdims=True)
        dx = self._ivar * (dxhat - sum_d / m - xhat * sum_dx / m)
        return dx.reshape(n, c, h, w)


class NearestUpsample(Layer):
    def __init__(self, factor: int = 2):
        self.factor = factor

    def forward(self, x: np.ndarray) -> np.ndarray:
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        f = self.factor
        n, c, hf, wf = dy.shape
        return dy.reshape(n, c, hf // f, f, wf // f, f).sum(axis=(3, 5))


def concat(a: np.ndarray, b: np.ndarray, axis: int = 1) -> np.ndarray:
    return np.concatenate([a, b], axis=axis)


def split_like(d: np.ndarray, a_channels: int, axis: int = 1):
    """Backward of concat: split the gradient at the seam."""
    return np.split(d, [a_channels], axis=axis)


class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(
        self,
        params: list[Parameter],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad[...] = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.value -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def adam_update_scalar(p, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Single-value Adam update, used as the hand-checkable reference."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mh = m / (1 - beta1**t)
    vh = v / (1 - beta2**t)
    return p - lr * mh / (np.sqrt(vh) + eps), m, v


def value_and_grad_wrt_input(model, x: np.ndarray, loss_head):
    """Scalar loss and its exact reverse-mode input gradient.

    ``loss_head(y) -> (loss, dloss_dy)`` closes over any targets; model
    parameters also accumulate gradients, which callers refining inputs
    simply ignore.
    """
    y = model.forward(x)
    loss, dy = loss_head(y)
    if np.ndim(loss) != 0:
        raise ContractError("loss head must produce a scalar")
    return float(loss), model.backward(dy)


def grad_wrt_input(model, x: np.ndarray, loss_head) -> np.ndarray:
    return value_and_grad_wrt_input(model, x, loss_head)[1]


def numeric_gradient(f, x: np.ndarray, h_scale: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, in place over x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        h = h_scale * max(1.0, abs(float(orig)))
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   atol: float = 1e-10) -> float:
    """Max elementwise relative deviation with an absolute floor."""
    denom = np.maximum(np.abs(numeric), np.maximum(np.abs(analytic), atol))
    small = (np.abs(numeric) < atol) & (np.abs(analytic) < atol)
    err = np.abs(analytic - numeric) / denom
    err[small] = 0.0
    return float(err.max(initial=0.0))
