"""Primitive kernels and their vector-Jacobian products.

Every primitive is a :class:`~yoga.tensor.Function`.  The lower-case helpers
(``conv2d``, ``batchnorm2d``, ...) validate arguments and record the op on
the tape.  Layout is channels-first ``(n, c, h, w)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from .tensor import Function, Tensor, as_tensor

BN_EPS = 1e-3
BN_MOMENTUM = 0.03


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        k = self.kernel
        if isinstance(k, int):
            object.__setattr__(self, "kernel", (k, k))
        if self.in_ch <= 0 or self.out_ch <= 0:
            raise ValueError("channel counts must be positive")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError("stride >= 1, padding >= 0 and groups >= 1 required")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise DimensionError(
                f"in_ch={self.in_ch} and out_ch={self.out_ch} must be divisible by "
                f"groups={self.groups}", axis="channels")

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch // self.groups) + tuple(self.kernel)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_ch == self.out_ch

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        return ((h + 2 * self.padding - kh) // self.stride + 1,
                (w + 2 * self.padding - kw) // self.stride + 1)

    def param_count(self) -> int:
        return int(np.prod(self.weight_shape)) + (self.out_ch if self.bias else 0)

    def macs(self, n: int, h: int, w: int) -> int:
        oh, ow = self.output_hw(h, w)
        kh, kw = self.kernel
        return n * self.out_ch * oh * ow * (self.in_ch // self.groups) * kh * kw


def _check_rank4(x: np.ndarray, what: str = "input"):
    if x.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}",
                             axis="rank")


def _pad(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------
class Conv2d(Function):
    """Cross-correlation with zero padding, stride and channel groups."""

    name = "conv2d"

    def _forward(self, x, w, b=None):
        s, p, g = self.stride, self.padding, self.groups
        n, cin, h, wd = x.shape
        cout, cig, kh, kw = w.shape
        oh = (h + 2 * p - kh) // s + 1
        ow = (wd + 2 * p - kw) // s + 1
        xp = _pad(x, p)
        self.geom = (n, cin, h, wd, cout, cig, kh, kw, oh, ow)
        self.w = w
        self.has_bias = b is not None
        if g == 1:
            cols = self._im2col(xp, kh, kw, oh, ow)
            out = cols @ w.reshape(cout, -1).T
            self.cols = cols
            out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
        elif cig == 1 and cout == g:
            # depth-wise: accumulate kernel-major over shifted views
            self.xp = xp
            out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    out += xp[:, :, i:i + s * oh:s, j:j + s * ow:s] * w[:, 0, i, j][None, :, None, None]
        else:
            cog = cout // g
            out = np.empty((n, cout, oh, ow), dtype=x.dtype)
            self.cols = []
            for gi in range(g):
                cols = self._im2col(xp[:, gi * cig:(gi + 1) * cig], kh, kw, oh, ow)
                wg = w[gi * cog:(gi + 1) * cog].reshape(cog, -1)
                out[:, gi * cog:(gi + 1) * cog] = (cols @ wg.T).reshape(n, oh, ow, cog).transpose(0, 3, 1, 2)
                self.cols.append(cols)
        out = np.ascontiguousarray(out)
        if b is not None:
            out += b[None, :, None, None]
        return out

    def _im2col(self, xp, kh, kw, oh, ow):
        s = self.stride
        n, c = xp.shape[:2]
        if kh == 1 and kw == 1:
            v = xp[:, :, ::s, ::s][:, :, :oh, :ow]
            return v.transpose(0, 2, 3, 1).reshape(n * oh * ow, c)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)

    def _col2im(self, dcols, c, kh, kw):
        n, cin, h, wd, cout, cig, _, _, oh, ow = self.geom
        s, p = self.stride, self.padding
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dcols.dtype)
        d = dcols.reshape(n, oh, ow, c, kh, kw)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += d[..., i, j].transpose(0, 3, 1, 2)
        return dxp

    def _vjp(self, gy):
        n, cin, h, wd, cout, cig, kh, kw, oh, ow = self.geom
        s, p, g = self.stride, self.padding, self.groups
        w = self.w
        gb = gy.sum(axis=(0, 2, 3)) if self.has_bias else None
        if g == 1:
            g2 = gy.transpose(0, 2, 3, 1).reshape(-1, cout)
            gw = (g2.T @ self.cols).reshape(w.shape)
            dxp = self._col2im(g2 @ w.reshape(cout, -1), cin, kh, kw)
        elif cig == 1 and cout == g:
            xp = self.xp
            gw = np.zeros_like(w)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    sl = (slice(None), slice(None), slice(i, i + s * oh, s), slice(j, j + s * ow, s))
                    gw[:, 0, i, j] = (gy * xp[sl]).sum(axis=(0, 2, 3))
                    dxp[sl] += gy * w[:, 0, i, j][None, :, None, None]
        else:
            cog = cout // g
            gw = np.empty_like(w)
            dxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p), dtype=gy.dtype)
            for gi in range(g):
                g2 = gy[:, gi * cog:(gi + 1) * cog].transpose(0, 2, 3, 1).reshape(-1, cog)
                wg = w[gi * cog:(gi + 1) * cog].reshape(cog, -1)
                gw[gi * cog:(gi + 1) * cog] = (g2.T @ self.cols[gi]).reshape(cog, cig, kh, kw)
                dxp[:, gi * cig:(gi + 1) * cig] += self._col2im(g2 @ wg, cig, kh, kw)
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return (np.ascontiguousarray(dx), gw) + ((gb,) if self.has_bias else ())

    def cost(self, arrays, out):
        w = arrays[1]
        macs = out.size * w.shape[1] * w.shape[2] * w.shape[3]
        return macs, (out.size if len(arrays) > 2 else 0)


def conv2d(x, weights, spec: ConvSpec, bias=None) -> Tensor:
    """2-D convolution of ``x`` with ``weights`` of shape ``spec.weight_shape``."""
    x = as_tensor(x)
    weights = as_tensor(weights)
    _check_rank4(x.data)
    if x.shape[1] != spec.in_ch:
        raise DimensionError(f"input has {x.shape[1]} channels, spec expects {spec.in_ch}",
                             axis="channels")
    if tuple(weights.shape) != spec.weight_shape:
        axes = ("out_ch", "in_ch/groups", "kh", "kw")
        bad = next((a for a, u, v in zip(axes, weights.shape, spec.weight_shape) if u != v),
                   "rank")
        raise DimensionError(f"weights shape {tuple(weights.shape)} != {spec.weight_shape}",
                             axis=bad)
    kh, kw = spec.kernel
    if x.shape[2] + 2 * spec.padding < kh or x.shape[3] + 2 * spec.padding < kw:
        raise DimensionError("kernel larger than padded input", axis="height/width")
    args = [x, weights]
    if spec.bias:
        if bias is None:
            raise DimensionError("spec has bias but none was given", axis="bias")
        if tuple(as_tensor(bias).shape) != (spec.out_ch,):
            raise DimensionError(f"bias must have shape ({spec.out_ch},)", axis="bias")
        args.append(bias)
    return Conv2d.apply(*args, stride=spec.stride, padding=spec.padding, groups=spec.groups)


# --------------------------------------------------------------------------
# batch normalisation
# --------------------------------------------------------------------------
class BatchNorm2d(Function):
    """Per-channel normalisation; running stats live in caller-owned arrays."""

    name = "batchnorm2d"

    def _forward(self, x, gamma, beta):
        eps = self.eps
        if self.training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=(0, 2, 3))
            var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
            if self.running_mean is not None:
                mom = self.momentum
                unbiased = var * (m / max(m - 1, 1))
                self.running_mean *= (1 - mom)
                self.running_mean += mom * mean
                self.running_var *= (1 - mom)
                self.running_var += mom * unbiased
        else:
            mean = self.running_mean.astype(x.dtype)
            var = self.running_var.astype(x.dtype)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
        self.xhat, self.invstd, self.gamma = xhat, invstd, gamma
        return xhat * gamma[None, :, None, None] + beta[None, :, None, None]

    def _vjp(self, g):
        xhat, invstd, gamma = self.xhat, self.invstd, self.gamma
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        scale = (gamma * invstd)[None, :, None, None]
        if self.training:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            dx = scale * (g - (dbeta / m)[None, :, None, None]
                          - xhat * (dgamma / m)[None, :, None, None])
        else:
            dx = g * scale
        return dx, dgamma, dbeta

    def cost(self, arrays, out):
        return 0, 2 * out.size


def batchnorm2d(x, gamma, beta, running_mean=None, running_var=None, training=False,
                eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """BatchNorm over ``(n, h, w)``; ``training`` selects batch statistics.

    In training mode the running arrays (if given) are updated in place with
    ``running = (1 - momentum) * running + momentum * batch``.
    """
    x = as_tensor(x)
    _check_rank4(x.data)
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    c = x.shape[1]
    for nm, v in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean),
                  ("running_var", running_var)):
        if v is not None and np.shape(v.data if isinstance(v, Tensor) else v) != (c,):
            raise DimensionError(f"{nm} must have shape ({c},)", axis="channels")
    if not training and (running_mean is None or running_var is None):
        raise ValueError("inference mode needs running statistics")
    return BatchNorm2d.apply(x, gamma, beta, training=training, eps=eps, momentum=momentum,
                             running_mean=running_mean, running_var=running_var)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------
def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    name = "sigmoid"

    def _forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def _vjp(self, g):
        return (g * self.y * (1 - self.y),)

    def cost(self, arrays, out):
        return 0, out.size


class SiLU(Function):
    name = "silu"

    def _forward(self, x):
        self.x = x
        self.s = _sigmoid(x)
        return x * self.s

    def _vjp(self, g):
        s = self.s
        return (g * s * (1 + self.x * (1 - s)),)

    def cost(self, arrays, out):
        return 0, 2 * out.size


def activation(x, kind: str = "silu") -> Tensor:
    if kind == "silu":
        return SiLU.apply(x)
    if kind == "sigmoid":
        return Sigmoid.apply(x)
    raise ValueError(f"unknown activation {kind!r}")


def silu(x):
    return SiLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


# --------------------------------------------------------------------------
# pooling / resampling
# --------------------------------------------------------------------------
class MaxPool2d(Function):
    """Window max; padded cells never win (padding acts as -inf)."""

    name = "maxpool2d"

    def _forward(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        xp = _pad(x, p, value=-np.inf)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, oh, ow = win.shape[:4]
        flat = win.reshape(n, c, oh, ow, k * k)
        self.arg = flat.argmax(axis=-1)
        self.shape_in = x.shape
        self.oh, self.ow = oh, ow
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def _vjp(self, g):
        k, s, p = self.kernel, self.stride, self.padding
        n, c, h, w = self.shape_in
        oh, ow = self.oh, self.ow
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = self.arg == i * k + j
                if hit.any():
                    dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(hit, g, 0)
        return (dxp[:, :, p:p + h, p:p + w] if p else dxp,)

    def cost(self, arrays, out):
        return 0, out.size * (self.kernel * self.kernel - 1)


def maxpool2d(x, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    x = as_tensor(x)
    _check_rank4(x.data)
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("kernel >= 1, stride >= 1, padding >= 0 required")
    if padding > kernel // 2:
        raise ValueError("padding may not exceed half the window")
    h, w = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if kernel > h or kernel > w:
        raise DimensionError(f"window {kernel} larger than padded input {h}x{w}",
                             axis="height/width")
    return MaxPool2d.apply(x, kernel=kernel, stride=stride, padding=padding)


class GlobalAvgPool(Function):
    name = "global_avg_pool"

    def _forward(self, x):
        self.shape_in = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def _vjp(self, g):
        n, c, h, w = self.shape_in
        return (np.broadcast_to(g / (h * w), self.shape_in).copy(),)

    def cost(self, arrays, out):
        return 0, arrays[0].size


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    _check_rank4(x.data)
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise DimensionError("spatial extent must be at least 1x1", axis="height/width")
    return GlobalAvgPool.apply(x)


class Upsample2x(Function):
    name = "upsample_nearest2x"

    def _forward(self, x):
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def _vjp(self, g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    _check_rank4(x.data)
    return Upsample2x.apply(x)


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------
class Concat(Function):
    name = "concat"

    def _forward(self, *parts):
        self.sizes = [p.shape[self.axis] for p in parts]
        return np.concatenate(parts, axis=self.axis)

    def _vjp(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.ascontiguousarray(a) for a in np.split(g, cuts, axis=self.axis))


def concat_channels(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("nothing to concatenate")
    for p in parts:
        _check_rank4(p.data)
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts[1:], 1):
        for ax, a, b in (("batch", p.shape[0], n), ("height", p.shape[2], h),
                         ("width", p.shape[3], w)):
            if a != b:
                raise DimensionError(f"part {i} has {ax}={a}, expected {b}", axis=ax)
    if len(parts) == 1:
        return parts[0]
    return Concat.apply(*parts, axis=1)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*parts, axis=axis)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Add(Function):
    name = "add"

    def _forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return a + b

    def _vjp(self, g):
        return _unbroadcast(g, self.sa), _unbroadcast(g, self.sb)

    def cost(self, arrays, out):
        return 0, out.size


class Sub(Function):
    name = "sub"

    def _forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return a - b

    def _vjp(self, g):
        return _unbroadcast(g, self.sa), _unbroadcast(-g, self.sb)

    def cost(self, arrays, out):
        return 0, out.size


class Mul(Function):
    name = "mul"

    def _forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def _vjp(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)

    def cost(self, arrays, out):
        return 0, out.size


class Div(Function):
    name = "div"

    def _forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def _vjp(self, g):
        a, b = self.a, self.b
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def elementwise(a, b, kind: str = "add", broadcast: str = "none") -> Tensor:
    """Rank-4 add/mul; ``broadcast='channel'`` repeats an ``n x c x 1 x 1`` b."""
    a, b = as_tensor(a), as_tensor(b)
    _check_rank4(a.data, "a")
    _check_rank4(b.data, "b")
    if broadcast in ("none", None):
        if a.shape != b.shape:
            raise DimensionError(f"shapes {a.shape} and {b.shape} differ", axis="shape")
    elif broadcast in ("channel", "channel-wise"):
        if b.shape != (a.shape[0], a.shape[1], 1, 1):
            raise DimensionError(f"channel broadcast needs b of shape "
                                 f"{(a.shape[0], a.shape[1], 1, 1)}, got {b.shape}",
                                 axis="shape")
    else:
        raise ValueError(f"unknown broadcast mode {broadcast!r}")
    if kind == "add":
        return Add.apply(a, b)
    if kind == "mul":
        return Mul.apply(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# scalar math used by the losses
# --------------------------------------------------------------------------
class Exp(Function):
    name = "exp"

    def _forward(self, x):
        self.y = np.exp(x)
        return self.y

    def _vjp(self, g):
        return (g * self.y,)


class Log(Function):
    name = "log"

    def _forward(self, x):
        self.x = x
        return np.log(x)

    def _vjp(self, g):
        return (g / self.x,)


class Atan(Function):
    name = "atan"

    def _forward(self, x):
        self.x = x
        return np.arctan(x)

    def _vjp(self, g):
        return (g / (1 + self.x * self.x),)


class Power(Function):
    name = "power"

    def _forward(self, x):
        self.x = x
        return x ** self.exponent

    def _vjp(self, g):
        e = self.exponent
        return (g * e * self.x ** (e - 1),)


class Maximum(Function):
    name = "maximum"

    def _forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        self.mask = a >= b
        return np.maximum(a, b)

    def _vjp(self, g):
        return (_unbroadcast(np.where(self.mask, g, 0), self.sa),
                _unbroadcast(np.where(self.mask, 0, g), self.sb))


class Minimum(Function):
    name = "minimum"

    def _forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        self.mask = a <= b
        return np.minimum(a, b)

    def _vjp(self, g):
        return (_unbroadcast(np.where(self.mask, g, 0), self.sa),
                _unbroadcast(np.where(self.mask, 0, g), self.sb))


class Sum(Function):
    name = "sum"

    def _forward(self, x):
        self.shape_in = x.shape
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def _vjp(self, g):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = sorted(a % len(self.shape_in) for a in axes)
            for a in axes:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, self.shape_in).copy(),)


class Reshape(Function):
    name = "reshape"

    def _forward(self, x):
        self.shape_in = x.shape
        return x.reshape(self.shape)

    def _vjp(self, g):
        return (g.reshape(self.shape_in),)


class Transpose(Function):
    name = "transpose"

    def _forward(self, x):
        return x.transpose(self.axes)

    def _vjp(self, g):
        return (g.transpose(np.argsort(self.axes)),)


class Index(Function):
    name = "index"

    def _forward(self, x):
        self.shape_in = x.shape
        self.dtype = x.dtype
        return np.array(x[self.index])

    def _vjp(self, g):
        dx = np.zeros(self.shape_in, dtype=g.dtype)
        np.add.at(dx, self.index, g)
        return (dx,)


class BCEWithLogits(Function):
    """Elementwise binary cross-entropy on logits against fixed targets."""

    name = "bce_with_logits"

    def _forward(self, x, t):
        self.x, self.t = x, t
        return np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def _vjp(self, g):
        return g * (_sigmoid(self.x) - self.t), None


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def atan(x):
    return Atan.apply(x)


def power(x, exponent: float):
    return Power.apply(x, exponent=exponent)


def sqrt(x):
    return Power.apply(x, exponent=0.5)


def maximum(a, b):
    return Maximum.apply(a, b)


def minimum(a, b):
    return Minimum.apply(a, b)


def reduce_sum(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return Sum.apply(x, axis=axis, keepdims=keepdims) * (1.0 / max(count, 1))


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes):
    return Transpose.apply(x, axes=tuple(axes))


def index(x, idx):
    return Index.apply(x, index=idx)


def bce_with_logits(x, target) -> Tensor:
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    return BCEWithLogits.apply(x, t)


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


PRIMITIVES = {
    "conv2d": Conv2d, "batchnorm2d": BatchNorm2d, "silu": SiLU, "sigmoid": Sigmoid,
    "maxpool2d": MaxPool2d, "global_avg_pool": GlobalAvgPool, "concat": Concat,
    "add": Add, "mul": Mul, "upsample_nearest2x": Upsample2x,
}


def vjp(op: Function, upstream) -> tuple:
    """Gradients of a recorded primitive instance w.r.t. each of its inputs."""
    return op.vjp(upstream)
