"""Parameter-holding building blocks: ConvBlock, GhostConv, Ghost bottleneck,
CSPGhost, SPP, MS-CAM, AFF and the detection head.

Each block exposes three views of itself:

* ``forward`` executes it on a :class:`~yoga.tensor.Tensor`;
* ``param_count()`` / ``flops(shape)`` give closed-form counts derived from
  the constructor arguments only (no tensors are inspected);
* ``parameters()`` enumerates the allocated tensors.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .errors import DimensionError
from .ops import BN_EPS, BN_MOMENTUM, ConvSpec
from .tensor import Tensor

Shape = Tuple[int, int, int, int]

_META = [False]


@contextlib.contextmanager
def meta_init():
    """Build blocks without allocating convolution weights (counting only)."""
    _META.append(True)
    try:
        yield
    finally:
        _META.pop()


@dataclass(frozen=True)
class BlockInfo:
    """Stable descriptor consumed by the graph counters and ``describe``."""

    name: str
    c_in: int
    c_out: int
    params: int
    flops: int
    out_shape: Shape
    standard_params: Optional[int] = None   # same block with plain convolutions


@dataclass(frozen=True)
class GhostConvSpec:
    c1: int
    c2: int
    primary_kernel: int = 1
    cheap_kernel: int = 5
    stride: int = 1

    def __post_init__(self):
        if self.c2 % 2:
            raise DimensionError(f"GhostConv needs an even output width, got {self.c2}",
                                 axis="channels")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("channel counts must be positive")

    @property
    def intrinsic(self) -> int:
        return self.c2 // 2

    @property
    def improvement_factor(self) -> float:
        return self.c2 / self.intrinsic


@dataclass(frozen=True)
class MscamSpec:
    channels: int
    reduction: int = 4

    def __post_init__(self):
        if self.channels % self.reduction:
            raise DimensionError(f"{self.channels} channels not divisible by reduction "
                                 f"{self.reduction}", axis="channels")

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction


@dataclass(frozen=True)
class CspGhostSpec:
    c1: int
    c2: int
    n_bottlenecks: int = 1
    split_ratio: float = 0.5
    expansion: float = 0.5
    cheap_kernel: int = 5

    @property
    def hidden(self) -> int:
        return int(self.c2 * self.split_ratio)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Module:
    """Minimal container: parameters, buffers and children in insertion order."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if isinstance(val, np.ndarray):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{key}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for m in val:
                    if isinstance(m, Module):
                        yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def to(self, dtype):
        """Cast parameters and buffers in place (float64 for gradient audits)."""
        for m in self.modules():
            for key, val in list(vars(m).items()):
                if isinstance(val, Tensor):
                    val.data = val.data.astype(dtype)
                    val.grad = None
                elif isinstance(val, np.ndarray) and np.issubdtype(val.dtype, np.floating):
                    setattr(m, key, val.astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def enumerate_param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def info(self, shape: Shape) -> BlockInfo:
        flops, out = self.flops(shape)
        return BlockInfo(type(self).__name__, shape[1], out[1], self.param_count(), flops, out,
                         self.standard_param_count())

    def standard_param_count(self) -> int:
        return self.param_count()


class Conv(Module):
    """Bare convolution (optionally with bias); no normalisation."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        if _META[-1]:
            return
        self.weight = Tensor(_uniform(rng, spec.weight_shape, fan_in), requires_grad=True)
        if spec.bias:
            self.bias = Tensor(_uniform(rng, (spec.out_ch,), fan_in), requires_grad=True)

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.spec, getattr(self, "bias", None))

    def param_count(self) -> int:
        return self.spec.param_count()

    def flops(self, shape):
        n, c, h, w = shape
        oh, ow = self.spec.output_hw(h, w)
        out = (n, self.spec.out_ch, oh, ow)
        f = 2 * self.spec.macs(n, h, w)
        if self.spec.bias:
            f += n * self.spec.out_ch * oh * ow
        return f, out


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.channels = channels
        self.eps, self.momentum = eps, momentum
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training=self.training, eps=self.eps, momentum=self.momentum)

    def param_count(self) -> int:
        return 2 * self.channels

    def flops(self, shape):
        return 2 * int(np.prod(shape)), shape


class ConvBlock(Module):
    """Convolution -> BatchNorm -> SiLU (activation optional)."""

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, p: Optional[int] = None,
                 g: int = 1, act: bool = True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        p = k // 2 if p is None else p
        self.conv = Conv(ConvSpec(c1, c2, (k, k), s, p, g, bias=False), rng)
        self.bn = BatchNorm(c2)
        self.act = act

    @property
    def spec(self) -> ConvSpec:
        return self.conv.spec

    def forward(self, x):
        y = self.bn(self.conv(x))
        return ops.silu(y) if self.act else y

    def param_count(self) -> int:
        s = self.conv.spec
        return s.out_ch * (s.in_ch // s.groups) * s.kernel[0] * s.kernel[1] + 2 * s.out_ch

    def flops(self, shape):
        f, out = self.conv.flops(shape)
        f += 2 * int(np.prod(out))
        if self.act:
            f += 2 * int(np.prod(out))
        return f, out


class GhostConv(Module):
    """Half the outputs from a standard conv, half from a cheap depth-wise conv.

    ``Xa = primary(x)`` has ``c2/2`` channels, ``Xb = cheap(Xa)`` applies a
    ``d x d`` conv with ``c2/2`` groups, and the block returns
    ``concat(Xa, Xb)`` followed by BatchNorm + SiLU.  ``raw=True`` drops the
    normalisation so the output is the bare concatenation.
    """

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, d: int = 5,
                 act: bool = True, raw: bool = False, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.gspec = GhostConvSpec(c1, c2, k, d, s)
        h = c2 // 2
        self.primary = Conv(ConvSpec(c1, h, (k, k), s, k // 2, 1), rng)
        self.cheap = Conv(ConvSpec(h, h, (d, d), 1, d // 2, h), rng)
        self.raw = raw
        self.act = act
        if not raw:
            self.bn = BatchNorm(c2)

    def forward(self, x):
        xa = self.primary(x)
        xb = self.cheap(xa)
        y = ops.concat_channels([xa, xb])
        if self.raw:
            return y
        y = self.bn(y)
        return ops.silu(y) if self.act else y

    def param_count(self) -> int:
        g = self.gspec
        h = g.intrinsic
        n = g.c1 * h * g.primary_kernel ** 2 + h * g.cheap_kernel ** 2
        return n if self.raw else n + 2 * g.c2

    def standard_param_count(self) -> int:
        g = self.gspec
        n = g.c1 * g.c2 * g.primary_kernel ** 2
        return n if self.raw else n + 2 * g.c2

    def flops(self, shape):
        f1, s1 = self.primary.flops(shape)
        f2, s2 = self.cheap.flops(s1)
        out = (s1[0], self.gspec.c2, s1[2], s1[3])
        f = f1 + f2
        if not self.raw:
            f += 2 * int(np.prod(out))
            if self.act:
                f += 2 * int(np.prod(out))
        return f, out


def _even(x: float) -> int:
    return max(2, 2 * int(round(x / 2)))


class GhostBottleneck(Module):
    """GhostConv (expand) -> [DWConv s2] -> GhostConv (project) + shortcut.

    At stride 1 the shortcut is the identity; at stride 2 it is a depth-wise
    conv followed by a 1x1 Conv block.
    """

    def __init__(self, c1: int, c2: int, s: int = 1, e: float = 0.5, d: int = 5,
                 raw: bool = False, rng=None):
        if s not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {s}")
        if s == 1 and c1 != c2:
            raise DimensionError(f"identity shortcut needs c1 == c2 (got {c1} -> {c2})",
                                 axis="channels")
        rng = rng if rng is not None else np.random.default_rng(0)
        mid = _even(c2 * e)
        self.c1, self.c2, self.stride, self.mid = c1, c2, s, mid
        self.expand = GhostConv(c1, mid, 1, 1, d, act=True, raw=raw, rng=rng)
        self.dw = ConvBlock(mid, mid, 3, 2, g=mid, act=False, rng=rng) if s == 2 else None
        self.project = GhostConv(mid, c2, 1, 1, d, act=False, raw=raw, rng=rng)
        if s == 2:
            self.short_dw = ConvBlock(c1, c1, 3, 2, g=c1, act=False, rng=rng)
            self.short_pw = ConvBlock(c1, c2, 1, 1, act=False, rng=rng)

    def _main(self):
        return [m for m in (self.expand, self.dw, self.project) if m is not None]

    def _short(self):
        return [self.short_dw, self.short_pw] if self.stride == 2 else []

    def forward(self, x):
        y = x
        for m in self._main():
            y = m(y)
        sc = x
        for m in self._short():
            sc = m(sc)
        return y + sc

    def param_count(self) -> int:
        return sum(m.param_count() for m in self._main() + self._short())

    def standard_param_count(self) -> int:
        return sum(m.standard_param_count() for m in self._main() + self._short())

    def flops(self, shape):
        f, s = 0, shape
        for m in self._main():
            df, s = m.flops(s)
            f += df
        ss = shape
        for m in self._short():
            df, ss = m.flops(ss)
            f += df
        return f + int(np.prod(s)), s


class CSPGhost(Module):
    """Cross-stage partial wrapper around a stack of Ghost bottlenecks."""

    def __init__(self, c1: int, c2: int, n: int = 1, split: float = 0.5, e: float = 0.5,
                 d: int = 5, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cspec = CspGhostSpec(c1, c2, n, split, e, d)
        c_ = self.cspec.hidden
        self.cv1 = ConvBlock(c1, c_, 1, rng=rng)
        self.cv2 = ConvBlock(c1, c_, 1, rng=rng)
        self.m = [GhostBottleneck(c_, c_, 1, e, d, rng=rng) for _ in range(n)]
        self.cv3 = ConvBlock(2 * c_, c2, 1, rng=rng)

    def branches(self, x):
        """Pre-merge activations of the bottleneck and bypass branches."""
        a = self.cv1(x)
        for b in self.m:
            a = b(a)
        return a, self.cv2(x)

    def forward(self, x):
        a, b = self.branches(x)
        return self.cv3(ops.concat_channels([a, b]))

    def _children(self):
        return [self.cv1, self.cv2] + list(self.m) + [self.cv3]

    def param_count(self) -> int:
        return sum(m.param_count() for m in self._children())

    def standard_param_count(self) -> int:
        return sum(m.standard_param_count() for m in self._children())

    def flops(self, shape):
        f1, s1 = self.cv1.flops(shape)
        f2, s2 = self.cv2.flops(shape)
        f = f1 + f2
        for b in self.m:
            df, s1 = b.flops(s1)
            f += df
        f3, out = self.cv3.flops((s1[0], s1[1] + s2[1], s1[2], s1[3]))
        return f + f3, out


class SPP(Module):
    """1x1 reduce, parallel same-size max pools, concat, 1x1 Conv block."""

    def __init__(self, c1: int, c2: int, kernels: Sequence[int] = (5, 9, 13), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c_ = c1 // 2
        self.kernels = tuple(kernels)
        self.cv1 = ConvBlock(c1, c_, 1, rng=rng)
        self.cv2 = ConvBlock(c_ * (len(self.kernels) + 1), c2, 1, rng=rng)

    def pyramid(self, x):
        return ops.concat_channels([x] + [ops.maxpool2d(x, k, 1, k // 2) for k in self.kernels])

    def forward(self, x):
        return self.cv2(self.pyramid(self.cv1(x)))

    def param_count(self) -> int:
        return self.cv1.param_count() + self.cv2.param_count()

    def flops(self, shape):
        f, s = self.cv1.flops(shape)
        per = int(np.prod(s))
        f += sum(per * (k * k - 1) for k in self.kernels)
        f2, out = self.cv2.flops((s[0], s[1] * (len(self.kernels) + 1), s[2], s[3]))
        return f + f2, out


class MSCAM(Module):
    """Multi-scale channel attention: ``sigmoid(global(z) + local(z))``.

    The local context is a point-wise bottleneck (conv, BN, SiLU, conv) applied
    at every position; the global context runs a bottleneck of biased
    point-wise convs on the spatially averaged map.
    """

    def __init__(self, channels: int, r: int = 4, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mspec = MscamSpec(channels, r)
        c, h = channels, self.mspec.hidden
        self.local1 = ConvBlock(c, h, 1, rng=rng)
        self.local2 = Conv(ConvSpec(h, c, (1, 1), bias=True), rng)
        self.global1 = Conv(ConvSpec(c, h, (1, 1), bias=True), rng)
        self.global2 = Conv(ConvSpec(h, c, (1, 1), bias=True), rng)
        self.use_global = True

    def local_context(self, z):
        return self.local2(self.local1(z))

    def global_context(self, z):
        return self.global2(ops.silu(self.global1(ops.global_avg_pool(z))))

    def forward(self, z):
        c = z.shape[1]
        if c != self.mspec.channels:
            raise DimensionError(f"MS-CAM built for {self.mspec.channels} channels, got {c}",
                                 axis="channels")
        loc = self.local_context(z)
        if self.use_global:
            loc = ops.elementwise(loc, self.global_context(z), "add", "channel")
        return ops.sigmoid(loc)

    def param_count(self) -> int:
        c, h = self.mspec.channels, self.mspec.hidden
        return (c * h + 2 * h) + (h * c + c) + (c * h + h) + (h * c + c)

    def flops(self, shape):
        n, c, hh, ww = shape
        f, s = self.local1.flops(shape)
        df, s = self.local2.flops(s)
        f += df
        if self.use_global:
            f += int(np.prod(shape))                  # global average pool
            df, g = self.global1.flops((n, c, 1, 1))
            f += df + 2 * int(np.prod(g))             # + SiLU
            df, g = self.global2.flops(g)
            f += df + int(np.prod(shape))             # + broadcast add
        return f + int(np.prod(shape)), shape         # + sigmoid


class AFF(Module):
    """Attentional feature fusion ``M * x + (1 - M) * y`` with ``M = MSCAM(x + y)``."""

    def __init__(self, channels: int, r: int = 4, rng=None):
        self.mscam = MSCAM(channels, r, rng=rng)

    def forward(self, x, y):
        if x.shape != y.shape:
            raise DimensionError(f"AFF inputs differ: {x.shape} vs {y.shape}", axis="shape")
        m = self.mscam(ops.elementwise(x, y, "add"))
        return m * x + (1.0 - m) * y

    def param_count(self) -> int:
        return self.mscam.param_count()

    def flops(self, shape):
        f, _ = self.mscam.flops(shape)
        return f + 5 * int(np.prod(shape)), shape    # x+y, M*x, 1-M, (1-M)*y, sum


class Detect(Module):
    """Per-scale 3x3 depth-wise Conv block and a 1x1 conv to ``N*(C+5)`` maps."""

    def __init__(self, num_classes: int, channels: Sequence[int], anchors_per_scale: int = 3,
                 strides: Sequence[int] = (8, 16, 32), depthwise: bool = True,
                 prior_img_size: int = 640, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.nc = num_classes
        self.na = anchors_per_scale
        self.no = num_classes + 5
        self.channels = tuple(channels)
        self.strides = tuple(strides)
        self.stem = [ConvBlock(c, c, 3, g=c if depthwise else 1, rng=rng) for c in channels]
        self.pred = [Conv(ConvSpec(c, self.na * self.no, (1, 1), bias=True), rng)
                     for c in channels]
        for conv, s in zip([] if _META[-1] else self.pred, self.strides):
            b = conv.bias.data.reshape(self.na, self.no)
            b[:, 4] = math.log(8 / (prior_img_size / s) ** 2)
            if num_classes > 1:
                b[:, 5:] = math.log(0.6 / (num_classes - 0.99))

    @property
    def out_channels(self) -> int:
        return self.na * self.no

    def forward(self, feats: Sequence[Tensor]) -> List[Tensor]:
        if len(feats) != len(self.channels):
            raise DimensionError(f"expected {len(self.channels)} feature maps", axis="scales")
        outs = []
        for f, c, stem, pred in zip(feats, self.channels, self.stem, self.pred):
            if f.shape[1] != c:
                raise DimensionError(f"head expects {c} channels, got {f.shape[1]}",
                                     axis="channels")
            y = pred(stem(f))
            n, _, h, w = y.shape
            outs.append(y.reshape(n, self.na, self.no, h, w))
        return outs

    def param_count(self) -> int:
        return sum(s.param_count() + p.param_count() for s, p in zip(self.stem, self.pred))

    def flops_multi(self, shapes: Sequence[Shape]):
        total, outs = 0, []
        for shp, stem, pred in zip(shapes, self.stem, self.pred):
            f1, s = stem.flops(shp)
            f2, s = pred.flops(s)
            total += f1 + f2
            outs.append(s)
        return total, outs
