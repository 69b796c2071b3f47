"""Central finite-difference checks for reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / den)) if a.size else 0.0


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5,
                   indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def directional_derivative(f: Callable[[], float], x: np.ndarray, direction: np.ndarray,
                           step: float = 1e-5) -> float:
    old = x.copy()
    x += step * direction
    fp = f()
    x[...] = old - step * direction
    fm = f()
    x[...] = old
    return (fp - fm) / (2 * step)


def check_gradients(forward: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
                    seed: int = 0, step: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``forward`` maps tensors to an output tensor; it is reduced to a scalar
    by a fixed random projection so every output element participates.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = None

    def scalar():
        nonlocal probe
        out = forward([Tensor(a) for a in arrays]).data
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return float((out * probe).sum())

    scalar()
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = forward(tensors)
    out.backward(probe.astype(out.dtype))
    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numerical_grad(scalar, a, step)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, relative_error(ana, num))
    return worst


def scaled_error(a, b, floor: float = 1e-12) -> float:
    """Largest absolute discrepancy relative to the largest gradient magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    den = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / den)


def check_module(module, inputs: Sequence[np.ndarray], call=None, seed: int = 0,
                 step: float = 1e-6) -> float:
    """Compare tape gradients of a module's inputs and parameters with central differences.

    The module is cast to float64 in place.  The output (or list of outputs)
    is reduced by a fixed random projection.  Returns the worst per-tensor
    :func:`scaled_error`, normalised by the largest gradient entry of the block.
    """
    module.to(np.float64)
    call = call or (lambda m, xs: m(*xs))
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probes: list = []
    snapshot = [b.copy() for _, b in module.named_buffers()]

    def restore():
        for (_, b), s in zip(module.named_buffers(), snapshot):
            b[...] = s

    def outputs(xs):
        out = call(module, xs)
        return out if isinstance(out, (list, tuple)) else [out]

    def scalar():
        outs = outputs([Tensor(a) for a in arrays])
        restore()
        if not probes:
            probes.extend(rng.standard_normal(o.shape) for o in outs)
        return float(sum((o.data * p).sum() for o, p in zip(outs, probes)))

    scalar()
    module.zero_grad()
    xs = [Tensor(a, requires_grad=True) for a in arrays]
    outs = outputs(xs)
    restore()
    total = outs[0] * probes[0]
    loss = total.sum()
    for o, p in zip(outs[1:], probes[1:]):
        loss = loss + (o * p).sum()
    loss.backward()
    pairs = []
    for t, a in zip(xs, arrays):
        pairs.append((t.grad if t.grad is not None else np.zeros_like(a),
                      numerical_grad(scalar, a, step)))
    for p in module.parameters():
        pairs.append((p.grad if p.grad is not None else np.zeros_like(p.data),
                      numerical_grad(scalar, p.data, step)))
    # tensors whose true gradient vanishes (e.g. a shift removed by a later
    # batch norm) are judged against the block-wide gradient scale
    scale = max(max(np.abs(a).max(), np.abs(b).max()) for a, b in pairs)
    return max(scaled_error(a, b, floor=scale) for a, b in pairs)
