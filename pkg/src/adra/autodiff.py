"""Reverse-mode automatic differentiation over dense float tensors.

A `Tape` records every differentiable op executed inside its context in
execution order (which is already topological), so `Tape.backward` is a
single reverse sweep. Tensors are float32 by default; float64 is accepted
everywhere so the finite-difference oracle in `gradcheck` can run at a
precision where its tolerances are meaningful.

Ops executed with no active tape still compute forward values; they are
simply not differentiable, which is the cheap path for scoring/evaluation.
"""

from __future__ import annotations

from contextvars import ContextVar
from typing import Callable, Optional, Sequence

import numpy as np

from adra import kernels
from adra.errors import ConfigurationError, ContractError, DimensionError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# Clamp applied to the radial value inside log(1 - exp(-h)); keeps the
# corpus loss term finite at h = 0.
LOG1MEXP_CLAMP = 1e-9


class Tensor:
    """Dense n-dimensional float array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor. `trainable=False` parameters still accumulate
    gradients; optimizers must never mutate them."""

    __slots__ = ("stable_id", "trainable")

    def __init__(self, data, stable_id: str, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.stable_id = stable_id
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.stable_id!r}, shape={self.shape}, {kind})"


class Node:
    """One recorded op: inputs, output, backward rule and a forward replay fn."""

    __slots__ = ("op", "inputs", "out", "backward", "forward", "saved")

    def __init__(self, op, inputs, out, backward, forward, saved=None):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.forward = forward
        self.saved = saved


_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("adra_active_tape", default=None)


class Tape:
    """Ordered record of differentiable ops; inputs of a node always precede it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into the .grad of every reachable leaf."""
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.out), None)
            if gout is None:
                continue
            gins = node.backward(gout)
            for tensor, g in zip(node.inputs, gins):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.node is None:  # leaf (parameter or input)
                    if tensor.grad is None:
                        tensor.grad = np.zeros_like(tensor.data)
                    tensor.grad += g
                else:
                    acc = grads.get(id(tensor))
                    grads[id(tensor)] = g if acc is None else acc + g

    def replay(self, verify: bool = True) -> bool:
        """Re-run every recorded forward in order; with verify, check outputs
        are bit-identical to the originally recorded values."""
        for node in self.nodes:
            fresh = node.forward(*(t.data for t in node.inputs))
            if verify and not np.array_equal(fresh, node.out.data):
                return False
            node.out.data = fresh
        return True


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
            backward: Callable, forward: Callable, saved=None) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _ACTIVE_TAPE.get()
    if tape is not None and out.requires_grad:
        node = Node(op, tuple(inputs), out, backward, forward, saved)
        out.node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(dy):
        return _unbroadcast(dy, a.shape), _unbroadcast(dy, b.shape)

    return _record("add", out, (a, b), backward, lambda x, y: x + y)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(dy):
        return _unbroadcast(dy, a.shape), _unbroadcast(-dy, b.shape)

    return _record("sub", out, (a, b), backward, lambda x, y: x - y)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(dy):
        ga = _unbroadcast(dy * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(dy * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", out, (a, b), backward, lambda x, y: x * y)


def smul(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(dy):
        return (dy * c,)

    return _record("smul", out, (a,), backward, lambda x: x * c)


def sadd(a: Tensor, c: float) -> Tensor:
    out = a.data + c

    def backward(dy):
        return (dy,)

    return _record("sadd", out, (a,), backward, lambda x: x + c)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(dy):
        return (dy / (2.0 * out),)

    return _record("sqrt", out, (a,), backward, np.sqrt)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(dy):
        return (dy * out,)

    return _record("exp", out, (a,), backward, np.exp)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(dy):
        return (dy / a.data,)

    return _record("log", out, (a,), backward, np.log)


def log1mexp(a: Tensor) -> Tensor:
    """log(1 - exp(-a)) for a >= 0, computed as log(-expm1(-a)).

    Inputs are clamped to LOG1MEXP_CLAMP so the value stays finite at a = 0;
    the gradient is zero on the clamped region.
    """

    def fwd(x):
        xc = np.maximum(x, x.dtype.type(LOG1MEXP_CLAMP))
        return np.log(-np.expm1(-xc))

    out = fwd(a.data)

    def backward(dy):
        xc = np.maximum(a.data, a.data.dtype.type(LOG1MEXP_CLAMP))
        g = dy / np.expm1(xc)
        return (np.where(a.data >= LOG1MEXP_CLAMP, g, 0.0).astype(a.data.dtype),)

    return _record("log1mexp", out, (a,), backward, fwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(dy):
        return (dy * (a.data > 0.0),)

    return _record("relu", out, (a,), backward, lambda x: np.maximum(x, 0.0))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last dimension."""

    def fwd(x):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    out = fwd(a.data)

    def backward(dy):
        dot = (dy * out).sum(axis=-1, keepdims=True)
        return (out * (dy - dot),)

    return _record("softmax", out, (a,), backward, fwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(dy):
        if axis is None:
            return (np.broadcast_to(dy, a.shape).astype(a.data.dtype).copy(),)
        g = dy if keepdims else np.expand_dims(dy, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype).copy(),)

    return _record("sum", out, (a,), backward,
                   lambda x: x.sum(axis=axis, keepdims=keepdims))


def mean(a: Tensor) -> Tensor:
    """Mean over all entries (the batch mean when given a vector)."""
    out = a.data.mean()
    scale = 1.0 / a.data.size

    def backward(dy):
        return (np.full(a.shape, dy * scale, dtype=a.data.dtype),)

    return _record("mean", out, (a,), backward, lambda x: x.mean())


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale sample i of a batched tensor by w[i]."""
    if w.data.ndim != 1 or w.shape[0] != x.shape[0]:
        raise DimensionError(f"scale_rows: weights {w.shape} vs batch {x.shape}")
    wr = w.data.reshape((-1,) + (1,) * (x.data.ndim - 1))

    def backward(dy):
        gx = dy * wr if x.requires_grad else None
        gw = (dy * x.data).reshape(x.shape[0], -1).sum(axis=1) if w.requires_grad else None
        return gx, gw

    return _record("scale_rows", x.data * wr, (x, w), backward,
                   lambda xd, wd: xd * wd.reshape((-1,) + (1,) * (xd.ndim - 1)))


def take_column(a: Tensor, j: int) -> Tensor:
    """Column j of a 2-d tensor, as a vector."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_column expects a matrix, got shape {a.shape}")
    out = a.data[:, j].copy()

    def backward(dy):
        g = np.zeros_like(a.data)
        g[:, j] = dy
        return (g,)

    return _record("take_column", out, (a,), backward, lambda x: x[:, j].copy())


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y[i, j] = sum_k weight[j, k] * x[i, k] + bias[j]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias.data.ndim != 1 or bias.shape[0] != weight.shape[0]:
        raise DimensionError(
            f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(dy):
        gx = dy @ weight.data if x.requires_grad else None
        gw = dy.T @ x.data if weight.requires_grad else None
        gb = dy.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record("linear", out, (x, weight, bias), backward,
                   lambda xd, wd, bd: xd @ wd.T + bd)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an OIHW kernel (no bias)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d: input {x.shape} and kernel {kernel.shape} must be 4-d")
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != c:
        raise DimensionError(f"conv2d: input channels {x.shape} vs kernel {kernel.shape}")
    if kh not in (1, 3) or kw not in (1, 3):
        raise ConfigurationError(f"conv2d: kernel size {kh}x{kw} not in {{1, 3}}")
    for name, dim in (("height", h), ("width", w)):
        span = dim + 2 * pad - (kh if name == "height" else kw)
        if span < 0 or span % stride != 0:
            raise ConfigurationError(
                f"conv2d: {name} {dim} with pad {pad}, kernel {kh}x{kw}, stride "
                f"{stride} gives a non-integer output size")
    y, cols = kernels.conv2d_forward(x.data, kernel.data, stride, pad)

    def backward(dy):
        return kernels.conv2d_backward(
            dy, x.data, kernel.data, stride, pad, cols,
            need_dx=x.requires_grad, need_dw=kernel.requires_grad)

    return _record("conv2d", y, (x, kernel), backward,
                   lambda xd, kd: kernels.conv2d_forward(xd, kd, stride, pad)[0],
                   saved=cols)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on an NCHW batch."""
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool2 expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"avg_pool2 needs even spatial dims, got {h}x{w}")

    def fwd(xd):
        return xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    out = fwd(x.data)

    def backward(dy):
        g = np.broadcast_to((dy * 0.25)[:, :, :, None, :, None],
                            (n, c, h // 2, 2, w // 2, 2))
        return (g.reshape(n, c, h, w).astype(x.data.dtype).copy(),)

    return _record("avg_pool2", out, (x,), backward, fwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims of an NCHW batch -> (n, c)."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got shape {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = 1.0 / (h * w)

    def backward(dy):
        g = np.empty_like(x.data)
        g[...] = dy[:, :, None, None] * scale
        return (g,)

    return _record("gap", out, (x,), backward, lambda xd: xd.mean(axis=(2, 3)))


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = x * scale[c] + shift[c] on an NCHW batch."""
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(
            f"channel_affine: scale {scale.shape} / shift {shift.shape} vs input {x.shape}")
    sr = scale.data[None, :, None, None]
    out = x.data * sr + shift.data[None, :, None, None]

    def backward(dy):
        gx = dy * sr if x.requires_grad else None
        gs = (dy * x.data).sum(axis=(0, 2, 3)) if scale.requires_grad else None
        gb = dy.sum(axis=(0, 2, 3)) if shift.requires_grad else None
        return gx, gs, gb

    return _record("affine", out, (x, scale, shift), backward,
                   lambda xd, sd, bd: xd * sd[None, :, None, None] + bd[None, :, None, None])


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy against integer class labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")

    def fwd(z):
        shifted = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + z.max(axis=1)
        return (lse - z[np.arange(z.shape[0]), labels]).mean()

    out = fwd(logits.data)

    def backward(dy):
        z = logits.data
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(z.shape[0]), labels] -= 1.0
        return (p * (dy / z.shape[0]),)

    return _record("cross_entropy", out, (logits,), backward, fwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradcheckError(AssertionError):
    pass


def gradcheck(fn: Callable[[], Tensor], wrt: Sequence[Tensor],
              eps: float = 1e-3, rtol: float = 1e-3, atol: float = 1e-5) -> float:
    """Central finite-difference check of d(fn())/d(leaf) for every leaf in
    `wrt`, which must be leaves the function reads in place.

    Leaves are upcast to float64 first so the stated tolerances measure the
    backward rules rather than float32 round-off (mixed float32 constants
    promote automatically). Returns the worst relative error seen; raises
    GradcheckError when any entry violates
    |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|).
    """
    for t in wrt:
        if t.node is not None:
            raise ContractError("gradcheck leaves must not be op outputs")
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        loss = fn()
        if loss.data.size != 1:
            raise ContractError("gradcheck requires a scalar-valued function")
        tape.backward(loss)
    analytic = [t.grad.copy() for t in wrt]

    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            ana = float(ga.reshape(-1)[i])
            diff = abs(ana - num)
            denom = max(abs(ana), abs(num))
            worst = max(worst, diff / denom if denom > 0 else 0.0)
            if diff > atol + rtol * denom:
                raise GradcheckError(
                    f"gradient mismatch at entry {i} of leaf shape {t.shape}: "
                    f"analytic {ana:.8g} vs numeric {num:.8g}")
    return worst
