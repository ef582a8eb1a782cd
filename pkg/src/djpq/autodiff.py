"""Minimal dense-tensor reverse-mode automatic differentiation.

All values are float32 ndarrays wrapped in :class:`Tensor`. Differentiable
primitives append a node to a module-level gradient tape; :func:`backward`
replays the tape in reverse creation order (which is a topological order,
since the graph is built incrementally) and accumulates gradients into every
tensor with ``requires_grad``. Only the primitives the compression networks
need are provided: conv2d, dense, batch norm, ReLU, max pooling, global
average pooling, softmax cross-entropy, and the elementwise/reduction ops
the regularizer terms are built from.

Single-threaded and deterministic: identical inputs give bit-identical
outputs.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError


class Tensor:
    """Dense float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor data must be finite (found NaN or Inf)")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal fast path for op outputs; skips the finiteness check
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float32)
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; everything routes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __pow__(self, p):
        return pow_const(self, float(p))

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)


class TapeNode:
    """One recorded primitive: parents plus the rule to push gradients back."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


_TAPE: list[TapeNode] = []
_GRAD_ENABLED = True


class no_grad:
    """Context manager disabling tape growth (eval-mode forwards)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def tape_size() -> int:
    return len(_TAPE)


def clear_tape():
    _TAPE.clear()


def record(op: str, inputs: Sequence[Tensor], output: Tensor,
           backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Register a primitive on the tape if any input participates in grad."""
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _TAPE.append(TapeNode(op, inputs, output, backward_fn))
    return output


def accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def backward(loss: Tensor):
    """Reverse-traverse the tape, accumulating gradients from a scalar loss.

    Gradients sum across fan-out. The tape is consumed (cleared) afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not _TAPE:
        raise ContractError("backward called with an empty tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE):
        g = node.output.grad
        if g is None:
            continue
        node.backward_fn(g)
    _TAPE.clear()


def sgd_step(param: Tensor, lr: float, lr_scale: float = 1.0):
    """param <- param - lr * lr_scale * grad, then zero the gradient."""
    if param.grad is None:
        raise ContractError("sgd_step on a parameter with no gradient")
    param.data -= np.float32(lr * lr_scale) * param.grad
    param.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data + b.data)

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    return record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data - b.data)

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    return record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return record("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor._wrap(a.data / b.data)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data),
                                       b.data.shape))

    return record("div", (a, b), out, bwd)


def pow_const(a: Tensor, p: float) -> Tensor:
    out = Tensor._wrap(a.data ** np.float32(p))

    def bwd(g):
        accumulate(a, g * np.float32(p) * a.data ** np.float32(p - 1.0))

    return record("pow", (a,), out, bwd)


def log(a: Tensor) -> Tensor:
    out = Tensor._wrap(np.log(a.data))

    def bwd(g):
        accumulate(a, g / a.data)

    return record("log", (a,), out, bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor._wrap(y)

    def bwd(g):
        accumulate(a, g * y)

    return record("exp", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # stable on both tails
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(np.float32)
    out = Tensor._wrap(y)

    def bwd(g):
        accumulate(a, g * y * (1.0 - y))

    return record("sigmoid", (a,), out, bwd)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor._wrap(np.sum(a.data, axis=axis, dtype=np.float32))

    def bwd(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return record("sum", (a,), out, bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = Tensor._wrap(np.mean(a.data, dtype=np.float32))

    def bwd(g):
        accumulate(a, np.broadcast_to(g / np.float32(n), a.data.shape).copy())

    return record("mean", (a,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._wrap(a.data.reshape(shape))

    def bwd(g):
        accumulate(a, g.reshape(a.data.shape))

    return record("reshape", (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor._wrap(np.where(mask, a.data, np.float32(0.0)))

    def bwd(g):
        accumulate(a, g * mask)

    return record("relu", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform")
    out = Tensor._wrap(a.data @ b.data)

    def bwd(g):
        if a.requires_grad:
            accumulate(a, g @ b.data.T)
        if b.requires_grad:
            accumulate(b, a.data.T @ g)

    return record("matmul", (a, b), out, bwd)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,F] @ weight[F,G] + bias[G]."""
    if x.data.ndim != 2:
        raise DimensionError(f"dense: input must be 2-D, got {x.data.shape}")
    if weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise DimensionError(
            f"dense: input {x.data.shape} incompatible with weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[1],):
        raise DimensionError(
            f"dense: bias {bias.data.shape} incompatible with weight {weight.data.shape}")
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} (pad {pad}) larger than input {x.shape}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, kh, kw),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False)
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, xshape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of x[N,Cin,H,W] with weight[Cout,Cin,kh,kw] + bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(
            f"conv2d: need 4-D input/weight, got {x.data.shape} and {weight.data.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise DimensionError(
            f"conv2d: input {x.data.shape} incompatible with weight {weight.data.shape}")
    if bias.data.shape != (weight.data.shape[0],):
        raise DimensionError(
            f"conv2d: bias {bias.data.shape} incompatible with weight {weight.data.shape}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: invalid stride={stride} padding={padding}")

    n = x.data.shape[0]
    cout, cin, kh, kw = weight.data.shape
    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    y = cols @ wmat.T + bias.data
    out = Tensor._wrap(np.ascontiguousarray(
        y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)))

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if weight.requires_grad:
            accumulate(weight, (gmat.T @ cols).reshape(weight.data.shape))
        if bias.requires_grad:
            accumulate(bias, gmat.sum(axis=0))
        if x.requires_grad:
            dcols = gmat @ wmat
            accumulate(x, _col2im(dcols, x.data.shape, kh, kw, stride, padding, ho, wo))

    return record("conv2d", (x, weight, bias), out, bwd)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2d(x: Tensor, window, stride=None, padding: int = 0) -> Tensor:
    """Windowed max with argmax routing in backward.

    Trailing rows/columns that do not fill a window are truncated. Ties break
    to the first (lowest-index) element inside the window.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: need 4-D input, got {x.data.shape}")
    wh, ww = (window, window) if isinstance(window, int) else window
    if stride is None:
        stride = wh
    n, c, h, w = x.data.shape
    xp = x.data
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - wh) // stride + 1
    wo = (wp - ww) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d: window {wh}x{ww} larger than input {x.data.shape}")
    view = np.lib.stride_tricks.sliding_window_view(xp, (wh, ww), axis=(2, 3))
    view = view[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = view.reshape(n, c, ho, wo, wh * ww)
    idx = flat.argmax(axis=-1)
    out = Tensor._wrap(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        dxp = np.zeros((n, c, hp, wp), dtype=np.float32)
        rows = (np.arange(ho) * stride)[None, None, :, None] + idx // ww
        colsi = (np.arange(wo) * stride)[None, None, None, :] + idx % ww
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dxp, (ni, ci, rows, colsi), g)
        if padding:
            dxp = dxp[:, :, padding:padding + h, padding:padding + w]
        accumulate(x, dxp)

    return record("maxpool2d", (x,), out, bwd)


def global_avgpool2d(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avgpool2d: need 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out = Tensor._wrap(x.data.mean(axis=(2, 3), dtype=np.float32))

    def bwd(g):
        accumulate(x, np.broadcast_to(
            (g / np.float32(h * w))[:, :, None, None], x.data.shape).copy())

    return record("gap", (x,), out, bwd)


def flatten(x: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(rest)], channel-major for NCHW inputs."""
    n = x.data.shape[0]
    return reshape(x, (n, int(x.data.size // n)))


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                mode: str, momentum: float = 0.1, epsilon: float = 1e-5) -> Tensor:
    """Per-channel normalization over [N,C,H,W].

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place; eval mode normalizes by the running stats.
    """
    if epsilon <= 0:
        raise ConfigError(f"batchnorm2d: epsilon must be positive, got {epsilon}")
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d: need 4-D input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"batchnorm2d: parameters {gamma.data.shape}/{beta.data.shape} "
            f"incompatible with input {x.data.shape}")
    if mode not in ("train", "eval"):
        raise ContractError(f"batchnorm2d: unknown mode {mode!r}")

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ContractError("batchnorm2d: train mode needs N*H*W >= 2")
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float32)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float32)
        running_mean *= np.float32(1.0 - momentum)
        running_mean += np.float32(momentum) * mean
        running_var *= np.float32(1.0 - momentum)
        running_var += np.float32(momentum) * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + np.float32(epsilon))
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = Tensor._wrap(xhat * gamma.data[None, :, None, None]
                       + beta.data[None, :, None, None])

    def bwd(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxh = g * gamma.data[None, :, None, None]
            if mode == "eval":
                accumulate(x, gxh * inv_std[None, :, None, None])
            else:
                m = np.float32(n * h * w)
                s1 = gxh.sum(axis=(0, 2, 3))
                s2 = (gxh * xhat).sum(axis=(0, 2, 3))
                dx = (gxh - (s1[None, :, None, None]
                             + xhat * s2[None, :, None, None]) / m) \
                    * inv_std[None, :, None, None]
                accumulate(x, dx)

    return record("batchnorm2d", (x, gamma, beta), out, bwd)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise DimensionError(
            f"softmax_cross_entropy: logits must be 2-D, got {logits.data.shape}")
    n, k = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(
            f"softmax_cross_entropy: label outside [0, {k}) in {labels!r}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    nll = -(shifted[np.arange(n), labels]
            - np.log(expv.sum(axis=1)))
    out = Tensor._wrap(np.float32(nll.mean()))

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        accumulate(logits, g * d / np.float32(n))

    return record("softmax_ce", (logits,), out, bwd)
