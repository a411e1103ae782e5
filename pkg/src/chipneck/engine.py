"""Dense NCHW tensor ops with reverse-mode gradients.

Every op takes :class:`Tensor` arguments, computes its output with numpy and,
when gradient recording is on and some argument requires a gradient, stores a
closure that pushes the upstream gradient back to its arguments.  All
reductions run in a fixed order so results are bitwise reproducible.
"""
from __future__ import annotations

import contextlib
import enum
import hashlib
import threading
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from chipneck.errors import ConfigError, ShapeError, TrainingError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Precision(str, enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)

    @property
    def word_size(self) -> int:
        return self.dtype.itemsize


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if self.data.ndim and min(self.data.shape) < 1:
            raise ShapeError(f"all dims must be >= 1, got {self.data.shape}")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    """Trainable leaf tensor with a name and a preallocated gradient."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _require_4d(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be NCHW (4-D), got shape {x.shape}")


# ---------------------------------------------------------------- forward ops


def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``out[n, j] = sum_i w[i, j] * x[n, i] + b[j]`` on ``(n, f_in, 1, 1)`` input.

    ``w`` has shape ``(f_in, f_out)``.
    """
    _require_4d(x, "linear input")
    n, f_in, h, wd = x.shape
    if (h, wd) != (1, 1):
        raise ShapeError(f"linear input must have 1x1 spatial dims, got {x.shape}")
    if w.data.ndim != 2 or w.shape[0] != f_in:
        raise ShapeError(f"linear weight {w.shape} does not accept {f_in} input features")
    f_out = w.shape[1]
    if b.shape != (f_out,):
        raise ShapeError(f"linear bias {b.shape} does not match {f_out} output features")

    xm = x.data.reshape(n, f_in)
    out = (xm @ w.data + b.data).reshape(n, f_out, 1, 1)

    def backward(g):
        gm = g.reshape(n, f_out)
        _accumulate(x, (gm @ w.data.T).reshape(x.shape))
        _accumulate(w, xm.T @ gm)
        _accumulate(b, gm.sum(axis=0))

    return _result(out, (x, w, b), backward)


def relu_forward(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, np.zeros((), dtype=x.dtype))

    def backward(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), backward)


def conv_output_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def check_conv_config(k: int, stride: int, pad: int):
    if k not in (1, 3):
        raise ConfigError(f"kernel size must be 1 or 3, got {k}")
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise ConfigError(f"pad must be non-negative, got {pad}")


def conv2d_forward(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, im2col + one matmul."""
    _require_4d(x, "conv input")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv weight must be (c_out, c_in, k, k), got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    check_conv_config(k, stride, pad)
    n, c, h, w = x.shape
    if c != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {c} (input {x.shape})")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv bias {bias.shape} does not match {c_out} output channels")
    ho, wo = conv_output_hw(h, w, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"k={k}, stride={stride}, pad={pad} gives empty output on {h}x{w} input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wm = weight.data.reshape(c_out, c * k * k)
    out = (cols @ wm.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        _accumulate(weight, (gm.T @ cols).reshape(weight.shape))
        _accumulate(bias, gm.sum(axis=0))
        if not x.requires_grad:
            return
        dcols = (gm @ wm).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(xp.shape, dtype=xp.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                    dcols[..., i, j].transpose(0, 3, 1, 2)
                )
        _accumulate(x, dxp[:, :, pad:pad + h, pad:pad + w])

    return _result(out, (x, weight, bias), backward)


class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    def __init__(self, c: int, dtype=np.float32):
        self.mean = np.zeros(c, dtype=dtype)
        self.var = np.ones(c, dtype=dtype)

    def copy(self) -> "RunningStats":
        new = RunningStats.__new__(RunningStats)
        new.mean = self.mean.copy()
        new.var = self.var.copy()
        return new


def batchnorm_forward(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    _require_4d(x, "batchnorm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm over {c} channels got gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    dt = x.dtype.type
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        unbiased = var * dt(m / (m - 1)) if m > 1 else var
        running.mean = (dt(1 - momentum) * running.mean + dt(momentum) * mu).astype(x.dtype)
        running.var = (dt(1 - momentum) * running.var + dt(momentum) * unbiased).astype(x.dtype)
    else:
        xc = x.data - running.mean.astype(x.dtype)[None, :, None, None]
        var = running.var.astype(x.dtype)
    inv = (dt(1) / np.sqrt(var + dt(eps)))[None, :, None, None]
    xhat = xc * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if train:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            _accumulate(x, (inv / dt(m)) * (dt(m) * dxhat - s1 - xhat * s2))
        else:
            _accumulate(x, dxhat * inv)

    return _result(out, (x, gamma, beta), backward)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual add needs identical shapes, got {a.shape} and {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d(x, "pool input")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        _accumulate(x, np.broadcast_to(g / x.dtype.type(hw), x.shape).copy())

    return _result(out, (x,), backward)


def pool_and_classify(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return linear_forward(global_avg_pool(x), w, b)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch, log-sum-exp stabilised."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape[0], logits.shape[1]
    if logits.data.size != n * k:
        raise ShapeError(f"logits must be (n, classes, 1, 1), got {logits.shape}")
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError(f"labels must lie in [0, {k})")
    z = logits.data.reshape(n, k)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, labels]).mean()

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1
        _accumulate(logits, (p * (g / n)).reshape(logits.shape).astype(logits.dtype))

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Fill ``.grad`` of every parameter that ``loss`` depends on.

    Gradients accumulate into ``Parameter.grad``; call ``zero_grad`` between
    steps.  The recorded graph is released afterwards, so a second call on
    the same loss is a usage error.
    """
    if loss._backward is None:
        raise UsageError("backward() needs a loss produced by a recorded forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise TrainingError(f"loss is not finite: {float(loss.data)}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    for t in order:
        if t._backward is not None:
            t._backward = None
            t._parents = ()
            t.grad = None


# ------------------------------------------------------------ init and update


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one parameter, keyed by (seed, name)."""
    key = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def init_uniform(shape, fan_in: int, seed: int, name: str, dtype=np.float32) -> Parameter:
    bound = np.sqrt(6.0 / fan_in)
    value = param_rng(seed, name).uniform(-bound, bound, size=shape).astype(dtype)
    return Parameter(value, name)


def zeros_param(shape, name: str, dtype=np.float32) -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), name)


def ones_param(shape, name: str, dtype=np.float32) -> Parameter:
    return Parameter(np.ones(shape, dtype=dtype), name)


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float, velocity: dict[str, np.ndarray]):
    """``v <- momentum * v + grad``; ``value <- value - lr * v`` for each param."""
    params = list(params)
    for p in params:
        if not np.isfinite(p.grad).all():
            raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        v = velocity.get(p.name)
        dt = p.dtype.type
        v = p.grad.copy() if v is None else dt(momentum) * v + p.grad
        velocity[p.name] = v
        p.data -= dt(lr) * v


class SGD:
    def __init__(self, params: Iterable[Parameter], lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ConfigError(f"lr must be non-negative, got {lr}")
        if not 0 <= momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.velocity)
