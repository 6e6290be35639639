"""Dense tensor engine with reverse-mode automatic differentiation.

Everything else in the package (model building, distillation, image
synthesis) runs on top of the handful of differentiable operations defined
here. Arrays are numpy-backed; float32 is the training default, float64 is
used by the gradient-check oracles.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible, naming the offending dim."""


class TapeError(RuntimeError):
    """Raised on tape misuse (double backward, loss not recorded, ...)."""


class DivergenceError(RuntimeError):
    """Raised when a training loop produces a non-finite loss."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops, consumed by one backward pass.

    Use as a context manager; ops executed inside record themselves in
    execution order, which is by construction a topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


class _Node:
    __slots__ = ("output", "parents", "backward_fn")

    def __init__(self, output, parents, backward_fn):
        self.output = output
        self.parents = parents
        self.backward_fn = backward_fn


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense N-d array, optionally participating in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __getitem__(self, idx):
        return getitem(self, idx)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _record(output: Tensor, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        output.requires_grad = True
        output._tape = tape
        tape.nodes.append(_Node(output, parents, backward_fn))
    return output


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.astype(t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    out = Tensor(a.data ** exponent)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * exponent * a.data ** (exponent - 1))

    return _record(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * out.data)

    return _record(out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g / a.data)

    return _record(out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data))

    def bwd(g):
        if a.requires_grad:
            # subgradient 0 at exactly zero, so norms of identical vectors
            # stay differentiable-in-practice
            y = out.data
            _accumulate(a, np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0))

    return _record(out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n, a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _record(out, (a,), bwd)


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])

    def bwd(g):
        if a.requires_grad:
            full = np.zeros(a.shape, dtype=a.dtype)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return _record(out, (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + s)
                _accumulate(t, g[tuple(sl)])
            offset += s

    return _record(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# neural-net layers


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: (N,F) @ (F,G) + (G,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-d input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense inner dim mismatch: input has F={x.shape[1]}, weight has F={weight.shape[0]}"
        )
    y = x.data @ weight.data
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
        y = y + bias.data
    out = Tensor(y)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bwd)


def _im2col(x: np.ndarray, R: int, S: int, stride: int, pad: int):
    N, C, H, W = x.shape
    Ho = (H + 2 * pad - R) // stride + 1
    Wo = (W + 2 * pad - S) // stride + 1
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((N, C, R, S, Ho, Wo), dtype=x.dtype)
    for r in range(R):
        for s in range(S):
            cols[:, :, r, s, :, :] = x[:, :, r : r + Ho * stride : stride, s : s + Wo * stride : stride]
    return cols, Ho, Wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input against KCRS kernel, zero padding."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be NCHW, got ndim={x.data.ndim}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be KCRS, got ndim={weight.data.ndim}")
    N, C, H, W = x.shape
    K, Cw, R, S = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input C={C}, weight C={Cw}")
    if H + 2 * pad < R or W + 2 * pad < S:
        raise ShapeError(
            f"conv2d kernel {R}x{S} larger than padded input {H + 2 * pad}x{W + 2 * pad}"
        )
    cols, Ho, Wo = _im2col(x.data, R, S, stride, pad)
    P = Ho * Wo
    flat = cols.reshape(N, C * R * S, P).transpose(1, 0, 2).reshape(C * R * S, N * P)
    if x.dtype == np.float64:
        # oracle precision: one contiguous dot per output element, bitwise
        # reproducible against a patch-slicing reference loop
        wflat = np.ascontiguousarray(weight.data.reshape(K, -1), dtype=np.float64)
        y = np.empty((N, K, Ho, Wo))
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    col = np.ascontiguousarray(cols[n, :, :, :, i, j]).ravel()
                    for k in range(K):
                        y[n, k, i, j] = np.dot(wflat[k], col)
    else:
        # fast path: single BLAS matmul over the (C*R*S, N*P) patch matrix
        y = (weight.data.reshape(K, -1) @ flat).reshape(K, N, P).transpose(1, 0, 2)
        y = np.ascontiguousarray(y).reshape(N, K, Ho, Wo)
    if bias is not None:
        if bias.shape != (K,):
            raise ShapeError(f"conv2d bias shape {bias.shape} != ({K},)")
        y = y + bias.data.reshape(1, K, 1, 1)
    out = Tensor(y)

    def bwd(g):
        gflat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(K, N * Ho * Wo)
        if weight.requires_grad:
            gw = gflat @ flat.T
            _accumulate(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = weight.data.reshape(K, -1).T @ gflat
            gcols = np.ascontiguousarray(
                gcols.reshape(C, R, S, N, Ho, Wo).transpose(3, 0, 1, 2, 4, 5)
            )
            Hp, Wp = H + 2 * pad, W + 2 * pad
            gx = np.zeros((N, C, Hp, Wp), dtype=x.dtype)
            for r in range(R):
                for s in range(S):
                    gx[:, :, r : r + Ho * stride : stride, s : s + Wo * stride : stride] += gcols[:, :, r, s]
            if pad > 0:
                gx = gx[:, :, pad : pad + H, pad : pad + W]
            _accumulate(x, gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial plane of each channel: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got ndim={x.data.ndim}")
    N, C, H, W = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy())

    return _record(out, (x,), bwd)


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    out = Tensor(z - lse)

    def bwd(g):
        if logits.requires_grad:
            softmax = np.exp(out.data)
            _accumulate(logits, g - softmax * g.sum(axis=1, keepdims=True))

    return _record(out, (logits,), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax at the integer label."""
    labels = np.asarray(labels, dtype=np.int64)
    N, L = logits.shape
    if labels.shape != (N,):
        raise ShapeError(f"labels shape {labels.shape} != ({N},)")
    if labels.min() < 0 or labels.max() >= L:
        raise ValueError(f"label out of range [0,{L}): {labels.min()}..{labels.max()}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    out = Tensor((lse - z[np.arange(N), labels]).mean())

    def bwd(g):
        if logits.requires_grad:
            softmax = np.exp(z - zmax)
            softmax /= softmax.sum(axis=1, keepdims=True)
            softmax[np.arange(N), labels] -= 1.0
            _accumulate(logits, (float(g) / N) * softmax)

    return _record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# backward and optimizer


def backward(tape: Tape, loss: Tensor):
    """Populate grads of every requires_grad tensor reachable from loss.

    The tape may be consumed exactly once; a second call raises TapeError.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if loss.data.ndim != 0 and loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise TapeError("loss was not produced under this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.output.grad is not None:
            node.backward_fn(node.output.grad)


class SGD:
    """Momentum SGD with weight decay; clears grads after each step."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise TapeError("sgd step with missing gradient")
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data = p.data - self.lr * v
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def he_normal(shape, fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Tensor:
    """He-normal initialization: std = sqrt(2/fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)
