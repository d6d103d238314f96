"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

A :class:`Tape` records every operation whose inputs include a tracked tensor.
Leaves are registered with :meth:`Tape.watch`; :func:`backward` walks the
recorded nodes in reverse insertion order and returns a gradient for every
watched leaf (zeros for leaves the loss does not depend on).

Untracked tensors flow through the same operations without touching any tape,
which is how detached features and evaluation passes are computed.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An operation was invoked outside its documented preconditions."""


BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """An n-dimensional float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Tuple[Optional[int], ...], backward_fn: Optional[BackwardFn]):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of operations; rebuilt for every forward pass."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.leaves: List[int] = []
        self._leaf_shapes: Dict[int, Tuple[int, ...]] = {}

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf and return its tracked tensor.

        The returned tensor shares storage with ``value`` when given an ndarray.
        """
        data = value.data if isinstance(value, Tensor) else value
        t = Tensor(data)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        self.leaves.append(node_id)
        self._leaf_shapes[node_id] = t.shape
        t.tape, t.node_id = self, node_id
        return t

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
        tape = None
        for x in inputs:
            if x.tape is not None:
                if tape is not None and x.tape is not tape:
                    raise ContractError("operands belong to different tapes")
                tape = x.tape
        if tape is None:
            return Tensor(out)
        ids = tuple(x.node_id if x.tape is tape else None for x in inputs)
        node_id = len(tape.nodes)
        tape.nodes.append(_Node(op, ids, backward_fn))
        result = Tensor(out)
        result.tape, result.node_id = tape, node_id
        return result


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    for x in inputs:
        if x.tape is not None:
            return x.tape.record(op, inputs, out, backward_fn)
    return Tensor(out)


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns ``{leaf node_id: gradient}``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss is not recorded on this tape")
    grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node_id in range(loss.node_id, -1, -1):
        node = tape.nodes[node_id]
        if node.backward_fn is None:
            continue
        g = grads.pop(node_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for src, gi in zip(node.inputs, in_grads):
            if src is None or gi is None:
                continue
            prev = grads.get(src)
            grads[src] = gi if prev is None else prev + gi
    return {
        leaf: grads.get(leaf, np.zeros(tape._leaf_shapes[leaf]))
        for leaf in tape.leaves
    }


# ---------------------------------------------------------------------------
# operations


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only bias-style broadcasting of trailing dims is supported
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_bias_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise DimensionError(f"{op}: only bias-add broadcasting supported, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_bias_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _record("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record("add_scalar", (a,), a.data + c, lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0; NaN propagates so divergence is not masked
    gate = x.data > 0
    return _record("relu", (x,), np.maximum(x.data, 0.0), lambda g: (g * gate,))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _record("mean", (x,), np.asarray(x.data.mean()),
                   lambda g: (np.full(shape, float(g) / n),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def flatten(x: Tensor) -> Tensor:
    """Flatten every axis after the first; a 1-D tensor becomes a flat vector as-is."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1) if x.data.ndim > 1 else x.data.reshape(-1)
    return _record("flatten", (x,), out, lambda g: (g.reshape(shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; backward splits the upstream gradient."""
    if not tensors:
        raise DimensionError("concat: no tensors given")
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise DimensionError(f"concat: trailing shapes differ, {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([t.shape[0] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=0)
    return _record("concat", tuple(tensors), out, lambda g: tuple(np.split(g, bounds, axis=0)))


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``x[index]``; gradient scatters back into the selected rows."""
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0:
        raise DimensionError("take_rows: empty row selection")
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _record("take_rows", (x,), x.data[index], _bw)


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax_rows(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _record("softmax_cross_entropy", (logits,), np.asarray(loss), _bw)


def soft_target_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over the batch of ``-sum(target * log softmax(logits))`` for row-stochastic targets."""
    targets = np.asarray(targets, dtype=np.float64)
    if logits.data.ndim != 2 or targets.shape != logits.shape:
        raise DimensionError(f"soft_target_cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    logp = log_softmax_rows(logits.data)
    loss = -(targets * logp).sum() / n

    def _bw(g):
        p = np.exp(logp)
        d = p * targets.sum(axis=1, keepdims=True) - targets
        return (d * (float(g) / n),)

    return _record("soft_target_cross_entropy", (logits,), np.asarray(loss), _bw)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[n,c,h,w]`` with ``kernel[o,c,kh,kw]``."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: bad stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    o, kc, kh, kw = kernel.shape
    if kc != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {kc} ({x.shape} vs {kernel.shape})")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {(n, c, hp, wp)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # cols[n, c, kh, kw, ho, wo]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    kd = kernel.data
    out = np.tensordot(kd, cols, axes=([1, 2, 3], [1, 2, 3]))  # o, n, ho, wo
    out = out.transpose(1, 0, 2, 3)

    def _bw(g):
        dk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # o, c, kh, kw
        dcols = np.tensordot(kd, g, axes=([0], [1]))  # c, kh, kw, n, ho, wo
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return dx, dk

    return _record("conv2d", (x, kernel), out, _bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def numerical_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(x)).item()
        flat[i] = orig - eps
        lo = f(Tensor(x)).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max per-coordinate relative error between tape and central-difference gradients."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.watch(x.copy())
    grads = backward(tape, f(xt))
    analytic = grads[xt.node_id]
    numeric = numerical_grad(f, x, eps)
    return _rel_err(analytic, numeric)
