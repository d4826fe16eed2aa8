"""Minimal dense-tensor engine with reverse-mode differentiation.

Covers exactly the operator set the grading network needs: conv2d, dense,
maxpool, relu, softmax, cross-entropy, plus elementwise add/mul and sum as
glue. Values are stored single-precision; feeding float64 arrays switches
the whole computation to double precision (used by the gradient-check
replay). Gradients accumulate additively across fan-out and across
backward() calls -- callers zero them explicitly.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible, naming the offending axes."""


class Tensor:
    """N-dimensional array participating in a differentiable computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def from_op(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    """Register an operation result as a graph node.

    ``grad_fn(grad_out)`` must return one gradient array (or None) per parent,
    each shaped like the parent's data.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out._op = op
    return out


class Graph:
    """Topologically ordered operation records reachable from a root tensor.

    Parents always precede consumers, so one reversed traversal visits each
    node exactly once during backpropagation.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``root``.

    ``root`` must be scalar. Gradients add into any existing ``grad`` buffers;
    zero them first for fresh derivatives.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    graph = Graph(root)
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        parent_grads = node._grad_fn(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(x: Tensor, y: Tensor) -> Tensor:
    out = x.data + y.data

    def grad_fn(g):
        return _unbroadcast(g, x.data.shape), _unbroadcast(g, y.data.shape)

    return from_op(out, (x, y), grad_fn, "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product (with numpy broadcasting)."""
    out = x.data * y.data

    def grad_fn(g):
        return (
            _unbroadcast(g * y.data, x.data.shape),
            _unbroadcast(g * x.data, y.data.shape),
        )

    return from_op(out, (x, y), grad_fn, "mul")


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = x.data.sum(keepdims=False).reshape(())

    def grad_fn(g):
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return from_op(out, (x,), grad_fn, "sum")


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    out = np.maximum(x.data, x.data.dtype.type(0))

    def grad_fn(g):
        return (g * mask,)

    return from_op(out, (x,), grad_fn, "relu")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (N,F) @ (F,C) + (C,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(
            f"dense expects 2-d input and weight, got {x.data.shape} and {weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"dense inner extents disagree: input axis 1 is {x.data.shape[1]}, "
            f"weight axis 0 is {weight.data.shape[0]}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(
            f"dense bias shape {bias.data.shape} does not match weight axis 1 "
            f"({weight.data.shape[1]},)"
        )
    out = x.data @ weight.data + bias.data

    def grad_fn(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return from_op(out, (x, weight, bias), grad_fn, "dense")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: input NCHW, kernel OIHW.

    Output spatial extent is floor((in + 2*padding - k)/stride) + 1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be nonnegative, got {padding}")
    n, c, h, w = x.data.shape
    o, i, kh, kw = kernel.data.shape
    if c != i:
        raise ShapeError(
            f"conv2d channel mismatch: input axis 1 is {c}, kernel axis 1 is {i}"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d spatial extents after padding ({h + 2 * padding}, {w + 2 * padding}) "
            f"are smaller than kernel extents ({kh}, {kw})"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # N,C,Ho,Wo,KH,KW
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gk = (gmat.T @ cols).reshape(o, c, kh, kw)
        gcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        # accumulate in NHWC so the 9 scatter-adds need no per-step transpose
        gxp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=g.dtype)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di : di + stride * (ho - 1) + 1 : stride,
                    dj : dj + stride * (wo - 1) + 1 : stride, :] += gcols[:, :, :, :, di, dj]
        gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(gx), gk

    return from_op(out, (x, kernel), grad_fn, "conv2d")


def maxpool(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window spatial maximum over NCHW input.

    Gradient routes to the argmax position; ties break to the first index in
    a row-major scan of the window.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool expects 4-d NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if window > h or window > w:
        raise ShapeError(
            f"maxpool window {window} larger than spatial extents ({h}, {w})"
        )
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride].reshape(n, c, ho, wo, window * window)
    flat_arg = windows.argmax(axis=-1)  # first occurrence = row-major tie-break
    out = np.take_along_axis(windows, flat_arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        if stride >= window:
            # windows never overlap: scatter into a block view, no index math
            scatter = np.zeros((n, c, ho, wo, window * window), dtype=g.dtype)
            np.put_along_axis(scatter, flat_arg[..., None], g[..., None], axis=-1)
            blocks = scatter.reshape(n, c, ho, wo, window, window)
            gx = np.zeros_like(x.data)
            view = gx[:, :, : (ho - 1) * stride + window, : (wo - 1) * stride + window]
            if stride == window:
                view[...] = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(view.shape)
            else:
                for di in range(window):
                    for dj in range(window):
                        view[:, :, di::stride, dj::stride][:, :, :ho, :wo] += \
                            blocks[:, :, :, :, di, dj]
            return (gx,)
        wi, wj = np.divmod(flat_arg, window)
        ni, ci, hi, wi_out = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * stride + wi
        cols_ = wi_out * stride + wj
        gx = np.zeros_like(x.data)
        np.add.at(gx, (ni, ci, rows, cols_), g)
        return (gx,)

    return from_op(out, (x,), grad_fn, "maxpool")


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over (N,C) logits, computed with max-subtraction."""
    if logits.data.ndim != 2 or logits.data.shape[1] < 2:
        raise ShapeError(
            f"softmax expects (N,C) logits with C >= 2, got {logits.data.shape}"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dot),)

    return from_op(out, (logits,), grad_fn, "softmax")


_PROB_CLAMP = 1e-7


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p(true class) over the batch.

    ``labels`` is a one-hot (N,C) array or tensor; it is treated as constant.
    Probabilities are clamped at 1e-7 before the log.
    """
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != probs.data.shape:
        raise ShapeError(
            f"cross_entropy labels shape {y.shape} does not match probs {probs.data.shape}"
        )
    onehot_ok = np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)
    if not onehot_ok:
        raise ValueError("cross_entropy labels must be one-hot rows")
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-2):
        raise ValueError("cross_entropy probs rows must sum to 1")
    clamped = np.maximum(probs.data, probs.data.dtype.type(_PROB_CLAMP))
    n = probs.data.shape[0]
    out = np.asarray(-(y * np.log(clamped)).sum() / n, dtype=probs.data.dtype)

    def grad_fn(g):
        mask = probs.data >= _PROB_CLAMP
        return (g * (-(y * mask) / clamped / n), None)

    parents = (probs, labels) if isinstance(labels, Tensor) else (probs,)
    if isinstance(labels, Tensor):
        return from_op(out, parents, grad_fn, "cross_entropy")

    def grad_fn_single(g):
        return (grad_fn(g)[0],)

    return from_op(out, parents, grad_fn_single, "cross_entropy")
