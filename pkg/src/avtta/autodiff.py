"""Dense-tensor reverse-mode autodiff on a recording tape.

Every operation the losses and the toy classifier need is implemented
here as a free function over :class:`Tensor`. When a :class:`Tape` is
active (``with Tape() as tape:``), operations record a node with a local
gradient rule; ``tape.backward(loss)`` replays the nodes in reverse and
accumulates gradients into every parameter tensor that was touched.

All values are 64-bit floats. Tensors are immutable once created unless
they are parameters updated in place by an optimizer between tapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CE_EPS = 1e-12  # floor inside -log(p) so a zero probability stays finite
RMS_EPS = 1e-6  # keeps the row-norm denominator away from zero


class ShapeError(ValueError):
    """Operand shapes do not conform to the operation's contract."""


class NonFiniteError(ValueError):
    """A tensor would contain NaN or Inf."""


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 array, optionally carrying a gradient.

    ``data`` exposes the values as a flat row-major view; ``grad`` does
    the same for the accumulated gradient (``None`` until a backward
    pass or ``zero_grad`` touches the tensor). ``node_id`` links the
    tensor into the tape that most recently recorded it.
    """

    __slots__ = ("array", "requires_grad", "node_id", "_tape", "_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 0:
            arr = np.ascontiguousarray(arr)  # keep 0-d scalars 0-d
        # Fast screen: a non-finite element forces a non-finite sum. The
        # exact per-element check runs only when the screen trips, so
        # overflowing-but-finite sums are not falsely rejected.
        if arr.size and not math.isfinite(float(arr.sum())):
            if not np.isfinite(arr).all():
                raise NonFiniteError("tensor values must be finite")
        self.array = arr
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None
        self._grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    @property
    def grad(self) -> Optional[np.ndarray]:
        return None if self._grad is None else self._grad.reshape(-1)

    @property
    def grad_array(self) -> Optional[np.ndarray]:
        return self._grad

    def zero_grad(self) -> None:
        self._grad = np.zeros_like(self.array)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


@dataclass
class Node:
    """One recorded operation: inputs precede outputs on the tape."""

    op: str
    input_ids: tuple[int, ...]
    output_id: int
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


@dataclass
class Tape:
    """Ordered record of operations for one reverse-mode pass."""

    nodes: list[Node] = field(default_factory=list)
    _tensors: dict[int, Tensor] = field(default_factory=dict)
    _next_id: int = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def attach(self, t: Tensor) -> int:
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
            self._tensors[t.node_id] = t
        return t.node_id  # type: ignore[return-value]

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]) -> None:
        in_ids = tuple(self.attach(t) for t in inputs)
        out_id = self.attach(output)
        self.nodes.append(Node(op, in_ids, out_id, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(tensor) into every attached parameter.

        Returns the full gradient map keyed by node id. Each node is
        visited exactly once, in reverse recording order, so repeated
        calls on an identical tape give bit-identical gradients.
        """
        if loss.array.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.node_id is None:
            raise ValueError("loss is not on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            out_grad = grads.get(node.output_id)
            if out_grad is None:
                continue
            for tensor, g in zip(node.inputs, node.backward_fn(out_grad)):
                if g is None:
                    continue
                nid = tensor.node_id
                if nid in grads:
                    grads[nid] = grads[nid] + g
                else:
                    grads[nid] = g
        for nid, g in grads.items():
            t = self._tensors[nid]
            if t.requires_grad:
                if t._grad is None:
                    t._grad = np.zeros_like(t.array)
                t._grad += g
        return grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    if loss._tape is None:
        raise ValueError("loss is not bound to a tape")
    return loss._tape.backward(loss)


def _emit(op: str, inputs: Sequence[Tensor], out_values: np.ndarray,
          backward_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]) -> Tensor:
    out = Tensor(out_values)
    tape = _active_tape()
    if tape is not None:
        tape.record(op, inputs, out, backward_fn)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = W x + b for a vector x, or row-wise for a stack of vectors."""
    if w.array.ndim != 2 or b.array.ndim != 1:
        raise ShapeError("linear expects W of rank 2 and b of rank 1")
    n_out, n_in = w.array.shape
    if b.array.shape[0] != n_out:
        raise ShapeError(f"bias length {b.array.shape[0]} != {n_out} outputs")
    if x.array.ndim not in (1, 2) or x.array.shape[-1] != n_in:
        raise ShapeError(f"input shape {x.shape} does not match {n_in} weight columns")
    xv, wv = x.array, w.array
    out = xv @ wv.T + b.array

    def grad(g: np.ndarray):
        if xv.ndim == 1:
            return g @ wv, np.outer(g, xv), g
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _emit("linear", (x, w, b), out, grad)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is fixed to 0."""
    mask = x.array > 0.0

    def grad(g: np.ndarray):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.array, 0.0), grad)


def softmax(logits: Tensor) -> Tensor:
    """Stabilized softmax over a rank-1 logit vector."""
    if logits.array.ndim != 1 or logits.array.size < 1:
        raise ShapeError("softmax expects a nonempty rank-1 tensor")
    shifted = logits.array - logits.array.max()
    e = np.exp(shifted)
    p = e / e.sum()

    def grad(g: np.ndarray):
        return (p * (g - float(g @ p)),)

    return _emit("softmax", (logits,), p, grad)


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """-log(probs[target] + eps) over an existing probability vector."""
    if probs.array.ndim != 1:
        raise ShapeError("cross_entropy expects a rank-1 probability vector")
    n = probs.array.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    p_t = probs.array[target] + CE_EPS
    out = np.asarray(-np.log(p_t))

    def grad(g: np.ndarray):
        gp = np.zeros(n, dtype=np.float64)
        gp[target] = -float(g) / p_t
        return (gp,)

    return _emit("cross_entropy", (probs,), out, grad)


def channel_mean(x: Tensor) -> Tensor:
    """Per-channel mean of a (c, ...) tensor over all trailing axes."""
    if x.array.ndim < 2:
        raise ShapeError("channel_mean expects rank >= 2 with channels first")
    reduced = x.array.shape[1:]
    n = int(np.prod(reduced))
    if n == 0:
        raise ShapeError("cannot reduce over zero-size axes")
    flat = x.array.reshape(x.array.shape[0], n)
    out = flat.mean(axis=1)

    def grad(g: np.ndarray):
        gx = np.repeat(g[:, None] / n, n, axis=1).reshape(x.array.shape)
        return (gx,)

    return _emit("channel_mean", (x,), out, grad)


def channel_var(x: Tensor) -> Tensor:
    """Per-channel population variance of a (c, ...) tensor."""
    if x.array.ndim < 2:
        raise ShapeError("channel_var expects rank >= 2 with channels first")
    n = int(np.prod(x.array.shape[1:]))
    if n == 0:
        raise ShapeError("cannot reduce over zero-size axes")
    flat = x.array.reshape(x.array.shape[0], n)
    mu = flat.mean(axis=1, keepdims=True)
    centered = flat - mu
    out = (centered * centered).mean(axis=1)

    def grad(g: np.ndarray):
        # d var_c / d x_cp = 2 (x_cp - mu_c) / n; the mean term cancels.
        gx = (2.0 / n) * centered * g[:, None]
        return (gx.reshape(x.array.shape),)

    return _emit("channel_var", (x,), out, grad)


def mean_var(x: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel mean and population variance of a (c, t, h, w) tensor."""
    if x.array.ndim != 4:
        raise ShapeError(f"mean_var expects a rank-4 tensor, got {x.shape}")
    return channel_mean(x), channel_var(x)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of |a - b|; the subgradient at exact ties is 0."""
    if a.array.shape != b.array.shape:
        raise ShapeError(f"l1_distance shapes differ: {a.shape} vs {b.shape}")
    diff = a.array - b.array
    sign = np.sign(diff)

    def grad(g: np.ndarray):
        return float(g) * sign, -float(g) * sign

    return _emit("l1_distance", (a, b), np.asarray(np.abs(diff).sum()), grad)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.array.shape != b.array.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def grad(g: np.ndarray):
        return g, g

    return _emit("add", (a, b), a.array + b.array, grad)


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)

    def grad(g: np.ndarray):
        return (g * k,)

    return _emit("scale", (x,), x.array * k, grad)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def grad(g: np.ndarray):
        return (np.full_like(x.array, float(g)),)

    return _emit("tsum", (x,), np.asarray(x.array.sum()), grad)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.array.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")

    def grad(g: np.ndarray):
        return (g.reshape(x.array.shape),)

    return _emit("reshape", (x,), x.array.reshape(shape), grad)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.array.ndim)):
        raise ShapeError(f"bad permutation {axes} for rank {x.array.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def grad(g: np.ndarray):
        return (g.transpose(inverse),)

    return _emit("permute", (x,), x.array.transpose(axes), grad)


def rms_norm(x: Tensor) -> Tensor:
    """Divide each row (last axis) by its root-mean-square magnitude."""
    if x.array.ndim < 1:
        raise ShapeError("rms_norm expects rank >= 1")
    n = x.array.shape[-1]
    r = np.sqrt((x.array * x.array).mean(axis=-1, keepdims=True) + RMS_EPS)
    out = x.array / r

    def grad(g: np.ndarray):
        gx = g / r - x.array * (g * x.array).sum(axis=-1, keepdims=True) / (n * r ** 3)
        return (gx,)

    return _emit("rms_norm", (x,), out, grad)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    arrays = [t.array for t in tensors]
    sizes = [a.shape[axis] for a in arrays]
    bounds = np.cumsum(sizes)[:-1]

    def grad(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), np.concatenate(arrays, axis=axis), grad)
