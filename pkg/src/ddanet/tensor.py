"""Dense tensors and a reverse-mode automatic differentiation engine.

A ``Tensor`` wraps a contiguous numpy array (float32 by default, float64 for
verification work). Operations executed while a ``Graph`` is active are
recorded on a tape; ``Graph.backward`` replays the tape in reverse insertion
order and accumulates gradients into every tracked leaf. With no active graph
the same code paths run in pure inference mode and produce bitwise-identical
forward values.

Broadcasting is deliberately narrow: the second operand of an elementwise op
may be a python scalar or a single-channel map of shape (N, 1, H, W) applied
across the channels of an (N, C, H, W) tensor. Everything else must match
shapes exactly.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "add",
    "mul",
    "sub",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "log",
    "clip",
    "reduce_sum",
    "reduce_mean",
    "concat_channels",
    "linear",
    "reshape",
]

# When true, every op asserts its output is finite. Slow; meant for tests.
CHECK_FINITE = False

_ACTIVE: "Graph | None" = None


def active_graph() -> "Graph | None":
    return _ACTIVE


class Tensor:
    """A rank-N numeric array, optionally participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "graph", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.graph: "Graph | None" = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class Graph:
    """Append-only tape of ops recorded during one forward pass.

    Confined to a single worker; use as a context manager around the forward
    computation, then call :meth:`backward` on the resulting scalar loss.
    """

    def __init__(self):
        self._ops: list[tuple[str, int, tuple, object]] = []
        self._n_nodes = 0
        self._leaves: list[tuple[int, Tensor]] = []

    def __enter__(self) -> "Graph":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("another Graph is already recording")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = None
        return False

    def _register(self, t: Tensor) -> int:
        if t.graph is not self or t.node_id is None:
            t.graph = self
            t.node_id = self._n_nodes
            self._n_nodes += 1
            if t.is_leaf and t.requires_grad:
                self._leaves.append((t.node_id, t))
        return t.node_id

    def _record(self, name: str, out: Tensor, inputs: tuple, backward) -> None:
        in_ids = tuple(
            self._register(t) if isinstance(t, Tensor) and t.requires_grad else None
            for t in inputs
        )
        out.is_leaf = False
        out.requires_grad = True
        out_id = self._register(out)
        self._ops.append((name, out_id, in_ids, backward))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Accumulate d(loss)/d(leaf) for every tracked leaf.

        Returns a map node_id -> gradient tensor and also stores the raw
        gradient array on each leaf's ``grad`` attribute. Leaves recorded on
        the tape but unused by the loss receive zero gradients.
        """
        if loss.graph is not self or loss.node_id is None:
            raise ValueError("loss was not produced by this graph")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")

        grads: list[np.ndarray | None] = [None] * self._n_nodes
        grads[loss.node_id] = np.ones_like(loss.data)

        # Reverse insertion order: every consumer of a node was appended after
        # its producer, so gradients are fully accumulated before use.
        for _name, out_id, in_ids, backward in reversed(self._ops):
            gy = grads[out_id]
            if gy is None:
                continue
            for iid, g in zip(in_ids, backward(gy)):
                if iid is None or g is None:
                    continue
                grads[iid] = g if grads[iid] is None else grads[iid] + g

        result: dict[int, Tensor] = {}
        for nid, leaf in self._leaves:
            g = grads[nid]
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            result[nid] = Tensor(g)
        return result


def record_op(name: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap raw forward output in a Tensor, taping it when recording is on.

    ``backward`` maps the upstream gradient array to a tuple of gradient
    arrays aligned with ``inputs`` (None for non-differentiable slots). Layer
    modules use this entry point to register custom ops on the active tape.
    """
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    out = Tensor(out_data)
    g = _ACTIVE
    if g is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        g._record(name, out, inputs, backward)
    return out


def _binary_mode(a: Tensor, b) -> str:
    """Classify operands: 'scalar', 'same', or 'bcast' (N,1,H,W over N,C,H,W)."""
    if isinstance(b, (int, float)):
        return "scalar"
    if not isinstance(b, Tensor):
        raise TypeError(f"expected Tensor or scalar, got {type(b).__name__}")
    if a.shape == b.shape:
        return "same"
    if (
        a.ndim == 4
        and b.ndim == 4
        and b.shape[1] == 1
        and a.shape[0] == b.shape[0]
        and a.shape[2:] == b.shape[2:]
    ):
        return "bcast"
    raise ValueError(f"shapes {a.shape} and {b.shape} are not compatible")


def _sum_to_channel_map(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=1, keepdims=True)


def add(a: Tensor, b) -> Tensor:
    mode = _binary_mode(a, b)
    if mode == "scalar":
        out = a.data + b
        return record_op("add", out, (a,), lambda gy: (gy,))
    out = a.data + b.data

    def backward(gy):
        return gy, _sum_to_channel_map(gy) if mode == "bcast" else gy

    return record_op("add", out, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    mode = _binary_mode(a, b)
    if mode == "scalar":
        out = a.data * b
        return record_op("mul", out, (a,), lambda gy: (gy * b,))
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(gy):
        ga = gy * b_data
        gb = gy * a_data
        return ga, _sum_to_channel_map(gb) if mode == "bcast" else gb

    return record_op("mul", out, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    mode = _binary_mode(a, b)
    if mode == "scalar":
        return record_op("sub", a.data - b, (a,), lambda gy: (gy,))
    out = a.data - b.data

    def backward(gy):
        gb = -gy
        return gy, _sum_to_channel_map(gb) if mode == "bcast" else gb

    return record_op("sub", out, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    mode = _binary_mode(a, b)
    if mode == "scalar":
        inv = 1.0 / b
        return record_op("div", a.data * inv, (a,), lambda gy: (gy * inv,))
    out = a.data / b.data
    a_data, b_data = a.data, b.data

    def backward(gy):
        ga = gy / b_data
        gb = -gy * a_data / (b_data * b_data)
        return ga, _sum_to_channel_map(gb) if mode == "bcast" else gb

    return record_op("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda gy: (-gy,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    mask = x.data > 0

    def backward(gy):
        return (gy * mask,)

    return record_op("relu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    # keep saturated values one ulp inside (0, 1): the result is strictly
    # between 0 and 1 even where exp() under/overflows the dtype
    one = d.dtype.type(1)
    zero = d.dtype.type(0)
    np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero), out=out)

    def backward(gy):
        return (gy * out * (1.0 - out),)

    return record_op("sigmoid", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    x_data = x.data

    def backward(gy):
        return (gy / x_data,)

    return record_op("log", out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(gy):
        return (gy * mask,)

    return record_op("clip", out, (x,), backward)


def _normalize_axes(x: Tensor, axes) -> tuple:
    if axes is None:
        return tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(set(int(a) for a in axes)))
    for a in axes:
        if a < 0 or a >= x.ndim:
            raise ValueError(f"axis {a} out of range for rank-{x.ndim} tensor")
    return axes


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    """Sum over ``axes`` (all by default); reduced axes are kept with size 1."""
    axes = _normalize_axes(x, axes)
    out = x.data.sum(axis=axes, keepdims=True)
    in_shape = x.shape

    def backward(gy):
        return (np.broadcast_to(gy, in_shape).copy(),)

    return record_op("sum", out, (x,), backward)


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    """Mean over ``axes`` (all by default); reduced axes are kept with size 1."""
    axes = _normalize_axes(x, axes)
    out = x.data.mean(axis=axes, keepdims=True)
    in_shape = x.shape
    count = 1
    for a in axes:
        count *= in_shape[a]
    inv = 1.0 / count

    def backward(gy):
        return (np.broadcast_to(gy * inv, in_shape).copy(),)

    return record_op("mean", out, (x,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two rank-4 tensors along the channel axis, a first."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects rank-4 tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    c_a = a.shape[1]

    def backward(gy):
        return gy[:, :c_a], gy[:, c_a:]

    return record_op("concat", out, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w.T + b for x of shape (N, C_in), w of shape (C_out, C_in)."""
    if x.ndim != 2:
        raise ValueError(f"linear expects a rank-2 input, got shape {x.shape}")
    if w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"weight shape {w.shape} incompatible with input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data.T + b.data
    x_data, w_data = x.data, w.data

    def backward(gy):
        return gy @ w_data, gy.T @ x_data, gy.sum(axis=0)

    return record_op("linear", out, (x, w, b), backward)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    in_shape = x.shape

    def backward(gy):
        return (gy.reshape(in_shape),)

    return record_op("reshape", out, (x,), backward)
