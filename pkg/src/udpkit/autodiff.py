"""Reverse-mode automatic differentiation over dense float64 tensors.

A small fixed op set, just enough to express a time-conditioned MLP noise
predictor and its mean-squared loss. Gradients flow to any leaf marked
requires_grad, which covers both model parameters and input images, so the
same engine serves the descent (parameter) and ascent (perturbation) sides
of the alternating optimization.

Everything is float64. Broadcasting is limited to scalar-with-tensor for
the elementwise ops; matmul is strictly rank-2.
"""

from __future__ import annotations

import numpy as np

OP_KINDS = (
    "add",
    "sub",
    "mul_elementwise",
    "matmul",
    "silu",
    "sum",
    "mean",
    "square",
    "scale",
    "concat",
)


class Tensor:
    """Dense tensor: flat row-major float64 values plus a shape tuple."""

    __slots__ = ("shape", "values", "requires_grad", "grad")

    def __init__(self, values, shape=None, requires_grad=False):
        arr = np.asarray(values, dtype=np.float64)
        if shape is None:
            shape = arr.shape
        shape = tuple(int(d) for d in shape)
        if any(d <= 0 for d in shape):
            raise ValueError(f"tensor dimensions must be positive, got {shape}")
        flat = np.ascontiguousarray(arr).reshape(-1).copy()
        n = 1
        for d in shape:
            n *= d
        if flat.size != n:
            raise ValueError(
                f"shape {shape} implies {n} values, got {flat.size}"
            )
        self.shape = shape
        self.values = flat
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values[0])

    def array(self) -> np.ndarray:
        """Values viewed with the logical shape (no copy)."""
        return self.values.reshape(self.shape)

    def copy(self) -> "Tensor":
        return Tensor(self.values.copy(), self.shape, self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(values, shape=None) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values, shape)


class _Node:
    __slots__ = ("op", "input_ids", "tensor", "ctx")

    def __init__(self, op, input_ids, tensor, ctx):
        self.op = op
        self.input_ids = input_ids
        self.tensor = tensor
        self.ctx = ctx


class ComputationGraph:
    """Single-writer op tape; leaves are registered on first use.

    Node order is construction order, which is already topological, so the
    backward sweep is a single reverse pass. The root is the last node added
    and must be scalar at backward time.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tensor_ids: dict[int, int] = {}
        self._consumed = False

    @property
    def root(self) -> int | None:
        return len(self.nodes) - 1 if self.nodes else None

    def node_id(self, t: Tensor) -> int | None:
        return self._tensor_ids.get(id(t))

    def leaf(self, t: Tensor) -> int:
        """Register (or look up) a tensor as a leaf node."""
        nid = self._tensor_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), t, None))
            self._tensor_ids[id(t)] = nid
        return nid

    def _record(self, op, input_ids, tensor, ctx) -> int:
        nid = len(self.nodes)
        self.nodes.append(_Node(op, tuple(input_ids), tensor, ctx))
        self._tensor_ids[id(tensor)] = nid
        self._consumed = False
        return nid

    # convenience wrappers so model code reads naturally
    def add(self, a, b):
        return forward_op(self, "add", [a, b])

    def sub(self, a, b):
        return forward_op(self, "sub", [a, b])

    def mul(self, a, b):
        return forward_op(self, "mul_elementwise", [a, b])

    def matmul(self, a, b):
        return forward_op(self, "matmul", [a, b])

    def silu(self, a):
        return forward_op(self, "silu", [a])

    def sum(self, a):
        return forward_op(self, "sum", [a])

    def mean(self, a):
        return forward_op(self, "mean", [a])

    def square(self, a):
        return forward_op(self, "square", [a])

    def scale(self, a, factor):
        return forward_op(self, "scale", [a], factor=factor)

    def concat(self, parts):
        return forward_op(self, "concat", list(parts))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _elementwise_shapes(kind, a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(a):
        return b.shape
    if _is_scalar(b):
        return a.shape
    raise ValueError(
        f"{kind}: shape mismatch {a.shape} vs {b.shape} "
        "(only scalar-with-tensor broadcast is supported)"
    )


def forward_op(graph: ComputationGraph, kind: str, inputs: list, *, factor=None) -> Tensor:
    """Apply one op, record it on the graph, and return the output tensor."""
    if kind not in OP_KINDS:
        raise ValueError(f"unknown op kind {kind!r}")
    if not inputs:
        raise ValueError(f"{kind}: no inputs")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise TypeError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
        if not np.isfinite(t.values).all():
            raise ValueError(f"{kind}: non-finite values in input of shape {t.shape}")

    ctx = None
    if kind in ("add", "sub", "mul_elementwise"):
        if len(inputs) != 2:
            raise ValueError(f"{kind}: expected 2 inputs, got {len(inputs)}")
        a, b = inputs
        out_shape = _elementwise_shapes(kind, a, b)
        av = a.values if not _is_scalar(a) or a.shape == out_shape else a.values[0]
        bv = b.values if not _is_scalar(b) or b.shape == out_shape else b.values[0]
        if kind == "add":
            vals = av + bv
        elif kind == "sub":
            vals = av - bv
        else:
            vals = av * bv
            ctx = (a, b)
    elif kind == "matmul":
        if len(inputs) != 2:
            raise ValueError(f"matmul: expected 2 inputs, got {len(inputs)}")
        a, b = inputs
        if len(a.shape) != 2 or len(b.shape) != 2:
            raise ValueError(f"matmul: rank-2 tensors required, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
        with np.errstate(over="ignore", invalid="ignore"):  # finiteness checked below
            vals = (a.array() @ b.array()).reshape(-1)
        out_shape = (a.shape[0], b.shape[1])
        ctx = (a, b)
    elif kind == "silu":
        (a,) = _one_input(kind, inputs)
        s = _sigmoid(a.values)
        vals = a.values * s
        out_shape = a.shape
        ctx = (a, s)
    elif kind == "sum":
        (a,) = _one_input(kind, inputs)
        vals = np.array([a.values.sum()])
        out_shape = ()
        ctx = a.size
    elif kind == "mean":
        (a,) = _one_input(kind, inputs)
        vals = np.array([a.values.mean()])
        out_shape = ()
        ctx = a.size
    elif kind == "square":
        (a,) = _one_input(kind, inputs)
        vals = a.values * a.values
        out_shape = a.shape
        ctx = a
    elif kind == "scale":
        (a,) = _one_input(kind, inputs)
        if factor is None:
            raise ValueError("scale: factor is required")
        factor = float(factor)
        if not np.isfinite(factor):
            raise ValueError(f"scale: non-finite factor {factor}")
        vals = a.values * factor
        out_shape = a.shape
        ctx = factor
    elif kind == "concat":
        if len(inputs) < 2:
            raise ValueError(f"concat: expected at least 2 inputs, got {len(inputs)}")
        ranks = {len(t.shape) for t in inputs}
        if ranks == {1}:
            vals = np.concatenate([t.values for t in inputs])
            out_shape = (vals.size,)
            ctx = (1, [t.shape[0] for t in inputs])
        elif ranks == {2}:
            rows = {t.shape[0] for t in inputs}
            if len(rows) != 1:
                raise ValueError(
                    f"concat: row counts differ across inputs: {[t.shape for t in inputs]}"
                )
            mat = np.concatenate([t.array() for t in inputs], axis=1)
            vals = mat.reshape(-1)
            out_shape = mat.shape
            ctx = (2, [t.shape[1] for t in inputs])
        else:
            raise ValueError(
                f"concat: inputs must be all rank-1 or all rank-2, got {[t.shape for t in inputs]}"
            )

    vals = np.asarray(vals, dtype=np.float64).reshape(-1)
    if not np.isfinite(vals).all():
        raise FloatingPointError(f"{kind}: non-finite result")
    out = Tensor(vals, out_shape)
    input_ids = [graph.leaf(t) for t in inputs]
    graph._record(kind, input_ids, out, ctx)
    return out


def _one_input(kind, inputs):
    if len(inputs) != 1:
        raise ValueError(f"{kind}: expected 1 input, got {len(inputs)}")
    return inputs


def backward(graph: ComputationGraph) -> dict:
    """Reverse sweep from the (scalar) root.

    Returns a map from leaf node id to a gradient Tensor. Every
    requires_grad leaf also gets its .grad populated; leaves that do not
    participate in the root's value receive exact zeros. A second call
    without new forward ops is rejected.
    """
    if not graph.nodes:
        raise ValueError("backward on empty graph")
    if graph._consumed:
        raise ValueError("backward called twice without a new forward pass")
    root_id = graph.root
    root = graph.nodes[root_id]
    if root.tensor.size != 1:
        raise ValueError(f"root must be scalar, got shape {root.tensor.shape}")

    grads: dict[int, np.ndarray] = {root_id: np.ones(1)}

    def send(nid: int, g: np.ndarray):
        if nid in grads:
            grads[nid] = grads[nid] + g
        else:
            grads[nid] = g

    for nid in range(root_id, -1, -1):
        node = graph.nodes[nid]
        g = grads.get(nid)
        if g is None or node.op == "leaf":
            continue
        ins = [graph.nodes[i].tensor for i in node.input_ids]
        if node.op == "add":
            a, b = ins
            send(node.input_ids[0], _reduce_to(g, a))
            send(node.input_ids[1], _reduce_to(g, b))
        elif node.op == "sub":
            a, b = ins
            send(node.input_ids[0], _reduce_to(g, a))
            send(node.input_ids[1], _reduce_to(-g, b))
        elif node.op == "mul_elementwise":
            a, b = node.ctx
            gb_full = g * (a.values if a.size > 1 or a.size == g.size else a.values[0])
            ga_full = g * (b.values if b.size > 1 or b.size == g.size else b.values[0])
            send(node.input_ids[0], _reduce_to(ga_full, a))
            send(node.input_ids[1], _reduce_to(gb_full, b))
        elif node.op == "matmul":
            a, b = node.ctx
            gm = g.reshape(a.shape[0], b.shape[1])
            send(node.input_ids[0], (gm @ b.array().T).reshape(-1))
            send(node.input_ids[1], (a.array().T @ gm).reshape(-1))
        elif node.op == "silu":
            a, s = node.ctx
            send(node.input_ids[0], g * (s * (1.0 + a.values * (1.0 - s))))
        elif node.op == "sum":
            send(node.input_ids[0], np.full(node.ctx, g[0]))
        elif node.op == "mean":
            send(node.input_ids[0], np.full(node.ctx, g[0] / node.ctx))
        elif node.op == "square":
            a = node.ctx
            send(node.input_ids[0], g * 2.0 * a.values)
        elif node.op == "scale":
            send(node.input_ids[0], g * node.ctx)
        elif node.op == "concat":
            rank, widths = node.ctx
            if rank == 1:
                off = 0
                for in_id, w in zip(node.input_ids, widths):
                    send(in_id, g[off : off + w].copy())
                    off += w
            else:
                rows = graph.nodes[node.input_ids[0]].tensor.shape[0]
                gm = g.reshape(rows, sum(widths))
                off = 0
                for in_id, w in zip(node.input_ids, widths):
                    send(in_id, np.ascontiguousarray(gm[:, off : off + w]).reshape(-1))
                    off += w

    result = {}
    for nid, node in enumerate(graph.nodes):
        if node.op != "leaf":
            continue
        t = node.tensor
        arr = grads.get(nid)
        if arr is None:
            arr = np.zeros(t.size)
        else:
            arr = np.asarray(arr, dtype=np.float64)
            if arr.size == 1 and t.size == 1:
                arr = arr.reshape(1)
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite gradient for leaf of shape {t.shape}")
        if t.requires_grad:
            t.grad = arr.copy()
        result[nid] = Tensor(arr, t.shape)
    graph._consumed = True
    return result


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Collapse a broadcast gradient back to a scalar operand."""
    if t.size == 1 and g.size > 1:
        return np.array([g.sum()])
    return g


def sgd_step(params: list, eta: float) -> None:
    """In-place descent step p <- p - eta * p.grad for every parameter.

    All parameters must carry a gradient (set by backward); gradients are
    cleared afterwards so stale values can never leak into the next step.
    """
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter index {i}")
    for p in params:
        p.values -= eta * p.grad
        if not np.isfinite(p.values).all():
            raise FloatingPointError("non-finite parameter after sgd step")
        p.grad = None


def finite_diff_grad(f, x: Tensor, h: float = 1e-4) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate.

    Independent check on backward(): knows nothing about graphs, only
    evaluates f at x +/- h*e_i.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")

    def scalar(v):
        return v.item() if isinstance(v, Tensor) else float(v)

    out = np.empty(x.size)
    for i in range(x.size):
        orig = x.values[i]
        x.values[i] = orig + h
        fp = scalar(f(x))
        x.values[i] = orig - h
        fm = scalar(f(x))
        x.values[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out, x.shape)
