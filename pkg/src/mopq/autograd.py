"""Minimal reverse-mode automatic differentiation over a fixed op set.

The engine is eager: creating a node computes its value immediately from its
input nodes. ``backward`` walks the graph in reverse topological order and
accumulates vector-Jacobian products into ``Node.grad``. Everything is float64
and gradient accumulation happens in a deterministic order, so repeated runs
over the same graph are bit-identical.

Supported shapes are scalars ``()``, vectors ``(n,)`` and matrices ``(n, m)``.
There is no broadcasting beyond the matrix-plus-bias-row case of ``add``.

Two ops implement straight-through semantics:

* ``stop_gradient``   -- forward passes the value through, backward stops.
* ``straight_through_select(scores, codebook)`` -- forward picks the argmax
  codeword row per score row (hard selection); backward routes gradients to
  the selected codeword row directly and to the scores through the softmax
  of the scores (the soft path). This equals building
  ``(one_hot - softmax(s)).stop_gradient() + softmax(s)`` and multiplying by
  the codebook, collapsed into one auditable primitive.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

Array = np.ndarray

# Named tensors with a deterministic iteration order; plain dicts preserve
# insertion order, which is all the determinism contract needs.
ParameterSet = dict[str, Array]


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("op", "inputs", "value", "grad", "name", "meta")

    def __init__(self, op: str, inputs: tuple["Node", ...], value: Array,
                 name: str | None = None, meta: dict | None = None):
        if value.ndim > 2:
            raise ShapeError(f"{op}: tensors of rank {value.ndim} are not supported")
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad: Array | None = None
        self.name = name
        self.meta = meta if meta is not None else {}

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({label}, shape={tuple(self.value.shape)})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.value.shape)


def _label(node: Node) -> str:
    return node.name or node.op


# ---------------------------------------------------------------------------
# Leaf constructors
# ---------------------------------------------------------------------------

def input_node(name: str, value) -> Node:
    """A named data leaf. Rebindable through forward_eval; never receives grad."""
    return Node("input", (), as_f64(value), name=name)


def parameter(name: str, value) -> Node:
    """A named trainable leaf; backward collects its gradient."""
    return Node("parameter", (), as_f64(value), name=name)


def constant(value) -> Node:
    """An anonymous literal leaf."""
    return Node("constant", (), as_f64(value))


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul: operands must be vectors or matrices, got {_label(a)}, {_label(b)}")
    if av.ndim == 1 and bv.ndim == 1:
        raise ShapeError("matmul: use dot() for vector-vector products")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({av.shape} @ {bv.shape}) "
            f"for nodes {_label(a)}, {_label(b)}")
    return Node("matmul", (a, b), av @ bv)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return Node("transpose", (a,), a.value.T)


def add(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    bias = av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]
    if not bias and av.shape != bv.shape:
        raise ShapeError(
            f"add: shapes {av.shape} and {bv.shape} are incompatible "
            f"for nodes {_label(a)}, {_label(b)}")
    return Node("add", (a, b), av + bv, meta={"bias": bias})


def mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return Node("mul", (a, b), a.value * b.value)


def scale(a: Node, s: float) -> Node:
    return Node("scale", (a,), a.value * float(s), meta={"s": float(s)})


def negate(a: Node) -> Node:
    return Node("negate", (a,), -a.value)


def tanh(a: Node) -> Node:
    return Node("tanh", (a,), np.tanh(a.value))


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return Node("log", (a,), out)


def reduce_sum(a: Node) -> Node:
    return Node("sum", (a,), np.asarray(a.value.sum()))


def dot(a: Node, b: Node) -> Node:
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")
    return Node("dot", (a, b), np.asarray(a.value @ b.value))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    """Contiguous range along the last axis of a vector or matrix."""
    n = a.value.shape[-1]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for width {n}")
    return Node("slice", (a,), a.value[..., start:stop].copy(), meta={"start": start, "stop": stop})


def concat_cols(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise UsageError("concat: need at least one input")
    ndim = nodes[0].value.ndim
    for n in nodes:
        if n.value.ndim != ndim:
            raise ShapeError("concat: mixed ranks")
    value = np.concatenate([n.value for n in nodes], axis=-1)
    widths = [n.value.shape[-1] for n in nodes]
    return Node("concat", tuple(nodes), value, meta={"widths": widths})


def vstack(nodes: Sequence[Node]) -> Node:
    """Stack vectors and matrices as rows, like np.vstack."""
    if not nodes:
        raise UsageError("vstack: need at least one input")
    value = np.vstack([n.value for n in nodes])
    rows = [1 if n.value.ndim == 1 else n.value.shape[0] for n in nodes]
    vector = [n.value.ndim == 1 for n in nodes]
    return Node("vstack", tuple(nodes), value, meta={"rows": rows, "vector": vector})


def row_softmax(a: Node) -> Node:
    return Node("row-softmax", (a,), softmax_rows(a.value))


def stop_gradient(a: Node) -> Node:
    return Node("stop-gradient", (a,), a.value)


def straight_through_select(scores: Node, codebook: Node) -> Node:
    """Hard argmax selection of codebook rows with a soft backward path.

    scores: (L,) or (N, L); codebook: (L, d). Forward returns the argmax row
    per score row (ties to the lowest index). Backward sends the upstream
    gradient to the selected codebook rows unchanged, and to the scores via
    the softmax Jacobian applied to ``upstream @ codebook.T``.
    """
    sv, cv = scores.value, codebook.value
    if cv.ndim != 2:
        raise ShapeError("straight_through_select: codebook must be a matrix")
    if sv.shape[-1] != cv.shape[0]:
        raise ShapeError(
            f"straight_through_select: {sv.shape[-1]} scores vs {cv.shape[0]} codewords")
    idx = np.argmax(sv, axis=-1)
    value = cv[idx]
    return Node("straight-through-select", (scores, codebook), value, meta={"idx": idx})


def l2_scores(z: Node, codebook: Node) -> Node:
    """Negative Euclidean distances between each z row and each codebook row."""
    if codebook.value.ndim != 2:
        raise ShapeError("l2_scores: codebook must be a matrix")
    if z.value.shape[-1] != codebook.value.shape[1]:
        raise ShapeError(
            f"l2_scores: sub-vector width {z.value.shape[-1]} vs codeword "
            f"width {codebook.value.shape[1]}")
    return Node("l2-scores", (z, codebook), neg_l2_score_values(z.value, codebook.value))


def cosine_scores(z: Node, codebook: Node) -> Node:
    """Cosine similarity between each z row and each codebook row."""
    if codebook.value.ndim != 2:
        raise ShapeError("cosine_scores: codebook must be a matrix")
    return Node("cosine-scores", (z, codebook),
                cosine_score_values(z.value, codebook.value))


def take_rows(a: Node, idx: Array) -> Node:
    """Gather rows of a matrix; backward scatter-adds into the gathered rows."""
    if a.value.ndim != 2:
        raise ShapeError("take_rows: expected a matrix")
    idx = np.asarray(idx, dtype=np.intp)
    return Node("take-rows", (a,), a.value[idx], meta={"idx": idx})


def take_per_row(a: Node, idx: Array) -> Node:
    """Pick one element from each row: out[n] = a[n, idx[n]]."""
    if a.value.ndim != 2:
        raise ShapeError("take_per_row: expected a matrix")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.value.shape[0],):
        raise ShapeError("take_per_row: need one index per row")
    value = a.value[np.arange(a.value.shape[0]), idx]
    return Node("take-per-row", (a,), value, meta={"idx": idx})


def ste_selected_prob(probs: Node, idx: Array, mode: str = "ste") -> Node:
    """Straight-through view of selected probabilities: forward is exactly 1.

    Implements ``(1 - p[n, idx_n]).stop_gradient() + p[n, idx_n]`` per row,
    whose forward value is exactly one and whose backward routes the upstream
    gradient to the selected probabilities. ``mode="logp"`` instead scales the
    routed gradient by ``1 / p[n, idx_n]``, the gradient one would get from
    ``-log p`` without the straight-through transformation.
    """
    if probs.value.ndim != 2:
        raise ShapeError("ste_selected_prob: expected a probability matrix")
    if mode not in ("ste", "logp"):
        raise UsageError(f"ste_selected_prob: unknown mode {mode!r}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (probs.value.shape[0],):
        raise ShapeError("ste_selected_prob: need one index per row")
    value = np.ones(probs.value.shape[0], dtype=np.float64)
    return Node("ste-selected-prob", (probs,), value, meta={"idx": idx, "mode": mode})


# ---------------------------------------------------------------------------
# Shared forward kernels (also used by the value-level quantizer paths so the
# graph and the plain numpy code produce bit-identical numbers).
# ---------------------------------------------------------------------------

def softmax_rows(x: Array) -> Array:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def neg_l2_score_values(z: Array, codebook: Array) -> Array:
    if z.ndim == 1:
        return -np.linalg.norm(z[None, :] - codebook, axis=-1)
    return -np.linalg.norm(z[:, None, :] - codebook[None, :, :], axis=-1)


def cosine_score_values(z: Array, codebook: Array) -> Array:
    from .errors import DegenerateInputError

    zn = np.linalg.norm(z, axis=-1)
    cn = np.linalg.norm(codebook, axis=-1)
    if np.any(zn == 0.0):
        raise DegenerateInputError("cosine selection: zero-norm input sub-vector")
    if np.any(cn == 0.0):
        raise DegenerateInputError("cosine selection: zero-norm codeword")
    sims = z @ codebook.T
    if z.ndim == 1:
        return sims / (zn * cn)
    return sims / (zn[:, None] * cn[None, :])


# ---------------------------------------------------------------------------
# Traversal, forward re-evaluation, backward
# ---------------------------------------------------------------------------

def topo_order(roots: Sequence[Node] | Node) -> list[Node]:
    """Topological order (inputs before consumers) of all reachable nodes."""
    if isinstance(roots, Node):
        roots = [roots]
    order: list[Node] = []
    seen: set[int] = set()
    for root in roots:
        stack: list[tuple[Node, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in reversed(node.inputs):
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def forward_eval(outputs: Sequence[Node] | Node, bindings: Mapping[str, Array]) -> dict[str, Array]:
    """Re-evaluate the graph under new leaf bindings.

    Every reachable input and parameter node must be bound by name. Values are
    recomputed in topological order; re-evaluating with identical bindings
    reproduces bit-identical values. Returns the values of all named nodes.
    """
    order = topo_order(outputs)
    for node in order:
        if node.op in ("input", "parameter"):
            if node.name not in bindings:
                raise UsageError(f"forward_eval: leaf {node.name!r} is not bound")
            node.value = as_f64(bindings[node.name])
        elif node.op == "constant":
            pass
        else:
            node.value = _recompute(node)
        if not np.all(np.isfinite(node.value)):
            raise NumericError(f"forward_eval: non-finite value at node {_label(node)}")
    return {node.name: node.value for node in order if node.name is not None}


def _recompute(node: Node) -> Array:
    vals = [inp.value for inp in node.inputs]
    op = node.op
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "transpose":
        return vals[0].T
    if op == "add":
        return vals[0] + vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "scale":
        return vals[0] * node.meta["s"]
    if op == "negate":
        return -vals[0]
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(vals[0])
    if op == "sum":
        return np.asarray(vals[0].sum())
    if op == "dot":
        return np.asarray(vals[0] @ vals[1])
    if op == "slice":
        return vals[0][..., node.meta["start"]:node.meta["stop"]].copy()
    if op == "concat":
        return np.concatenate(vals, axis=-1)
    if op == "vstack":
        return np.vstack(vals)
    if op == "row-softmax":
        return softmax_rows(vals[0])
    if op == "stop-gradient":
        return vals[0]
    if op == "straight-through-select":
        idx = np.argmax(vals[0], axis=-1)
        node.meta["idx"] = idx
        return vals[1][idx]
    if op == "l2-scores":
        return neg_l2_score_values(vals[0], vals[1])
    if op == "cosine-scores":
        return cosine_score_values(vals[0], vals[1])
    if op == "take-rows":
        return vals[0][node.meta["idx"]]
    if op == "take-per-row":
        return vals[0][np.arange(vals[0].shape[0]), node.meta["idx"]]
    if op == "ste-selected-prob":
        return np.ones(vals[0].shape[0], dtype=np.float64)
    raise UsageError(f"unknown op {op!r}")


def backward(loss: Node) -> ParameterSet:
    """Reverse-mode gradients of a scalar loss.

    Resets the grads of all reachable nodes, seeds the loss with 1.0, and
    accumulates vector-Jacobian products in reverse topological order.
    Returns gradients for every reachable parameter node (zeros when the
    parameter does not influence the loss).
    """
    if loss.value.ndim != 0:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.grad is None:
            continue
        _push_grad(node)
    grads: ParameterSet = {}
    seen_params: dict[str, Node] = {}
    for node in order:
        if node.op == "parameter":
            prior = seen_params.get(node.name)
            if prior is not None and prior is not node:
                raise UsageError(
                    f"backward: two distinct parameter nodes named {node.name!r}; "
                    "reuse one node per parameter")
            seen_params[node.name] = node
            grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads


def _acc(node: Node, g: Array) -> None:
    if node.grad is None:
        node.grad = g
    else:
        node.grad = node.grad + g


def _push_grad(node: Node) -> None:
    g = node.grad
    op = node.op
    if op in ("input", "parameter", "constant", "stop-gradient"):
        return
    a = node.inputs[0]
    if op == "matmul":
        b = node.inputs[1]
        av, bv = a.value, b.value
        if av.ndim == 2 and bv.ndim == 2:
            _acc(a, g @ bv.T)
            _acc(b, av.T @ g)
        elif av.ndim == 1 and bv.ndim == 2:
            _acc(a, bv @ g)
            _acc(b, np.outer(av, g))
        else:  # matrix @ vector
            _acc(a, np.outer(g, bv))
            _acc(b, av.T @ g)
    elif op == "transpose":
        _acc(a, g.T)
    elif op == "add":
        b = node.inputs[1]
        _acc(a, g)
        _acc(b, g.sum(axis=0) if node.meta["bias"] else g)
    elif op == "mul":
        b = node.inputs[1]
        _acc(a, g * b.value)
        _acc(b, g * a.value)
    elif op == "scale":
        _acc(a, g * node.meta["s"])
    elif op == "negate":
        _acc(a, -g)
    elif op == "tanh":
        _acc(a, g * (1.0 - node.value * node.value))
    elif op == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            _acc(a, g / a.value)
    elif op == "sum":
        _acc(a, np.full_like(a.value, float(g)))
    elif op == "dot":
        b = node.inputs[1]
        _acc(a, g * b.value)
        _acc(b, g * a.value)
    elif op == "slice":
        ga = np.zeros_like(a.value)
        ga[..., node.meta["start"]:node.meta["stop"]] = g
        _acc(a, ga)
    elif op == "concat":
        offset = 0
        for inp, width in zip(node.inputs, node.meta["widths"]):
            _acc(inp, g[..., offset:offset + width])
            offset += width
    elif op == "vstack":
        offset = 0
        for inp, rows, vec in zip(node.inputs, node.meta["rows"], node.meta["vector"]):
            piece = g[offset:offset + rows]
            _acc(inp, piece[0] if vec else piece)
            offset += rows
    elif op == "row-softmax":
        p = node.value
        _acc(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    elif op == "straight-through-select":
        codebook = node.inputs[1]
        idx = node.meta["idx"]
        cv = codebook.value
        # Hard path: upstream goes straight to the selected rows.
        gc = np.zeros_like(cv)
        np.add.at(gc, idx, g)
        _acc(codebook, gc)
        # Soft path: through softmax(scores) times the codebook.
        p = softmax_rows(a.value)
        gp = g @ cv.T
        _acc(a, p * (gp - (gp * p).sum(axis=-1, keepdims=True)))
    elif op == "l2-scores":
        codebook = node.inputs[1]
        zv, cv = a.value, codebook.value
        dist = -node.value
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0.0, g / dist, 0.0)
        if zv.ndim == 1:
            diff = zv[None, :] - cv
            _acc(a, -(w[:, None] * diff).sum(axis=0))
            _acc(codebook, w[:, None] * diff)
        else:
            diff = zv[:, None, :] - cv[None, :, :]
            weighted = w[:, :, None] * diff
            _acc(a, -weighted.sum(axis=1))
            _acc(codebook, weighted.sum(axis=0))
    elif op == "cosine-scores":
        codebook = node.inputs[1]
        zv, cv = a.value, codebook.value
        zn = np.linalg.norm(zv, axis=-1)
        cn = np.linalg.norm(cv, axis=-1)
        f = node.value
        if zv.ndim == 1:
            ga = (g / cn) @ cv / zn - (g * f).sum() * zv / (zn * zn)
            gc = np.outer(g / cn, zv / zn) - (g * f)[:, None] * cv / (cn * cn)[:, None]
        else:
            ga = ((g / cn[None, :]) @ cv) / zn[:, None] \
                - (g * f).sum(axis=1, keepdims=True) * zv / (zn * zn)[:, None]
            gc = ((g / zn[:, None]).T @ zv) / cn[:, None] \
                - ((g * f).sum(axis=0))[:, None] * cv / (cn * cn)[:, None]
        _acc(a, ga)
        _acc(codebook, gc)
    elif op == "take-rows":
        ga = np.zeros_like(a.value)
        np.add.at(ga, node.meta["idx"], g)
        _acc(a, ga)
    elif op == "take-per-row":
        ga = np.zeros_like(a.value)
        np.add.at(ga, (np.arange(a.value.shape[0]), node.meta["idx"]), g)
        _acc(a, ga)
    elif op == "ste-selected-prob":
        idx = node.meta["idx"]
        rows = np.arange(a.value.shape[0])
        routed = g if node.meta["mode"] == "ste" else g / a.value[rows, idx]
        ga = np.zeros_like(a.value)
        np.add.at(ga, (rows, idx), routed)
        _acc(a, ga)
    else:
        raise UsageError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def central_differences(value_fn: Callable[[ParameterSet], float],
                        params: ParameterSet, eps: float) -> ParameterSet:
    """Central finite differences of a scalar function, element by element."""
    grads: ParameterSet = {}
    for name, base in params.items():
        g = np.zeros_like(base)
        flat = g.reshape(-1)
        for i in range(flat.size):
            bumped = dict(params)
            plus = base.copy().reshape(-1)
            plus[i] += eps
            bumped[name] = plus.reshape(base.shape)
            f_plus = value_fn(bumped)
            minus = base.copy().reshape(-1)
            minus[i] -= eps
            bumped[name] = minus.reshape(base.shape)
            f_minus = value_fn(bumped)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("central_differences: non-finite function value")
            flat[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(analytic: ParameterSet, reference: ParameterSet) -> float:
    """max over elements of |analytic - reference| / max(1, |reference|)."""
    worst = 0.0
    for name, ref in reference.items():
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(ref)
        err = np.abs(a - ref) / np.maximum(1.0, np.abs(ref))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def gradient_check(build: Callable[[ParameterSet], Node],
                   params: ParameterSet, eps: float = 1e-5) -> float:
    """Compare backward gradients against central finite differences.

    ``build`` must construct and return a scalar loss node from a parameter
    set; it is called once per perturbed point. Returns the max relative
    error. Graphs containing stop-gradient or straight-through ops report a
    large, expected mismatch rather than raising.
    """
    if not (1e-8 < eps < 1e-2):
        raise UsageError(f"gradient_check: eps {eps} outside (1e-8, 1e-2)")
    loss = build(params)
    if not np.isfinite(loss.value):
        raise NumericError("gradient_check: non-finite loss at the base point")
    analytic = backward(loss)

    def value_fn(p: ParameterSet) -> float:
        return float(build(p).value)

    numeric = central_differences(value_fn, params, eps)
    return max_relative_error(analytic, numeric)
