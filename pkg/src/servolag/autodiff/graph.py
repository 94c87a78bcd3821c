"""Dense-tensor computation graphs with derivatives that stay differentiable.

Values are C-contiguous float64 numpy arrays; a scalar is a 0-d array.
A graph is an immutable DAG of nodes drawn from a small, closed set of
operations: differentiating any graph produces a new graph built from the
same operations, so second-order derivatives are obtained by differentiating
twice.  Evaluation binds leaf values per call and never mutates the graph,
so one graph can be reused across samples and epochs (and evaluated
concurrently with distinct binding sets).

Derivative entry points:

* ``jvp``       -- tangent graph along one direction (forward mode).
* ``derive``    -- gradient/derivative graph w.r.t. one leaf.
* ``backward``  -- reverse-mode gradients of a scalar root (numeric, not a
                   graph; used for parameter gradients).
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from servolag.errors import ConfigError

__all__ = [
    "Node",
    "OP_KINDS",
    "inp",
    "parameter",
    "constant",
    "add",
    "sub",
    "matmul",
    "hadamard",
    "scale",
    "transpose",
    "softplus",
    "relu",
    "sigmoid",
    "sum_all",
    "square",
    "concat",
    "select",
    "reciprocal",
    "evaluate",
    "evaluate_many",
    "topo_order",
    "jvp",
    "derive",
    "backward",
    "finite_difference_check",
]

# "reciprocal" extends the minimal op set: the forward-dynamics residual
# needs an inverse of the free-free mass block inside a differentiated
# expression, and no combination of the other ops can produce 1/x.  The set
# remains closed under differentiation: d(1/x) = -(1/x)^2 dx.
OP_KINDS = frozenset({
    "input", "parameter", "constant",
    "add", "matmul", "hadamard", "scale", "transpose",
    "softplus", "relu", "sigmoid",
    "sum", "square", "concat", "select", "reciprocal",
})

_LEAF_OPS = ("input", "parameter", "constant")


class Node:
    """One operation in a computation graph.

    Nodes are immutable once constructed; shapes are inferred and checked at
    construction time.  Use the module-level builder functions instead of
    instantiating directly.
    """

    __slots__ = ("op", "parents", "shape", "name", "value", "factor")

    def __init__(self, op, parents=(), shape=(), name=None, value=None, factor=None):
        self.op = op
        self.parents = tuple(parents)
        self.shape = tuple(shape)
        self.name = name
        self.value = value
        self.factor = factor

    def __repr__(self):
        tag = self.name if self.name is not None else ""
        return f"Node({self.op}{':' + tag if tag else ''}, shape={self.shape})"


def _asarray(x) -> np.ndarray:
    # note: np.ascontiguousarray would promote 0-d arrays to 1-d
    a = np.asarray(x, dtype=np.float64, order="C")
    if not a.flags.c_contiguous:
        a = a.copy(order="C")
    return a


# ---------------------------------------------------------------------------
# builders

def inp(name: str, shape: Sequence[int] = ()) -> Node:
    return Node("input", shape=tuple(shape), name=name)


def parameter(name: str, shape: Sequence[int] = ()) -> Node:
    return Node("parameter", shape=tuple(shape), name=name)


def constant(value) -> Node:
    v = _asarray(value)
    return Node("constant", shape=v.shape, value=v)


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return Node("add", (a, b), a.shape)


def sub(a: Node, b: Node) -> Node:
    """a - b, expressed through the core op set."""
    return add(a, scale(b, -1.0))


def _matmul_shape(sa, sb):
    if len(sa) == 2 and len(sb) == 2:
        if sa[1] != sb[0]:
            raise ConfigError(f"matmul inner dim mismatch: {sa} @ {sb}")
        return (sa[0], sb[1])
    if len(sa) == 2 and len(sb) == 1:
        if sa[1] != sb[0]:
            raise ConfigError(f"matmul inner dim mismatch: {sa} @ {sb}")
        return (sa[0],)
    if len(sa) == 1 and len(sb) == 2:
        if sa[0] != sb[0]:
            raise ConfigError(f"matmul inner dim mismatch: {sa} @ {sb}")
        return (sb[1],)
    if len(sa) == 1 and len(sb) == 1:
        if sa[0] != sb[0]:
            raise ConfigError(f"matmul inner dim mismatch: {sa} @ {sb}")
        return ()
    raise ConfigError(f"matmul requires 1-d or 2-d operands, got {sa} @ {sb}")


def matmul(a: Node, b: Node) -> Node:
    return Node("matmul", (a, b), _matmul_shape(a.shape, b.shape))


def hadamard(a: Node, b: Node) -> Node:
    """Elementwise product; one operand may be scalar (broadcast)."""
    if a.shape == b.shape:
        return Node("hadamard", (a, b), a.shape)
    if a.shape == ():
        return Node("hadamard", (a, b), b.shape)
    if b.shape == ():
        return Node("hadamard", (a, b), a.shape)
    raise ConfigError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")


def scale(a: Node, factor: float) -> Node:
    return Node("scale", (a,), a.shape, factor=float(factor))


def transpose(a: Node) -> Node:
    if len(a.shape) != 2:
        raise ConfigError(f"transpose requires a 2-d operand, got {a.shape}")
    return Node("transpose", (a,), (a.shape[1], a.shape[0]))


def softplus(a: Node) -> Node:
    return Node("softplus", (a,), a.shape)


def relu(a: Node) -> Node:
    return Node("relu", (a,), a.shape)


def sigmoid(a: Node) -> Node:
    return Node("sigmoid", (a,), a.shape)


def sum_all(a: Node) -> Node:
    """Sum of all elements, yielding a scalar."""
    return Node("sum", (a,), ())


def square(a: Node) -> Node:
    return Node("square", (a,), a.shape)


def concat(parts: Sequence[Node]) -> Node:
    """Concatenate scalars and 1-d vectors into one vector."""
    if not parts:
        raise ConfigError("concat needs at least one operand")
    n = 0
    for p in parts:
        if len(p.shape) > 1:
            raise ConfigError(f"concat operands must be scalar or 1-d, got {p.shape}")
        n += 1 if p.shape == () else p.shape[0]
    return Node("concat", tuple(parts), (n,))


def select(gate: Node, a: Node, b: Node) -> Node:
    """Elementwise: a where gate > 0, else b.  No gradient flows to gate."""
    if not (gate.shape == a.shape == b.shape):
        raise ConfigError(
            f"select shape mismatch: {gate.shape}, {a.shape}, {b.shape}")
    return Node("select", (gate, a, b), a.shape)


def reciprocal(a: Node) -> Node:
    return Node("reciprocal", (a,), a.shape)


# ---------------------------------------------------------------------------
# evaluation

def topo_order(roots: Iterable[Node]) -> list[Node]:
    """Parents-before-children order over the union of the given roots."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _stable_softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _eval_node(node: Node, vals: dict[int, np.ndarray],
               bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    op = node.op
    if op in ("input", "parameter"):
        if node.name not in bindings:
            raise ValueError(f"unbound {op} node {node.name!r}")
        v = _asarray(bindings[node.name])
        if v.shape != node.shape:
            raise ConfigError(
                f"binding for {node.name!r} has shape {v.shape}, "
                f"declared {node.shape}")
        return v
    if op == "constant":
        return node.value
    p = [vals[id(q)] for q in node.parents]
    if op == "add":
        return p[0] + p[1]
    if op == "matmul":
        return np.matmul(p[0], p[1])
    if op == "hadamard":
        return p[0] * p[1]
    if op == "scale":
        return p[0] * node.factor
    if op == "transpose":
        return np.ascontiguousarray(p[0].T)
    if op == "softplus":
        return _stable_softplus(p[0])
    if op == "relu":
        return np.maximum(p[0], 0.0)
    if op == "sigmoid":
        return _stable_sigmoid(np.asarray(p[0]))
    if op == "sum":
        return np.asarray(np.sum(p[0]))
    if op == "square":
        return p[0] * p[0]
    if op == "concat":
        return np.concatenate([np.atleast_1d(v) for v in p])
    if op == "select":
        return np.where(p[0] > 0.0, p[1], p[2])
    if op == "reciprocal":
        return 1.0 / p[0]
    raise ConfigError(f"unknown op kind {op!r}")


def evaluate_many(roots: Sequence[Node],
                  bindings: Mapping[str, np.ndarray]) -> list[np.ndarray]:
    vals: dict[int, np.ndarray] = {}
    for node in topo_order(roots):
        vals[id(node)] = _eval_node(node, vals, bindings)
    return [vals[id(r)] for r in roots]


def evaluate(root: Node, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Value of the root node under the given leaf bindings."""
    return evaluate_many([root], bindings)[0]


# ---------------------------------------------------------------------------
# forward-mode differentiation (graph -> graph)

def _zeros_node(shape) -> Node:
    return constant(np.zeros(shape))


def jvp(roots: Sequence[Node], wrt: Node, direction: Node,
        _cache: dict[int, Node | None] | None = None) -> list[Node]:
    """Tangent graphs of ``roots`` for a perturbation of ``wrt`` along
    ``direction``.

    The tangent of each node is built from the same op kinds, so the result
    can be differentiated again.  ``None`` tangents (identically zero) are
    pruned during construction and materialized as zero constants only at
    the roots.  A ``_cache`` may be shared across calls with the same
    ``wrt``/``direction`` pair so tangents of common subgraphs are reused.
    """
    if direction.shape != wrt.shape:
        raise ConfigError(
            f"direction shape {direction.shape} != wrt shape {wrt.shape}")
    tan: dict[int, Node | None] = _cache if _cache is not None else {}
    tan[id(wrt)] = direction

    for node in topo_order(roots):
        if id(node) in tan:
            continue
        op = node.op
        if op in _LEAF_OPS:
            tan[id(node)] = None
            continue
        pt = [tan[id(p)] for p in node.parents]
        pv = node.parents
        t: Node | None
        if op == "add":
            if pt[0] is None and pt[1] is None:
                t = None
            elif pt[0] is None:
                t = pt[1]
            elif pt[1] is None:
                t = pt[0]
            else:
                t = add(pt[0], pt[1])
        elif op == "matmul":
            terms = []
            if pt[0] is not None:
                terms.append(matmul(pt[0], pv[1]))
            if pt[1] is not None:
                terms.append(matmul(pv[0], pt[1]))
            t = None if not terms else (terms[0] if len(terms) == 1
                                        else add(terms[0], terms[1]))
        elif op == "hadamard":
            terms = []
            if pt[0] is not None:
                terms.append(hadamard(pt[0], pv[1]))
            if pt[1] is not None:
                terms.append(hadamard(pv[0], pt[1]))
            t = None if not terms else (terms[0] if len(terms) == 1
                                        else add(terms[0], terms[1]))
        elif op == "scale":
            t = None if pt[0] is None else scale(pt[0], node.factor)
        elif op == "transpose":
            t = None if pt[0] is None else transpose(pt[0])
        elif op == "softplus":
            t = None if pt[0] is None else hadamard(sigmoid(pv[0]), pt[0])
        elif op == "relu":
            # derivative at exactly 0 is 0: select picks the zero branch
            t = None if pt[0] is None else select(pv[0], pt[0],
                                                  _zeros_node(node.shape))
        elif op == "sigmoid":
            if pt[0] is None:
                t = None
            else:
                s = sigmoid(pv[0])
                one = constant(np.ones(node.shape))
                t = hadamard(hadamard(s, add(one, scale(s, -1.0))), pt[0])
        elif op == "sum":
            t = None if pt[0] is None else sum_all(pt[0])
        elif op == "square":
            t = None if pt[0] is None else scale(hadamard(pv[0], pt[0]), 2.0)
        elif op == "concat":
            if all(x is None for x in pt):
                t = None
            else:
                parts = [x if x is not None else _zeros_node(p.shape)
                         for x, p in zip(pt, pv)]
                t = concat(parts)
        elif op == "select":
            # gate is non-differentiable
            if pt[1] is None and pt[2] is None:
                t = None
            else:
                ta = pt[1] if pt[1] is not None else _zeros_node(node.shape)
                tb = pt[2] if pt[2] is not None else _zeros_node(node.shape)
                t = select(pv[0], ta, tb)
        elif op == "reciprocal":
            if pt[0] is None:
                t = None
            else:
                r = reciprocal(pv[0])
                t = scale(hadamard(square(r), pt[0]), -1.0)
        else:
            raise ConfigError(f"unknown op kind {op!r}")
        tan[id(node)] = t

    return [tan[id(r)] if tan[id(r)] is not None else _zeros_node(r.shape)
            for r in roots]


def _contains(root: Node, target: Node) -> bool:
    return any(n is target for n in topo_order([root]))


def derive(graph: Node, wrt: Node) -> Node:
    """Graph evaluating the derivative of ``graph`` w.r.t. the leaf ``wrt``.

    For a scalar ``wrt`` the result has the shape of ``graph``; for a 1-d
    ``wrt`` the graph must be scalar and the result is the gradient vector.
    The returned graph is built from the core op kinds and can be passed to
    ``derive`` again.
    """
    if wrt.op not in ("input", "parameter"):
        raise ValueError("derive target must be an input or parameter node")
    if not _contains(graph, wrt):
        raise ValueError(f"node {wrt!r} does not occur in the graph")
    if wrt.shape == ():
        return jvp([graph], wrt, constant(1.0))[0]
    if len(wrt.shape) == 1:
        if graph.shape != ():
            raise ValueError(
                "derive w.r.t. a vector requires a scalar-valued graph; "
                "use jvp for directional derivatives of tensor graphs")
        n = wrt.shape[0]
        cols = []
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            cols.append(jvp([graph], wrt, constant(e))[0])
        return concat(cols)
    raise ValueError(f"derive w.r.t. rank-{len(wrt.shape)} nodes is not supported")


# ---------------------------------------------------------------------------
# reverse mode (numeric gradients of a scalar root)

def backward(root: Node, targets: Sequence[Node],
             bindings: Mapping[str, np.ndarray]) -> dict[Node, np.ndarray]:
    """Gradients of a scalar root w.r.t. the given leaf nodes.

    Returns a map from each target node to an array of the target's shape.
    Targets the root does not depend on get zero gradients.
    """
    if root.shape != ():
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    order = topo_order([root])
    vals: dict[int, np.ndarray] = {}
    for node in order:
        vals[id(node)] = _eval_node(node, vals, bindings)

    cot: dict[int, np.ndarray] = {id(root): np.asarray(1.0)}

    def acc(node: Node, g: np.ndarray) -> None:
        k = id(node)
        if k in cot:
            cot[k] = cot[k] + g
        else:
            cot[k] = g

    for node in reversed(order):
        g = cot.get(id(node))
        if g is None or node.op in _LEAF_OPS:
            continue
        op = node.op
        pv = [vals[id(p)] for p in node.parents]
        ps = node.parents
        if op == "add":
            acc(ps[0], g)
            acc(ps[1], g)
        elif op == "matmul":
            a, b = pv
            if a.ndim == 2 and b.ndim == 2:
                acc(ps[0], g @ b.T)
                acc(ps[1], a.T @ g)
            elif a.ndim == 2 and b.ndim == 1:
                acc(ps[0], np.outer(g, b))
                acc(ps[1], a.T @ g)
            elif a.ndim == 1 and b.ndim == 2:
                acc(ps[0], b @ g)
                acc(ps[1], np.outer(a, g))
            else:
                acc(ps[0], g * b)
                acc(ps[1], g * a)
        elif op == "hadamard":
            a, b = pv
            ga, gb = g * b, g * a
            acc(ps[0], ga if a.shape == ga.shape else np.asarray(np.sum(ga)))
            acc(ps[1], gb if b.shape == gb.shape else np.asarray(np.sum(gb)))
        elif op == "scale":
            acc(ps[0], g * node.factor)
        elif op == "transpose":
            acc(ps[0], np.ascontiguousarray(g.T))
        elif op == "softplus":
            acc(ps[0], _stable_sigmoid(pv[0]) * g)
        elif op == "relu":
            acc(ps[0], np.where(pv[0] > 0.0, g, 0.0))
        elif op == "sigmoid":
            s = _stable_sigmoid(pv[0])
            acc(ps[0], s * (1.0 - s) * g)
        elif op == "sum":
            acc(ps[0], np.broadcast_to(g, pv[0].shape).copy())
        elif op == "square":
            acc(ps[0], 2.0 * pv[0] * g)
        elif op == "concat":
            off = 0
            for p, v in zip(ps, pv):
                n = 1 if v.ndim == 0 else v.shape[0]
                piece = g[off:off + n]
                acc(p, np.asarray(piece[0]) if v.ndim == 0 else piece)
                off += n
        elif op == "select":
            mask = pv[0] > 0.0
            acc(ps[1], np.where(mask, g, 0.0))
            acc(ps[2], np.where(mask, 0.0, g))
        elif op == "reciprocal":
            r = 1.0 / pv[0]
            acc(ps[0], -(r * r) * g)
        else:
            raise ConfigError(f"unknown op kind {op!r}")

    out: dict[Node, np.ndarray] = {}
    for t in targets:
        g = cot.get(id(t))
        if g is None:
            g = np.zeros(t.shape)
        out[t] = np.asarray(g, dtype=np.float64)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_difference_check(graph: Node, node: Node, step: float,
                            bindings: Mapping[str, np.ndarray]) -> float:
    """Max over components of |analytic - central difference| / (|analytic| + step).

    ``node`` must be a bound input or parameter leaf; central differences
    perturb one component of its binding at a time.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    analytic = evaluate(derive(graph, node), bindings)
    base = _asarray(bindings[node.name])
    flat = base.ravel()
    fd = np.zeros_like(analytic)
    fd_flat = fd.reshape(-1) if fd.ndim else None
    for k in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[k] += step
        lo[k] -= step
        b_hi = dict(bindings)
        b_hi[node.name] = hi.reshape(base.shape)
        b_lo = dict(bindings)
        b_lo[node.name] = lo.reshape(base.shape)
        d = (evaluate(graph, b_hi) - evaluate(graph, b_lo)) / (2.0 * step)
        if base.shape == ():
            fd = np.asarray(d)
        else:
            # scalar graph over vector node: component k of the gradient
            fd_flat[k] = d
    err = np.abs(analytic - fd) / (np.abs(analytic) + step)
    return float(np.max(err)) if err.size else 0.0
