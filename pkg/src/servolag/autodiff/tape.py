"""Tape compiler and executors for computation graphs.

A graph is flattened once into a linear instruction program over fixed
float64 slots.  The program can then be executed many times with fresh leaf
bindings, optionally over a leading batch axis, by one of two engines:

* ``"compiled"`` -- the Cython executor in :mod:`servolag._tapecore`,
  looping over samples in C (fast single-sample latency).
* ``"python"``   -- a numpy executor that vectorizes over the batch axis.

Both engines run the identical instruction list, so they agree to rounding.
The compiled engine is preferred when the extension built; the numpy engine
is the always-available fallback.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from servolag.autodiff import graph as G
from servolag.errors import ConfigError

try:
    from servolag import _tapecore
except ImportError:  # extension not built; numpy fallback only
    _tapecore = None

__all__ = ["TapeProgram", "available_engines", "default_engine"]

# instruction opcodes (shared with _tapecore.pyx)
ADD, MATMUL, HAD, SCALE, TRANS, SOFTPLUS, RELU, SIGMOID = range(8)
SUM, SQUARE, SELECT, COPYAT, RECIP = range(8, 13)

_SIMPLE_UNARY = {"softplus": SOFTPLUS, "relu": RELU, "sigmoid": SIGMOID,
                 "square": SQUARE, "reciprocal": RECIP}


def available_engines() -> list[str]:
    return ["compiled", "python"] if _tapecore is not None else ["python"]


def default_engine() -> str:
    return "compiled" if _tapecore is not None else "python"


def _size(shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


class TapeProgram:
    """A compiled graph: instruction list plus slot layout.

    Parameters
    ----------
    outputs:
        Nodes whose values the program returns, in order.
    inputs:
        Leaf nodes bound per sample (batched axis 0 at run time).
    params:
        Leaf nodes bound once per call (shared across the batch).
    grad_root:
        Scalar node (must be one of ``outputs``) whose gradient w.r.t.
        ``grad_targets`` the backward pass accumulates, summed over the batch.
    """

    def __init__(self, outputs: Sequence[G.Node], inputs: Sequence[G.Node],
                 params: Sequence[G.Node] = (), grad_root: G.Node | None = None,
                 grad_targets: Sequence[G.Node] = ()):
        self.output_nodes = list(outputs)
        self.input_nodes = list(inputs)
        self.param_nodes = list(params)
        self.grad_root = grad_root
        self.grad_targets = list(grad_targets)
        if grad_root is not None and grad_root.shape != ():
            raise ConfigError("grad_root must be scalar")
        if grad_root is not None and all(o is not grad_root for o in outputs):
            raise ConfigError("grad_root must be one of the outputs")
        self._compile()

    # -- compilation --------------------------------------------------------

    def _compile(self) -> None:
        order = G.topo_order(self.output_nodes)
        declared = {id(n): n for n in self.input_nodes + self.param_nodes}
        slot_of: dict[int, int] = {}
        shapes: list[tuple[int, ...]] = []
        for node in order:
            if node.op in ("input", "parameter") and id(node) not in declared:
                raise ConfigError(
                    f"leaf {node.name!r} is in the graph but was not declared "
                    "as an input or parameter of the tape")
            slot_of[id(node)] = len(shapes)
            shapes.append(node.shape)
        self.slot_shapes = shapes
        self.slot_sizes = [_size(s) for s in shapes]
        off = np.zeros(len(shapes) + 1, dtype=np.int64)
        np.cumsum(self.slot_sizes, out=off[1:])
        self.slot_off = off[:-1].astype(np.int32)
        self.total_size = int(off[-1])

        # static buffer template: constants baked in, params patched per call
        self.static_buf = np.zeros(self.total_size, dtype=np.float64)
        self._param_slots: dict[str, int] = {}
        self._input_slots: dict[str, int] = {}
        param_ids = {id(n) for n in self.param_nodes}
        input_ids = {id(n) for n in self.input_nodes}
        for node in order:
            s = slot_of[id(node)]
            if node.op == "constant":
                o = self.slot_off[s]
                self.static_buf[o:o + self.slot_sizes[s]] = node.value.ravel()
            elif id(node) in param_ids:
                self._param_slots[node.name] = s
            elif id(node) in input_ids:
                self._input_slots[node.name] = s

        instrs: list[list[int]] = []
        instr_f: list[float] = []

        def emit(op, out, a=-1, b=-1, c=-1, i0=0, i1=0, i2=0, f=0.0):
            instrs.append([op, out, a, b, c, i0, i1, i2])
            instr_f.append(f)

        for node in order:
            op = node.op
            if op in ("input", "parameter", "constant"):
                continue
            out = slot_of[id(node)]
            ps = [slot_of[id(p)] for p in node.parents]
            n_out = self.slot_sizes[out]
            if op == "add":
                emit(ADD, out, ps[0], ps[1], i0=n_out)
            elif op == "matmul":
                sa, sb = node.parents[0].shape, node.parents[1].shape
                m = sa[0] if len(sa) == 2 else 0
                n = sa[-1]
                p = sb[1] if len(sb) == 2 else 0
                emit(MATMUL, out, ps[0], ps[1], i0=m, i1=n, i2=p)
            elif op == "hadamard":
                case = 0
                if node.parents[0].shape == () and node.parents[1].shape != ():
                    case = 1
                elif node.parents[1].shape == () and node.parents[0].shape != ():
                    case = 2
                emit(HAD, out, ps[0], ps[1], i0=case, i1=n_out)
            elif op == "scale":
                emit(SCALE, out, ps[0], i0=n_out, f=node.factor)
            elif op == "transpose":
                r, c = node.parents[0].shape
                emit(TRANS, out, ps[0], i0=r, i1=c)
            elif op in _SIMPLE_UNARY:
                emit(_SIMPLE_UNARY[op], out, ps[0], i0=n_out)
            elif op == "sum":
                emit(SUM, out, ps[0], i0=self.slot_sizes[ps[0]])
            elif op == "concat":
                o = 0
                for p, pnode in zip(ps, node.parents):
                    n = self.slot_sizes[p]
                    emit(COPYAT, out, p, i0=o, i1=n)
                    o += n
            elif op == "select":
                emit(SELECT, out, ps[0], ps[1], ps[2], i0=n_out)
            else:
                raise ConfigError(f"cannot compile op kind {op!r}")

        self.instrs = np.asarray(instrs, dtype=np.int32).reshape(-1, 8)
        self.instr_f = np.asarray(instr_f, dtype=np.float64)
        self.out_slots = [slot_of[id(n)] for n in self.output_nodes]
        self.root_slot = (slot_of[id(self.grad_root)]
                          if self.grad_root is not None else -1)
        # targets absent from the graph get zero gradients (slot -1)
        self.grad_slots = [slot_of.get(id(t), -1) for t in self.grad_targets]

    # -- binding helpers ----------------------------------------------------

    def _pack_inputs(self, inputs: Mapping[str, np.ndarray]) -> tuple[np.ndarray, int]:
        batch = None
        cols = []
        for node in self.input_nodes:
            if node.name not in self._input_slots:
                continue  # declared but unused by these outputs
            try:
                a = np.asarray(inputs[node.name], dtype=np.float64)
            except KeyError:
                raise ValueError(f"missing binding for input {node.name!r}") from None
            if a.shape[1:] != node.shape:
                raise ConfigError(
                    f"input {node.name!r}: expected (batch,)+{node.shape}, "
                    f"got {a.shape}")
            if batch is None:
                batch = a.shape[0]
            elif a.shape[0] != batch:
                raise ConfigError("inconsistent batch sizes across inputs")
            cols.append((self._input_slots[node.name], a.reshape(batch, -1)))
        if batch is None:
            batch = 1
        return cols, batch

    def _patch_params(self, params: Mapping[str, np.ndarray] | None) -> np.ndarray:
        buf = self.static_buf.copy()
        for node in self.param_nodes:
            s = self._param_slots.get(node.name)
            if s is None:
                continue
            if params is None or node.name not in params:
                raise ValueError(f"missing binding for parameter {node.name!r}")
            a = np.asarray(params[node.name], dtype=np.float64)
            if a.shape != node.shape:
                raise ConfigError(
                    f"parameter {node.name!r}: expected {node.shape}, got {a.shape}")
            o = self.slot_off[s]
            buf[o:o + self.slot_sizes[s]] = a.ravel()
        return buf

    # -- execution ----------------------------------------------------------

    def run(self, inputs: Mapping[str, np.ndarray],
            params: Mapping[str, np.ndarray] | None = None,
            engine: str | None = None, want_grads: bool = False):
        """Execute the program over a batch.

        ``inputs`` maps input names to ``(batch,) + shape`` arrays; ``params``
        maps parameter names to plain ``shape`` arrays.  Returns
        ``(outputs, grads)`` where outputs mirror the output nodes with a
        leading batch axis and grads (if requested) map each gradient
        target's name to the batch-summed gradient.
        """
        eng = engine or default_engine()
        if eng == "compiled" and _tapecore is None:
            raise ConfigError("compiled engine requested but the extension "
                              "is not available")
        if want_grads and self.grad_root is None:
            raise ValueError("program was compiled without a gradient root")
        cols, batch = self._pack_inputs(inputs)
        static = self._patch_params(params)
        if eng == "compiled":
            outs, grads = self._run_compiled(cols, batch, static, want_grads)
        elif eng == "python":
            outs, grads = self._run_numpy(cols, batch, static, want_grads)
        else:
            raise ConfigError(f"unknown engine {eng!r}")
        shaped = [o.reshape((batch,) + self.slot_shapes[s])
                  for o, s in zip(outs, self.out_slots)]
        named = None
        if want_grads:
            named = {}
            for t, g in zip(self.grad_targets, grads):
                named[t.name] = g.reshape(t.shape)
        return shaped, named

    # numpy engine: every slot value is a (batch, size) array; parameters and
    # constants are broadcast views, so reverse-mode contributions can be
    # summed over the batch at the end.
    def _run_numpy(self, cols, batch, static, want_grads):
        S = len(self.slot_sizes)
        vals: list[np.ndarray | None] = [None] * S
        for s in range(S):
            o = self.slot_off[s]
            seg = static[o:o + self.slot_sizes[s]]
            vals[s] = np.broadcast_to(seg, (batch, self.slot_sizes[s]))
        for s, a in cols:
            vals[s] = a

        ins = self.instrs
        for k in range(ins.shape[0]):
            op, out, a, b, c, i0, i1, i2 = (int(x) for x in ins[k])
            if op == ADD:
                vals[out] = vals[a] + vals[b]
            elif op == MATMUL:
                vals[out] = self._np_matmul(vals[a], vals[b], i0, i1, i2, batch)
            elif op == HAD:
                vals[out] = vals[a] * vals[b]
            elif op == SCALE:
                vals[out] = vals[a] * self.instr_f[k]
            elif op == TRANS:
                v = vals[a].reshape(batch, i0, i1).swapaxes(1, 2)
                vals[out] = np.ascontiguousarray(v).reshape(batch, -1)
            elif op == SOFTPLUS:
                vals[out] = np.logaddexp(0.0, vals[a])
            elif op == RELU:
                vals[out] = np.maximum(vals[a], 0.0)
            elif op == SIGMOID:
                vals[out] = _np_sigmoid(vals[a])
            elif op == SUM:
                vals[out] = vals[a].sum(axis=1, keepdims=True)
            elif op == SQUARE:
                vals[out] = vals[a] * vals[a]
            elif op == SELECT:
                vals[out] = np.where(vals[a] > 0.0, vals[b], vals[c])
            elif op == COPYAT:
                if vals[out] is None or vals[out].shape[0] != batch \
                        or not vals[out].flags.writeable:
                    vals[out] = np.empty((batch, self.slot_sizes[out]))
                vals[out][:, i0:i0 + i1] = vals[a]
            elif op == RECIP:
                vals[out] = 1.0 / vals[a]

        outs = [np.ascontiguousarray(vals[s]) for s in self.out_slots]
        if not want_grads:
            return outs, None

        cot: list[np.ndarray | None] = [None] * S

        def acc(slot, g):
            if cot[slot] is None:
                cot[slot] = g.copy() if isinstance(g, np.ndarray) else g
            else:
                cot[slot] = cot[slot] + g

        acc(self.root_slot, np.ones((batch, 1)))
        for k in range(ins.shape[0] - 1, -1, -1):
            op, out, a, b, c, i0, i1, i2 = (int(x) for x in ins[k])
            g = cot[out]
            if g is None:
                continue
            if op == ADD:
                acc(a, g)
                acc(b, g)
            elif op == MATMUL:
                ga, gb = self._np_matmul_vjp(g, vals[a], vals[b], i0, i1, i2, batch)
                acc(a, ga)
                acc(b, gb)
            elif op == HAD:
                acc(a, (g * vals[b]) if i0 != 1 else (g * vals[b]).sum(1, keepdims=True))
                acc(b, (g * vals[a]) if i0 != 2 else (g * vals[a]).sum(1, keepdims=True))
            elif op == SCALE:
                acc(a, g * self.instr_f[k])
            elif op == TRANS:
                v = g.reshape(batch, i1, i0).swapaxes(1, 2)
                acc(a, np.ascontiguousarray(v).reshape(batch, -1))
            elif op == SOFTPLUS:
                acc(a, _np_sigmoid(vals[a]) * g)
            elif op == RELU:
                acc(a, np.where(vals[a] > 0.0, g, 0.0))
            elif op == SIGMOID:
                s = vals[out]
                acc(a, s * (1.0 - s) * g)
            elif op == SUM:
                acc(a, np.broadcast_to(g, (batch, i0)))
            elif op == SQUARE:
                acc(a, 2.0 * vals[a] * g)
            elif op == SELECT:
                mask = vals[a] > 0.0
                acc(b, np.where(mask, g, 0.0))
                acc(c, np.where(mask, 0.0, g))
            elif op == COPYAT:
                acc(a, g[:, i0:i0 + i1])
            elif op == RECIP:
                r = vals[out]
                acc(a, -(r * r) * g)

        grads = []
        for t, s in zip(self.grad_targets, self.grad_slots):
            g = cot[s] if s >= 0 else None
            if g is None:
                grads.append(np.zeros(_size(t.shape)))
            else:
                grads.append(np.asarray(g).sum(axis=0))
        return outs, grads

    @staticmethod
    def _np_matmul(a, b, m, n, p, batch):
        if m and p:
            r = np.matmul(a.reshape(batch, m, n), b.reshape(batch, n, p))
        elif m:
            r = np.einsum("zij,zj->zi", a.reshape(batch, m, n), b)
        elif p:
            r = np.einsum("zi,zij->zj", a, b.reshape(batch, n, p))
        else:
            r = np.einsum("zi,zi->z", a, b)[:, None]
        return np.ascontiguousarray(r.reshape(batch, -1))

    @staticmethod
    def _np_matmul_vjp(g, a, b, m, n, p, batch):
        if m and p:
            gm = g.reshape(batch, m, p)
            am = a.reshape(batch, m, n)
            bm = b.reshape(batch, n, p)
            ga = np.matmul(gm, bm.swapaxes(1, 2)).reshape(batch, -1)
            gb = np.matmul(am.swapaxes(1, 2), gm).reshape(batch, -1)
        elif m:
            am = a.reshape(batch, m, n)
            ga = np.einsum("zi,zj->zij", g, b).reshape(batch, -1)
            gb = np.einsum("zij,zi->zj", am, g)
        elif p:
            bm = b.reshape(batch, n, p)
            ga = np.einsum("zij,zj->zi", bm, g)
            gb = np.einsum("zi,zj->zij", a, g).reshape(batch, -1)
        else:
            ga = g * b
            gb = g * a
        return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

    def _run_compiled(self, cols, batch, static, want_grads):
        in_off = np.asarray([self.slot_off[s] for s, _ in cols], dtype=np.int32)
        in_size = np.asarray([a.shape[1] for _, a in cols], dtype=np.int32)
        if cols:
            in_data = np.ascontiguousarray(np.concatenate([a for _, a in cols], axis=1))
        else:
            in_data = np.zeros((batch, 0))
        out_off = np.asarray([self.slot_off[s] for s in self.out_slots], dtype=np.int32)
        out_size = np.asarray([self.slot_sizes[s] for s in self.out_slots], dtype=np.int32)
        out_data = np.empty((batch, int(out_size.sum())))
        root_off = int(self.slot_off[self.root_slot]) if want_grads else -1
        live = [s for s in self.grad_slots if s >= 0]
        grad_off = np.asarray([self.slot_off[s] for s in live], dtype=np.int32)
        grad_size = np.asarray([self.slot_sizes[s] for s in live], dtype=np.int32)
        grad_data = np.zeros(int(grad_size.sum()) if want_grads else 0)
        _tapecore.run_program(
            self.instrs, self.instr_f, self.slot_off, static,
            int(self.total_size),
            in_off, in_size, in_data,
            out_off, out_size, out_data,
            1 if want_grads else 0, root_off, grad_off, grad_size, grad_data)
        outs = []
        o = 0
        for s in self.out_slots:
            n = self.slot_sizes[s]
            outs.append(np.ascontiguousarray(out_data[:, o:o + n]))
            o += n
        grads = None
        if want_grads:
            grads = []
            o = 0
            for t, s in zip(self.grad_targets, self.grad_slots):
                if s < 0:
                    grads.append(np.zeros(_size(t.shape)))
                    continue
                n = self.slot_sizes[s]
                grads.append(grad_data[o:o + n].copy())
                o += n
        return outs, grads


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
