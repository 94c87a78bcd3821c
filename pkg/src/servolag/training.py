"""Loss functions and the Adam training loop.

The per-sample total loss is assembled symbolically: the network's mass and
potential graphs feed the generalized-force expressions, so reverse mode
through the assembled tape yields exact parameter gradients of losses that
contain dV/dq and dM/dq (mixed second-order derivatives).  The forward-
dynamics residual is expressed through the identity

    qdd_hat_f - qdd_f = -M_ff^{-1} (Q_hat_f - Q_f)

with the small inverse written via adjugate/determinant so it stays inside
the differentiable op set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from servolag.autodiff import graph as G
from servolag.autodiff.tape import TapeProgram
from servolag.errors import ConfigError, NumericalError
from servolag.network import NetworkConfig, NetworkParams, network_graph
from servolag.simulator import TrajectorySample

__all__ = [
    "LossConfig",
    "TrainConfig",
    "AdamState",
    "Batch",
    "batch_from_samples",
    "inverse_loss",
    "forward_loss",
    "power_loss_true",
    "power_loss_estimated",
    "LossProgram",
    "total_loss",
    "adam_step",
    "train",
]

POWER_MODES = ("true_power", "estimated_power", "off")


@dataclass(frozen=True)
class LossConfig:
    use_inverse: bool = True
    use_forward: bool = True
    power_mode: str = "true_power"
    reduction: str = "mean"

    def __post_init__(self):
        if not (self.use_inverse or self.use_forward):
            raise ConfigError("at least one of the inverse/forward losses "
                              "must be enabled")
        if self.power_mode not in POWER_MODES:
            raise ConfigError(f"power_mode must be one of {POWER_MODES}")
        if self.reduction != "mean":
            raise ConfigError("only mean reduction is supported")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 2048
    epochs: int = 10000
    seed: int = 42
    convergence_threshold: float = 1e-2

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and "
                              "weight_decay nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.convergence_threshold <= 0:
            raise ConfigError("convergence_threshold must be positive")


@dataclass
class AdamState:
    """First/second moment estimates per parameter tensor."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: NetworkParams) -> "AdamState":
        return cls(m={k: np.zeros_like(t) for k, t in params.tensors.items()},
                   v={k: np.zeros_like(t) for k, t in params.tensors.items()})


@dataclass
class Batch:
    """Arrays of states plus targets; Q_e targets are all-or-none."""

    q: np.ndarray           # (B, N) coordinates, [q_f; q_e] order
    qd: np.ndarray          # (B, N)
    qdd: np.ndarray         # (B, N)
    q_f_target: np.ndarray  # (B, n_f)
    q_e_target: np.ndarray | None  # (B, n_e) or None
    n_f: int

    def __len__(self) -> int:
        return self.q.shape[0]

    @property
    def has_qe(self) -> bool:
        return self.q_e_target is not None

    def slice(self, idx) -> "Batch":
        return Batch(self.q[idx], self.qd[idx], self.qdd[idx],
                     self.q_f_target[idx],
                     None if self.q_e_target is None else self.q_e_target[idx],
                     self.n_f)


def batch_from_samples(samples: list[TrajectorySample]) -> Batch:
    """Pendulum-cart samples (n_f = n_e = 1) as training arrays."""
    if not samples:
        raise ConfigError("empty sample list")
    have = [s.q_x is not None for s in samples]
    if any(have) and not all(have):
        raise ConfigError("Q_e must be present on all samples or none")
    q = np.array([[s.theta, s.x] for s in samples])
    qd = np.array([[s.theta_dot, s.x_dot] for s in samples])
    qdd = np.array([[s.theta_ddot, s.x_ddot] for s in samples])
    qf = np.array([[s.q_theta] for s in samples])
    qe = np.array([[s.q_x] for s in samples]) if all(have) else None
    return Batch(q, qd, qdd, qf, qe, n_f=1)


# ---------------------------------------------------------------------------
# plain array-level losses (reporting and tests)

def _mean_sq(residual: np.ndarray) -> float:
    residual = np.atleast_2d(residual)
    return float(np.mean(np.sum(residual * residual, axis=1)))


def inverse_loss(pred_q_f: np.ndarray, target_q_f: np.ndarray) -> float:
    if np.shape(pred_q_f) != np.shape(target_q_f):
        raise ConfigError("prediction/target shape mismatch")
    return _mean_sq(np.asarray(pred_q_f) - np.asarray(target_q_f))


def forward_loss(pred_qdd_f: np.ndarray, target_qdd_f: np.ndarray) -> float:
    if np.shape(pred_qdd_f) != np.shape(target_qdd_f):
        raise ConfigError("prediction/target shape mismatch")
    return _mean_sq(np.asarray(pred_qdd_f) - np.asarray(target_qdd_f))


def power_loss_true(pred_e_dot: np.ndarray, qd: np.ndarray,
                    q_f: np.ndarray, q_e: np.ndarray | None) -> float:
    if q_e is None:
        raise ConfigError("the true power loss requires Q_e targets")
    work = np.sum(qd * np.concatenate([q_f, q_e], axis=1), axis=1)
    return _mean_sq((np.asarray(pred_e_dot).reshape(-1) - work)[:, None])


def power_loss_estimated(pred_q_f: np.ndarray, target_q_f: np.ndarray,
                         qd_f: np.ndarray) -> float:
    """Reduced form: || qd_f . (Q_hat_f - Q_f) ||^2, mean over the batch.

    Substituting the predicted equivalent force into the power balance
    cancels every driven-coordinate term, leaving only the free ones (the
    printed unreduced expression is checked against this numerically in the
    test suite).
    """
    r = np.sum(np.asarray(qd_f) * (np.asarray(pred_q_f) - np.asarray(target_q_f)),
               axis=1)
    return _mean_sq(r[:, None])


# ---------------------------------------------------------------------------
# symbolic loss assembly

def _det(a: list[list[G.Node]]) -> G.Node:
    n = len(a)
    if n == 1:
        return a[0][0]
    total: G.Node | None = None
    for j in range(n):
        minor = [[a[r][c] for c in range(n) if c != j] for r in range(1, n)]
        term = G.hadamard(a[0][j], _det(minor))
        if j % 2:
            term = G.scale(term, -1.0)
        total = term if total is None else G.add(total, term)
    return total


def _adjugate(a: list[list[G.Node]]) -> list[list[G.Node]]:
    n = len(a)
    if n == 1:
        return [[G.constant(1.0)]]
    adj = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            minor = [[a[r][c] for c in range(n) if c != i]
                     for r in range(n) if r != j]
            m = _det(minor)
            adj[i][j] = m if (i + j) % 2 == 0 else G.scale(m, -1.0)
    return adj


class LossProgram:
    """Tape evaluating every enabled loss term and its parameter gradient.

    One program is specialized per (network config, loss config, Q_e
    availability); per-sample quantities bind as batched inputs.
    """

    TERMS = ("inverse", "forward", "power", "qe")

    def __init__(self, config: NetworkConfig, loss: LossConfig, with_qe: bool,
                 n_f: int | None = None):
        if loss.power_mode == "true_power" and not with_qe:
            raise ConfigError("power_mode 'true_power' requires Q_e targets")
        self.config = config
        self.loss_config = loss
        self.with_qe = with_qe
        n_f = config.n_free if n_f is None else n_f
        n_e = config.n_coords - n_f
        net = network_graph(config)
        n = config.n_coords

        qd = [G.inp(f"qd{i}") for i in range(n)]
        qdd = [G.inp(f"qdd{i}") for i in range(n)]
        qf_t = [G.inp(f"qf{i}") for i in range(n_f)]
        qe_t = [G.inp(f"qe{i}") for i in range(n_e)] if with_qe else []

        def m_at(i, j):
            return net.m[(i, j) if i >= j else (j, i)]

        def dm_at(k, i, j):
            return net.dm[k][(i, j) if i >= j else (j, i)]

        # Mdot_ij = sum_k dM_ij/dq_k qd_k (unique entries only)
        mdot: dict[tuple[int, int], G.Node] = {}
        for (i, j) in net.m_keys:
            acc = None
            for k in range(n):
                term = G.hadamard(dm_at(k, i, j), qd[k])
                acc = term if acc is None else G.add(acc, term)
            mdot[(i, j)] = acc

        def mdot_at(i, j):
            return mdot[(i, j) if i >= j else (j, i)]

        # velocity products, shared across the rank-3 contractions
        qq = {(i, j): G.hadamard(qd[i], qd[j]) for i in range(n)
              for j in range(i + 1)}

        # rows of M qdd + Mdot qd - (1/2) qd^T dM/dq_k qd, then + dV/dq
        inner: list[G.Node] = []
        force: list[G.Node] = []
        for i in range(n):
            acc = None
            for j in range(n):
                acc_t = G.add(G.hadamard(m_at(i, j), qdd[j]),
                              G.hadamard(mdot_at(i, j), qd[j]))
                acc = acc_t if acc is None else G.add(acc, acc_t)
            c = None
            for j in range(n):
                for k in range(j + 1):
                    t = G.hadamard(dm_at(i, j, k), qq[(j, k)])
                    if j != k:
                        t = G.scale(t, 2.0)
                    c = t if c is None else G.add(c, t)
            acc = G.add(acc, G.scale(c, -0.5))
            inner.append(acc)
            force.append(G.add(acc, net.dv[i]))

        resid_f = [G.sub(force[i], qf_t[i]) for i in range(n_f)]

        def sum_nodes(nodes):
            acc = None
            for t in nodes:
                acc = t if acc is None else G.add(acc, t)
            return acc if acc is not None else G.constant(0.0)

        zero = G.constant(0.0)
        terms: dict[str, G.Node] = {}
        terms["inverse"] = (sum_nodes([G.square(r) for r in resid_f])
                            if loss.use_inverse else zero)

        if loss.use_forward:
            a = [[m_at(i, j) for j in range(n_f)] for i in range(n_f)]
            r_det = G.reciprocal(_det(a))
            adj = _adjugate(a)
            u = []
            for i in range(n_f):
                num = sum_nodes([G.hadamard(adj[i][j], resid_f[j])
                                 for j in range(n_f)])
                u.append(G.hadamard(num, r_det))
            terms["forward"] = sum_nodes([G.square(ui) for ui in u])
        else:
            terms["forward"] = zero

        if loss.power_mode == "true_power":
            t_dot = sum_nodes([G.hadamard(qd[i], inner[i]) for i in range(n)])
            v_dot = sum_nodes([G.hadamard(net.dv[i], qd[i]) for i in range(n)])
            e_dot = G.add(t_dot, v_dot)
            targets = qf_t + qe_t
            work = sum_nodes([G.hadamard(qd[i], targets[i]) for i in range(n)])
            terms["power"] = G.square(G.sub(e_dot, work))
        elif loss.power_mode == "estimated_power":
            r = sum_nodes([G.hadamard(qd[i], resid_f[i]) for i in range(n_f)])
            terms["power"] = G.square(r)
        else:
            terms["power"] = zero

        if with_qe:
            # both the inverse- and forward-style residuals on the driven
            # rows: the forward form divides by M_ee, which penalizes the
            # degenerate family member with a collapsed mass scale hard
            # enough that training escapes it
            resid_e = [G.sub(force[n_f + i], qe_t[i]) for i in range(n_e)]
            parts = []
            if loss.use_inverse:
                parts += [G.square(r) for r in resid_e]
            if loss.use_forward:
                a_e = [[m_at(n_f + i, n_f + j) for j in range(n_e)]
                       for i in range(n_e)]
                r_det_e = G.reciprocal(_det(a_e))
                adj_e = _adjugate(a_e)
                for i in range(n_e):
                    num = sum_nodes([G.hadamard(adj_e[i][j], resid_e[j])
                                     for j in range(n_e)])
                    parts.append(G.square(G.hadamard(num, r_det_e)))
            terms["qe"] = sum_nodes(parts)
        else:
            terms["qe"] = zero

        total = sum_nodes([terms[name] for name in self.TERMS
                           if terms[name] is not zero])
        outputs = [total] + [terms[name] for name in self.TERMS]
        inputs = [net.q] + qd + qdd + qf_t + qe_t
        self._param_nodes = list(net.params.values())
        self._tape = TapeProgram(outputs, inputs=inputs,
                                 params=self._param_nodes,
                                 grad_root=total,
                                 grad_targets=self._param_nodes)
        self.n_f, self.n_e = n_f, n_e

    def _bindings(self, batch: Batch) -> dict[str, np.ndarray]:
        if batch.n_f != self.n_f or batch.q.shape[1] != self.n_f + self.n_e:
            raise ConfigError("batch partition does not match the program")
        if self.with_qe and not batch.has_qe:
            raise ConfigError("program requires Q_e targets")
        b = {"q": batch.q}
        for i in range(self.n_f + self.n_e):
            b[f"qd{i}"] = batch.qd[:, i]
            b[f"qdd{i}"] = batch.qdd[:, i]
        for i in range(self.n_f):
            b[f"qf{i}"] = batch.q_f_target[:, i]
        if self.with_qe:
            for i in range(self.n_e):
                b[f"qe{i}"] = batch.q_e_target[:, i]
        return b

    def _unpack_terms(self, outs) -> dict[str, float]:
        vals = {"total": float(outs[0].mean())}
        for name, o in zip(self.TERMS, outs[1:]):
            vals[name] = float(o.mean())
        return vals

    def evaluate(self, params: NetworkParams, batch: Batch,
                 engine: str | None = None) -> dict[str, float]:
        outs, _ = self._tape.run(self._bindings(batch), params.tensors,
                                 engine=engine)
        return self._unpack_terms(outs)

    def gradient(self, params: NetworkParams, batch: Batch,
                 engine: str | None = None):
        """Mean loss terms and the gradient of the total w.r.t. parameters."""
        outs, grads = self._tape.run(self._bindings(batch), params.tensors,
                                     engine=engine, want_grads=True)
        scale = 1.0 / len(batch)
        grads = {k: g * scale for k, g in grads.items()}
        return self._unpack_terms(outs), grads


_PROGRAM_CACHE: dict[tuple, LossProgram] = {}


def loss_program(config: NetworkConfig, loss: LossConfig,
                 with_qe: bool) -> LossProgram:
    key = (config, loss, with_qe)
    prog = _PROGRAM_CACHE.get(key)
    if prog is None:
        prog = LossProgram(config, loss, with_qe)
        _PROGRAM_CACHE[key] = prog
    return prog


def total_loss(params: NetworkParams, batch: Batch, loss: LossConfig,
               engine: str | None = None):
    """Scalar total loss and its parameter gradient for one batch."""
    prog = loss_program(params.config, loss, batch.has_qe)
    terms, grads = prog.gradient(params, batch, engine=engine)
    return terms, grads


# ---------------------------------------------------------------------------
# optimizer and loop

def adam_step(params: NetworkParams, grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> NetworkParams:
    """Adam with bias correction and decoupled weight decay.

    The decay multiplies parameters by (1 - lr*wd) before the adaptive
    update, so it is not rescaled by the moment estimates.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    decay = 1.0 - cfg.learning_rate * cfg.weight_decay
    new = {}
    for name, p in params.tensors.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        new[name] = (p * decay
                     - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return NetworkParams(params.config, params.seed, new)


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[dict[str, float]] = field(default_factory=list)
    converged: bool = False

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else float("inf")


def train(params: NetworkParams, dataset: Batch, train_cfg: TrainConfig,
          loss_cfg: LossConfig, engine: str | None = None,
          log_every: int = 0) -> TrainResult:
    """Seeded epoch loop; stops at the epoch limit or once the epoch loss
    falls below the convergence threshold.

    Raises NumericalError naming the epoch, batch, and term if the loss
    leaves the reals.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    prog = loss_program(params.config, loss_cfg, dataset.has_qe)
    rng = np.random.default_rng(train_cfg.seed)
    state = AdamState.fresh(params)
    params = params.copy()
    result = TrainResult(params)
    n = len(dataset)
    bs = min(train_cfg.batch_size, n)
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        sums = dict.fromkeys(("total",) + LossProgram.TERMS, 0.0)
        for bi, start in enumerate(range(0, n, bs)):
            idx = perm[start:start + bs]
            terms, grads = prog.gradient(params, dataset.slice(idx),
                                         engine=engine)
            for name, val in terms.items():
                if not np.isfinite(val):
                    raise NumericalError(
                        f"non-finite {name} loss ({val}) at epoch {epoch}, "
                        f"batch {bi}")
                sums[name] += val * len(idx)
            params = adam_step(params, grads, state, train_cfg)
        row = {"epoch": epoch}
        row.update({name: sums[name] / n for name in sums})
        result.history.append(row)
        if log_every and epoch % log_every == 0:
            print(f"epoch {epoch}: total {row['total']:.6g}")
        if row["total"] < train_cfg.convergence_threshold:
            result.converged = True
            break
    result.params = params
    return result
