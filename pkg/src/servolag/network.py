"""Multiheaded network producing potential energy and mass-matrix factors.

One shared trunk maps the generalized coordinates q to a hidden feature
vector; three linear heads emit the potential energy V, the diagonal of the
Cholesky factor (clamped nonnegative by ReLU), and the strict lower
triangle.  The mass matrix M = L L^T + eps*I is then symmetric with minimum
eigenvalue >= eps for every q and every parameter setting, and the kinetic
energy (1/2) qd^T M qd is homogeneously quadratic in qd because q is the
network's only input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from servolag.autodiff import graph as G
from servolag.autodiff.tape import TapeProgram
from servolag.errors import ConfigError, ParseError

_MAGIC = b"SVLGPR01"


@dataclass(frozen=True)
class NetworkConfig:
    n_free: int
    n_external: int
    hidden: tuple[int, ...] = (64,)
    epsilon: float = 0.01
    activation: str = "softplus"

    def __post_init__(self):
        if self.n_free < 1:
            raise ConfigError("n_free must be >= 1")
        if self.n_external < 0:
            raise ConfigError("n_external must be >= 0")
        if self.epsilon <= 0.0:
            raise ConfigError("epsilon must be positive")
        if not self.hidden:
            raise ConfigError("at least one hidden layer is required")
        if self.activation != "softplus":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def n_coords(self) -> int:
        return self.n_free + self.n_external

    @property
    def n_lower(self) -> int:
        n = self.n_coords
        return n * (n - 1) // 2


@dataclass
class NetworkParams:
    config: NetworkConfig
    seed: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, self.seed,
                             {k: v.copy() for k, v in self.tensors.items()})


def tensor_layout(config: NetworkConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration (serialization) order."""
    layout = []
    fan_in = config.n_coords
    for i, width in enumerate(config.hidden):
        layout.append((f"layer{i}.W", (width, fan_in)))
        layout.append((f"layer{i}.b", (width,)))
        fan_in = width
    layout.append(("head_v.W", (1, fan_in)))
    layout.append(("head_v.b", (1,)))
    layout.append(("head_ldiag.W", (config.n_coords, fan_in)))
    layout.append(("head_ldiag.b", (config.n_coords,)))
    layout.append(("head_llower.W", (config.n_lower, fan_in)))
    layout.append(("head_llower.b", (config.n_lower,)))
    return layout


_LDIAG_BIAS_INIT = 0.5


def init_params(config: NetworkConfig, seed: int) -> NetworkParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    The one exception is the diagonal-head bias, initialized to a positive
    constant: with a zero bias the ReLU clamp can start (and stay) at zero
    over the whole input range for some seeds, which freezes the mass matrix
    at the epsilon floor and blocks training.
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_layout(config):
        if name.endswith(".W"):
            bound = 1.0 / np.sqrt(shape[1])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name == "head_ldiag.b":
            tensors[name] = np.full(shape, _LDIAG_BIAS_INIT)
        else:
            tensors[name] = np.zeros(shape)
    return NetworkParams(config, int(seed), tensors)


def lower_index(i: int, j: int) -> int:
    """Row-major position of strict-lower-triangle entry (i, j), i > j."""
    return i * (i - 1) // 2 + j


def assemble_cholesky(l_diag: np.ndarray, l_lower: np.ndarray) -> np.ndarray:
    """Place the head outputs into a lower-triangular matrix.

    l_diag fills the diagonal; l_lower fills the strict lower triangle in
    row-major order (an arbitrary but fixed convention).
    """
    l_diag = np.asarray(l_diag, dtype=np.float64)
    l_lower = np.asarray(l_lower, dtype=np.float64)
    n = l_diag.shape[0]
    if l_lower.shape != (n * (n - 1) // 2,):
        raise ConfigError(
            f"l_lower must have length n(n-1)/2 = {n * (n - 1) // 2}, "
            f"got {l_lower.shape}")
    L = np.zeros((n, n))
    for i in range(n):
        L[i, i] = l_diag[i]
        for j in range(i):
            L[i, j] = l_lower[lower_index(i, j)]
    return L


def mass_matrix(L: np.ndarray, epsilon: float) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    return L @ L.T + epsilon * np.eye(L.shape[0])


# ---------------------------------------------------------------------------
# symbolic network

class NetworkGraph:
    """Computation graphs for the network outputs and their q-derivatives.

    Exposes scalar graphs for every unique mass-matrix entry M_ij and its
    directional derivatives dM_ij/dq_k, which is what both the provider tape
    and the training losses consume.  Graphs are built once per config and
    evaluated with fresh bindings.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config
        n = config.n_coords
        self.q = G.inp("q", (n,))
        self.params = {name: G.parameter(name, shape)
                       for name, shape in tensor_layout(config)}

        h: G.Node = self.q
        for i in range(len(config.hidden)):
            z = G.add(G.matmul(self.params[f"layer{i}.W"], h),
                      self.params[f"layer{i}.b"])
            h = G.softplus(z)
        self.v = G.sum_all(G.add(G.matmul(self.params["head_v.W"], h),
                                 self.params["head_v.b"]))
        self.l_diag = G.relu(G.add(G.matmul(self.params["head_ldiag.W"], h),
                                   self.params["head_ldiag.b"]))
        self.l_lower = G.add(G.matmul(self.params["head_llower.W"], h),
                             self.params["head_llower.b"])

        def unit(n_, k_):
            e = np.zeros(n_)
            e[k_] = 1.0
            return e

        ld = [G.matmul(G.constant(unit(n, i)), self.l_diag) for i in range(n)]
        ll = [G.matmul(G.constant(unit(config.n_lower, k)), self.l_lower)
              for k in range(config.n_lower)]

        def l_entry(i, j):
            if i == j:
                return ld[i]
            return ll[lower_index(i, j)]

        # unique entries of M = L L^T + eps I as scalar graphs, keyed (i, j), i >= j
        self.m: dict[tuple[int, int], G.Node] = {}
        for i in range(n):
            for j in range(i + 1):
                terms = []
                for k in range(j + 1):
                    a, b = l_entry(i, k), l_entry(j, k)
                    terms.append(G.square(a) if a is b else G.hadamard(a, b))
                s = terms[0]
                for t in terms[1:]:
                    s = G.add(s, t)
                if i == j:
                    s = G.add(s, G.constant(config.epsilon))
                self.m[(i, j)] = s

        # directional derivatives along each coordinate axis
        self.dv: list[G.Node] = []
        self.dm: list[dict[tuple[int, int], G.Node]] = []
        self.dl_diag: list[G.Node] = []
        self.dl_lower: list[G.Node] = []
        keys = sorted(self.m)
        for k in range(n):
            roots = [self.v, self.l_diag, self.l_lower] + [self.m[key] for key in keys]
            tans = G.jvp(roots, self.q, G.constant(unit(n, k)))
            self.dv.append(tans[0])
            self.dl_diag.append(tans[1])
            self.dl_lower.append(tans[2])
            self.dm.append({key: t for key, t in zip(keys, tans[3:])})

        self.dv_vec = G.concat(self.dv)
        self.m_keys = keys


_GRAPH_CACHE: dict[NetworkConfig, NetworkGraph] = {}


def network_graph(config: NetworkConfig) -> NetworkGraph:
    g = _GRAPH_CACHE.get(config)
    if g is None:
        g = NetworkGraph(config)
        _GRAPH_CACHE[config] = g
    return g


@dataclass
class NetworkOutput:
    v: float
    l_diag: np.ndarray
    l_lower: np.ndarray
    dv_dq: np.ndarray
    dl_dq: np.ndarray   # [k, i, j] = d L_ij / d q_k


def forward(params: NetworkParams, q: np.ndarray) -> NetworkOutput:
    """Evaluate the network and its input-Jacobians at one configuration q."""
    q = np.asarray(q, dtype=np.float64)
    cfg = params.config
    n = cfg.n_coords
    if q.shape != (n,):
        raise ValueError(f"q must have shape ({n},), got {q.shape}")
    g = network_graph(cfg)
    bind = dict(params.tensors)
    bind["q"] = q
    roots = [g.v, g.l_diag, g.l_lower, g.dv_vec] + g.dl_diag + g.dl_lower
    vals = G.evaluate_many(roots, bind)
    v, l_diag, l_lower, dv = vals[:4]
    dl = np.zeros((n, n, n))
    for k in range(n):
        dl[k] = assemble_cholesky(vals[4 + k], vals[4 + n + k])
    return NetworkOutput(float(v), l_diag, l_lower, dv, dl)


# ---------------------------------------------------------------------------
# provider: batched (M, dM/dq, V, dV/dq) evaluation for the dynamics layer

class NetworkProvider:
    """Evaluates (M, dM_dq, V, dV_dq) from trained parameters.

    Presents the same call signature as the analytic oracle so the dynamics
    layer can consume either interchangeably.
    """

    def __init__(self, params: NetworkParams, engine: str | None = None):
        self.params = params
        self.engine = engine
        cfg = params.config
        g = network_graph(cfg)
        keys = g.m_keys
        outputs = [g.v, g.dv_vec]
        outputs += [g.m[key] for key in keys]
        for k in range(cfg.n_coords):
            outputs += [g.dm[k][key] for key in keys]
        self._keys = keys
        self._tape = TapeProgram(outputs, inputs=[g.q],
                                 params=list(g.params.values()))
        self.n = cfg.n_coords

    def batch(self, qs: np.ndarray):
        """qs: (B, n) -> (M (B,n,n), dM (B,n,n,n), V (B,), dV (B,n))."""
        qs = np.asarray(qs, dtype=np.float64)
        outs, _ = self._tape.run({"q": qs}, self.params.tensors,
                                 engine=self.engine)
        B = qs.shape[0]
        n = self.n
        v = outs[0].reshape(B)
        dv = outs[1]
        M = np.zeros((B, n, n))
        dM = np.zeros((B, n, n, n))
        pos = 2
        for (i, j) in self._keys:
            M[:, i, j] = M[:, j, i] = outs[pos].reshape(B)
            pos += 1
        for k in range(n):
            for (i, j) in self._keys:
                dM[:, k, i, j] = dM[:, k, j, i] = outs[pos].reshape(B)
                pos += 1
        return M, dM, v, dv

    def __call__(self, q: np.ndarray):
        M, dM, v, dv = self.batch(np.asarray(q, dtype=np.float64)[None, :])
        return M[0], dM[0], float(v[0]), dv[0]


# ---------------------------------------------------------------------------
# serialization: versioned header + raw little-endian float64 tensors

def save_params(params: NetworkParams, path) -> None:
    cfg = params.config
    header = {
        "format": 1,
        "config": {
            "n_free": cfg.n_free,
            "n_external": cfg.n_external,
            "hidden": list(cfg.hidden),
            "epsilon": cfg.epsilon,
            "activation": cfg.activation,
        },
        "seed": params.seed,
        "tensors": [[name, list(shape)] for name, shape in tensor_layout(cfg)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        for name, _ in tensor_layout(cfg):
            f.write(np.ascontiguousarray(params.tensors[name], dtype="<f8").tobytes())


def load_params(path, expect_config: NetworkConfig | None = None) -> NetworkParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != _MAGIC:
        raise ParseError(f"{path}: not a parameter file (bad magic)")
    if len(raw) < 12:
        raise ParseError(f"{path}: truncated header")
    hlen = int(np.frombuffer(raw[8:12], dtype=np.uint32)[0])
    if len(raw) < 12 + hlen:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: malformed header ({exc})") from exc
    c = header["config"]
    config = NetworkConfig(n_free=int(c["n_free"]), n_external=int(c["n_external"]),
                           hidden=tuple(c["hidden"]), epsilon=float(c["epsilon"]),
                           activation=c["activation"])
    if expect_config is not None and config != expect_config:
        raise ConfigError(
            f"{path}: parameter file config {config} does not match "
            f"expected {expect_config}")
    tensors: dict[str, np.ndarray] = {}
    off = 12 + hlen
    for name, shape in header["tensors"]:
        shape = tuple(int(s) for s in shape)
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise ParseError(f"{path}: truncated tensor data for {name!r}")
        tensors[name] = np.frombuffer(
            raw[off:off + nbytes], dtype="<f8").reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise ParseError(f"{path}: {len(raw) - off} trailing bytes")
    expected = tensor_layout(config)
    if [(n, tuple(t.shape)) for n, t in tensors.items()] != expected:
        raise ParseError(f"{path}: tensor list does not match config layout")
    return NetworkParams(config, int(header["seed"]), tensors)
