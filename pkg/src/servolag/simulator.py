"""Ground-truth generation for the position-driven pendulum cart.

A cart of mass m1 moves along a horizontal track; a bob of mass m2 hangs
from it on a massless string of length L.  The pendulum angle is the free
coordinate and the cart position the driven one, so q = [theta, x].  Closed
forms:

    M = [[m2 L^2,        m2 L cos(theta)],
         [m2 L cos(theta),   m1 + m2    ]]
    V = -m2 g L cos(theta)

Free swing obeys thetadd = -(g sin(theta) + xdd cos(theta)) / L, which the
trial integrator uses directly (independent of the dynamics layer, so the
two can cross-check each other).  Trials are integrated with an adaptive
Dormand-Prince 5(4) pair and sampled at every accepted step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from servolag import dynamics
from servolag.errors import ConfigError, NumericalError, ParseError

__all__ = [
    "PendulumCartParams",
    "PendulumCartOracle",
    "DriveTerm",
    "DriveFunction",
    "TrialSpec",
    "TrajectorySample",
    "dopri_step",
    "integrate_adaptive",
    "integrate_trial",
    "replay_force_driven",
    "run_trial",
    "build_dataset",
    "write_dataset",
    "read_dataset",
    "strip_qe",
    "CSV_HEADER",
]


@dataclass(frozen=True)
class PendulumCartParams:
    m1: float = 0.45      # cart mass, kg
    m2: float = 0.13      # bob mass, kg
    length: float = 1.5   # string length, m
    gravity: float = 9.8  # m/s^2

    def __post_init__(self):
        if min(self.m1, self.m2, self.length, self.gravity) <= 0.0:
            raise ConfigError("pendulum-cart parameters must be positive")


class PendulumCartOracle:
    """Analytic (M, dM_dq, V, dV_dq) provider; same interface as the network."""

    def __init__(self, params: PendulumCartParams):
        self.params = params

    def __call__(self, q: np.ndarray):
        theta = float(np.asarray(q)[0])
        p = self.params
        mL = p.m2 * p.length
        m = np.array([[mL * p.length, mL * math.cos(theta)],
                      [mL * math.cos(theta), p.m1 + p.m2]])
        dm = np.zeros((2, 2, 2))
        dm[0, 0, 1] = dm[0, 1, 0] = -mL * math.sin(theta)
        v = -mL * p.gravity * math.cos(theta)
        dv = np.array([mL * p.gravity * math.sin(theta), 0.0])
        return m, dm, v, dv

    def batch(self, qs: np.ndarray):
        qs = np.asarray(qs, dtype=np.float64)
        B = qs.shape[0]
        theta = qs[:, 0]
        p = self.params
        mL = p.m2 * p.length
        m = np.zeros((B, 2, 2))
        m[:, 0, 0] = mL * p.length
        m[:, 0, 1] = m[:, 1, 0] = mL * np.cos(theta)
        m[:, 1, 1] = p.m1 + p.m2
        dm = np.zeros((B, 2, 2, 2))
        dm[:, 0, 0, 1] = dm[:, 0, 1, 0] = -mL * np.sin(theta)
        v = -mL * p.gravity * np.cos(theta)
        dv = np.zeros((B, 2))
        dv[:, 0] = mL * p.gravity * np.sin(theta)
        return m, dm, v, dv


# ---------------------------------------------------------------------------
# drive functions

@dataclass(frozen=True)
class DriveTerm:
    amplitude: float        # m for position drives, N for force drives
    omega: float            # rad/s
    phase: float = 0.0      # rad
    decay: float = 0.0      # 1/s


@dataclass(frozen=True)
class DriveFunction:
    """Prescribed cart motion x(t), or applied force Q_x(t) for force drives.

    Position drives are sums of (optionally decaying) cosines shifted so
    that x(0) = 0 exactly; their velocity and acceleration are analytic.
    """

    kind: str                         # stationary | cosine_sum | decaying_cosine | force_driven
    terms: tuple[DriveTerm, ...] = ()

    def __post_init__(self):
        if self.kind not in ("stationary", "cosine_sum", "decaying_cosine",
                             "force_driven"):
            raise ConfigError(f"unknown drive kind {self.kind!r}")
        object.__setattr__(self, "terms", tuple(self.terms))

    @property
    def is_position(self) -> bool:
        return self.kind != "force_driven"

    def position(self, t):
        """x(t), xd(t), xdd(t); vectorized over t."""
        if not self.is_position:
            raise ValueError("force-driven drives do not define x(t)")
        t = np.asarray(t, dtype=np.float64)
        x = np.zeros_like(t)
        xd = np.zeros_like(t)
        xdd = np.zeros_like(t)
        for term in self.terms:
            a, w, ph, lam = term.amplitude, term.omega, term.phase, term.decay
            env = a * np.exp(-lam * t)
            c = np.cos(w * t + ph)
            s = np.sin(w * t + ph)
            x += env * c - a * math.cos(ph)
            xd += env * (-lam * c - w * s)
            xdd += env * ((lam * lam - w * w) * c + 2.0 * lam * w * s)
        return x, xd, xdd

    def force(self, t):
        """Q_x(t) for force-driven drives; vectorized over t."""
        if self.is_position:
            raise ValueError("position drives do not define Q_x(t)")
        t = np.asarray(t, dtype=np.float64)
        q = np.zeros_like(t)
        for term in self.terms:
            q += (term.amplitude * np.exp(-term.decay * t)
                  * np.cos(term.omega * t + term.phase))
        return q


@dataclass(frozen=True)
class TrialSpec:
    name: str
    drive: DriveFunction
    theta0: float = 0.0
    duration: float = 20.0
    rtol: float = 1e-10
    atol: float = 1e-10


@dataclass(frozen=True)
class TrajectorySample:
    trial_id: str
    t: float
    theta: float
    x: float
    theta_dot: float
    x_dot: float
    theta_ddot: float
    x_ddot: float
    q_theta: float            # torque on the free coordinate (0 for free swing)
    q_x: float | None         # equivalent driving force; None when withheld
    t_kin: float
    v_pot: float
    e_tot: float


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])


def dopri_step(f, t, y, h):
    """One fixed step; returns the 5th- and 4th-order solutions."""
    k = np.empty((7,) + y.shape)
    k[0] = f(t, y)
    for i in range(1, 7):
        k[i] = f(t + _DP_C[i] * h, y + h * (_DP_A[i] @ k[:i]))
    y5 = y + h * (_DP_B5 @ k)
    y4 = y + h * (_DP_B4 @ k)
    return y5, y4


def _initial_step(f, t0, y0, f0, rtol, atol):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    f1 = f(t0 + h0, y0 + h0 * f0)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1)


def integrate_adaptive(f, t0, t1, y0, rtol, atol):
    """Adaptive integration recording every accepted step.

    Returns (ts, ys) arrays including the initial condition.  Step sizes are
    governed by a PI controller on the embedded 4th-order error estimate.
    """
    safety, min_fac, max_fac, beta = 0.9, 0.2, 10.0, 0.04
    expo = 0.2 - 0.75 * beta
    y = np.asarray(y0, dtype=np.float64).copy()
    t = float(t0)
    ts, ys = [t], [y.copy()]
    h = min(_initial_step(f, t, y, f(t, y), rtol, atol), t1 - t0)
    err_prev = 1e-4
    while t < t1:
        h = min(h, t1 - t)
        if h < 1e-14 * max(1.0, abs(t)):
            raise NumericalError(f"step size underflow at t = {t:.6e}")
        y5, y4 = dopri_step(f, t, y, h)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = float(np.sqrt(np.mean(((y5 - y4) / scale) ** 2)))
        if err <= 1.0:
            t += h
            y = y5
            ts.append(t)
            ys.append(y.copy())
            fac = max_fac if err == 0.0 else safety * err ** (-expo) * err_prev ** beta
            h *= min(max_fac, max(min_fac, fac))
            err_prev = max(err, 1e-4)
        else:
            h *= max(min_fac, min(1.0, safety * err ** (-expo)))
    return np.asarray(ts), np.asarray(ys)


# ---------------------------------------------------------------------------
# trial generation

def _free_swing_rhs(params: PendulumCartParams, drive: DriveFunction):
    g, L = params.gravity, params.length

    def f(t, y):
        theta, theta_dot = y
        xdd = drive.position(t)[2]
        return np.array([theta_dot,
                         -(g * math.sin(theta) + float(xdd) * math.cos(theta)) / L])

    return f


def _make_sample(params, oracle, trial_id, t, theta, x, theta_dot, x_dot,
                 theta_ddot, x_ddot, q_x=None) -> TrajectorySample:
    state = dynamics.GeneralizedState(
        q_f=[theta], q_e=[x], qd_f=[theta_dot], qd_e=[x_dot],
        qdd_e=[x_ddot], qdd_f=[theta_ddot])
    mass, v, dv = dynamics.mass_from_provider(oracle, state.q, n_f=1)
    if q_x is None:
        q_x = float(dynamics.equivalent_force(state, mass, dv)[0])
    t_kin = dynamics.kinetic_energy(mass.m, state.qd)
    return TrajectorySample(
        trial_id=trial_id, t=t, theta=theta, x=x,
        theta_dot=theta_dot, x_dot=x_dot,
        theta_ddot=theta_ddot, x_ddot=x_ddot,
        q_theta=0.0, q_x=q_x,
        t_kin=t_kin, v_pot=v, e_tot=t_kin + v)


def integrate_trial(params: PendulumCartParams,
                    trial: TrialSpec) -> list[TrajectorySample]:
    """Free pendulum swing under a prescribed cart motion.

    The equivalent driving force recorded in each sample comes from the
    dynamics layer with the analytic provider.
    """
    if not trial.drive.is_position:
        raise ConfigError(
            f"trial {trial.name!r} is force-driven; use replay_force_driven")
    oracle = PendulumCartOracle(params)
    f = _free_swing_rhs(params, trial.drive)
    ts, ys = integrate_adaptive(f, 0.0, trial.duration,
                                np.array([trial.theta0, 0.0]),
                                trial.rtol, trial.atol)
    x, xd, xdd = trial.drive.position(ts)
    out = []
    for i, t in enumerate(ts):
        theta, theta_dot = ys[i]
        theta_ddot = f(t, ys[i])[1]
        out.append(_make_sample(params, oracle, trial.name, float(t),
                                float(theta), float(x[i]), float(theta_dot),
                                float(xd[i]), float(theta_ddot), float(xdd[i])))
    return out


def replay_force_driven(params: PendulumCartParams,
                        trial: TrialSpec) -> list[TrajectorySample]:
    """Integrate a force-driven cart, then relabel the result as position input.

    Both coordinates are integrated as free with the applied force on the
    cart; the recorded x(t), xd, xdd become the driven-coordinate data and
    the applied force becomes the ground-truth equivalent force.
    """
    if trial.drive.is_position:
        raise ConfigError(f"trial {trial.name!r} is position-driven")
    oracle = PendulumCartOracle(params)

    def accel(t, q, qd):
        state = dynamics.GeneralizedState(q_f=q, q_e=[], qd_f=qd, qd_e=[],
                                          qdd_e=[])
        mass, _, dv = dynamics.mass_from_provider(oracle, q, n_f=2)
        q_f = np.array([0.0, float(trial.drive.force(t))])
        return dynamics.forward_dynamics(state, mass, dv, q_f)

    def f(t, y):
        qdd = accel(t, y[:2], y[2:])
        return np.concatenate([y[2:], qdd])

    y0 = np.array([trial.theta0, 0.0, 0.0, 0.0])
    ts, ys = integrate_adaptive(f, 0.0, trial.duration, y0,
                                trial.rtol, trial.atol)
    out = []
    for i, t in enumerate(ts):
        theta, x, theta_dot, x_dot = ys[i]
        qdd = accel(t, ys[i][:2], ys[i][2:])
        out.append(_make_sample(params, oracle, trial.name, float(t),
                                float(theta), float(x), float(theta_dot),
                                float(x_dot), float(qdd[0]), float(qdd[1]),
                                q_x=float(trial.drive.force(t))))
    return out


def run_trial(params: PendulumCartParams, trial: TrialSpec):
    if trial.drive.is_position:
        return integrate_trial(params, trial)
    return replay_force_driven(params, trial)


# ---------------------------------------------------------------------------
# dataset assembly and serialization

def build_dataset(trial_samples: dict[str, list[TrajectorySample]],
                  train_trials: list[str], train_count: int, split_seed: int):
    """Seeded train/test split.

    Training samples are drawn uniformly without replacement from the
    designated training trials; every sample of the remaining trials forms
    the test set.
    """
    for name in train_trials:
        if name not in trial_samples:
            raise ConfigError(f"unknown training trial {name!r}")
    pool: list[TrajectorySample] = []
    for name in train_trials:
        pool.extend(trial_samples[name])
    if train_count > len(pool):
        raise ConfigError(
            f"requested {train_count} training samples but only "
            f"{len(pool)} are available")
    rng = np.random.default_rng(split_seed)
    idx = rng.choice(len(pool), size=train_count, replace=False) if train_count \
        else np.array([], dtype=int)
    train = [pool[i] for i in sorted(idx)]
    test: list[TrajectorySample] = []
    for name, samples in trial_samples.items():
        if name not in train_trials:
            test.extend(samples)
    return train, test


CSV_HEADER = "trial_id,t,theta,x,theta_dot,x_dot,theta_ddot,x_ddot,Q_theta,Q_x,T,V,E"


def _fmt(v: float) -> str:
    return repr(float(v))   # shortest decimal that round-trips in binary64


def write_dataset(path, samples: list[TrajectorySample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(CSV_HEADER + "\n")
        for s in samples:
            fields = [s.trial_id, _fmt(s.t), _fmt(s.theta), _fmt(s.x),
                      _fmt(s.theta_dot), _fmt(s.x_dot), _fmt(s.theta_ddot),
                      _fmt(s.x_ddot), _fmt(s.q_theta),
                      "" if s.q_x is None else _fmt(s.q_x),
                      _fmt(s.t_kin), _fmt(s.v_pot), _fmt(s.e_tot)]
            f.write(",".join(fields) + "\n")


def read_dataset(path) -> list[TrajectorySample]:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != CSV_HEADER:
            raise ParseError(f"{path}:1: unexpected header {header!r}")
        out = []
        for lineno, line in enumerate(f, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 13:
                raise ParseError(f"{path}:{lineno}: expected 13 fields, "
                                 f"got {len(parts)}")
            try:
                nums = [float(p) if p else None for p in parts[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if any(v is None for k, v in enumerate(nums) if k != 8):
                raise ParseError(f"{path}:{lineno}: missing required field")
            out.append(TrajectorySample(
                trial_id=parts[0], t=nums[0], theta=nums[1], x=nums[2],
                theta_dot=nums[3], x_dot=nums[4], theta_ddot=nums[5],
                x_ddot=nums[6], q_theta=nums[7], q_x=nums[8],
                t_kin=nums[9], v_pot=nums[10], e_tot=nums[11]))
    return out


def strip_qe(samples: list[TrajectorySample]) -> list[TrajectorySample]:
    """Withhold the equivalent-force ground truth (the no-Q_e regime)."""
    return [replace(s, q_x=None) for s in samples]
