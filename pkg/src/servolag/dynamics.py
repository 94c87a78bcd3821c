"""Hard-coded Lagrangian mechanics over partitioned generalized coordinates.

Coordinates are ordered q = [q_f; q_e]: the free coordinates first, then the
externally driven ones (servo outputs), whose trajectory is prescribed so
their accelerations are inputs rather than unknowns.  Every function here is
a stateless pure map from (state, mass data, potential gradient) to forces,
energies, or rates; the mass data can come from the trained network or from
an analytic oracle through the same provider interface.

Units are SI throughout: kg-consistent mass entries, J for energies, W for
rates, N or N*m per generalized coordinate for forces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from servolag.errors import NumericalError

__all__ = [
    "GeneralizedState",
    "PartitionedMass",
    "ForceDecomposition",
    "EnergyReport",
    "mass_from_provider",
    "mass_time_derivative",
    "kinetic_energy",
    "kinetic_energy_rate",
    "kinetic_energy_rate_default",
    "centrifugal_coriolis_term",
    "inverse_dynamics",
    "forward_dynamics",
    "force_decomposition",
    "equivalent_force",
    "extended_generalized_force",
    "energy_report",
    "first_law_residual",
]


def _vec(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class GeneralizedState:
    """Positions, velocities, and accelerations of one sample.

    ``qdd_f`` may be omitted for forward-dynamics queries, where the free
    accelerations are the unknowns.
    """

    q_f: np.ndarray
    q_e: np.ndarray
    qd_f: np.ndarray
    qd_e: np.ndarray
    qdd_e: np.ndarray
    qdd_f: np.ndarray | None = None

    def __post_init__(self):
        for name in ("q_f", "q_e", "qd_f", "qd_e", "qdd_e"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        if self.qdd_f is not None:
            object.__setattr__(self, "qdd_f", _vec(self.qdd_f))
        parts = [self.q_f, self.q_e, self.qd_f, self.qd_e, self.qdd_e]
        if self.qdd_f is not None:
            parts.append(self.qdd_f)
        if not all(np.isfinite(p).all() for p in parts):
            raise ValueError("state components must be finite")

    @property
    def n_f(self) -> int:
        return self.q_f.shape[0]

    @property
    def n_e(self) -> int:
        return self.q_e.shape[0]

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.q_f, self.q_e])

    @property
    def qd(self) -> np.ndarray:
        return np.concatenate([self.qd_f, self.qd_e])

    @property
    def qdd(self) -> np.ndarray:
        if self.qdd_f is None:
            raise ValueError("qdd_f is not set on this state")
        return np.concatenate([self.qdd_f, self.qdd_e])


@dataclass(frozen=True)
class PartitionedMass:
    """Mass matrix, its configuration gradient, and the free/driven split.

    ``dm_dq[k, i, j]`` holds dM_ij/dq_k; each slice is symmetric because M
    is.
    """

    m: np.ndarray
    dm_dq: np.ndarray
    n_f: int

    @property
    def ff(self) -> np.ndarray:
        return self.m[:self.n_f, :self.n_f]

    @property
    def fe(self) -> np.ndarray:
        return self.m[:self.n_f, self.n_f:]

    @property
    def ef(self) -> np.ndarray:
        return self.m[self.n_f:, :self.n_f]

    @property
    def ee(self) -> np.ndarray:
        return self.m[self.n_f:, self.n_f:]


@dataclass(frozen=True)
class ForceDecomposition:
    """Inertial, centrifugal/Coriolis, and conservative contributions.

    The free components sum to the inverse-dynamics output and the driven
    components to the equivalent driving force, through the same arithmetic.
    """

    q_ffm: np.ndarray   # M_ff qdd_f
    q_fem: np.ndarray   # M_fe qdd_e
    q_fc: np.ndarray    # centrifugal + Coriolis, free rows
    q_fg: np.ndarray    # dV/dq_f
    q_eem: np.ndarray   # M_ee qdd_e
    q_efm: np.ndarray   # M_ef qdd_f
    q_ec: np.ndarray    # centrifugal + Coriolis, driven rows
    q_eg: np.ndarray    # dV/dq_e

    @property
    def q_f(self) -> np.ndarray:
        return self.q_ffm + self.q_fem + self.q_fc + self.q_fg

    @property
    def q_e(self) -> np.ndarray:
        return self.q_eem + self.q_efm + self.q_ec + self.q_eg


@dataclass(frozen=True)
class EnergyReport:
    t: float
    v: float
    e: float
    t_dot: float
    v_dot: float
    e_dot: float
    w_dot: np.ndarray
    w_dot_total: float


def mass_from_provider(provider, q: np.ndarray, n_f: int):
    """Evaluate a (M, dM_dq, V, dV_dq) provider into dynamics inputs."""
    m, dm, v, dv = provider(np.asarray(q, dtype=np.float64))
    return PartitionedMass(np.asarray(m, dtype=np.float64),
                           np.asarray(dm, dtype=np.float64), n_f), float(v), _vec(dv)


def mass_time_derivative(dm_dq: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """Mdot_ij = sum_k dM_ij/dq_k * qd_k (chain rule, elementwise in ij)."""
    return np.einsum("kij,k->ij", dm_dq, qd)


def kinetic_energy(m: np.ndarray, qd: np.ndarray) -> float:
    return 0.5 * float(qd @ m @ qd)


def _rank3_contraction(dm_dq: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """c_k = qd^T (dM/dq_k) qd for every coordinate k."""
    return np.einsum("i,kij,j->k", qd, dm_dq, qd)


def centrifugal_coriolis_term(mass: PartitionedMass, qd: np.ndarray,
                              partition: str) -> np.ndarray:
    """Velocity-dependent force rows for one partition.

    For the free rows this is Mdot_ff qd_f + Mdot_fe qd_e minus half the
    rank-3 contraction over the free coordinates; the driven rows use the
    Mdot_ee / Mdot_ef blocks and the driven coordinates.
    """
    mdot = mass_time_derivative(mass.dm_dq, qd)
    full = mdot @ qd - 0.5 * _rank3_contraction(mass.dm_dq, qd)
    if partition == "free":
        return full[:mass.n_f]
    if partition == "external":
        return full[mass.n_f:]
    raise ValueError(f"partition must be 'free' or 'external', got {partition!r}")


def inverse_dynamics(state: GeneralizedState, mass: PartitionedMass,
                     dv_dq: np.ndarray) -> np.ndarray:
    """Generalized force on the free coordinates realizing the given motion.

    Q_f = M_ff qdd_f + M_fe qdd_e + Q_fc + dV/dq_f
    """
    q_fc = centrifugal_coriolis_term(mass, state.qd, "free")
    return (mass.ff @ state.qdd_f + mass.fe @ state.qdd_e
            + q_fc + dv_dq[:mass.n_f])


def forward_dynamics(state: GeneralizedState, mass: PartitionedMass,
                     dv_dq: np.ndarray, q_f: np.ndarray) -> np.ndarray:
    """Free accelerations given the applied generalized force Q_f.

    Solves M_ff qdd_f = Q_f - M_fe qdd_e - Q_fc - dV/dq_f by Cholesky
    factorization; M_ff built from the epsilon-floored factorization is
    always positive-definite.
    """
    q_fc = centrifugal_coriolis_term(mass, state.qd, "free")
    rhs = _vec(q_f) - mass.fe @ state.qdd_e - q_fc - dv_dq[:mass.n_f]
    try:
        cho = scipy.linalg.cho_factor(mass.ff, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"M_ff is not positive-definite (cond ~ {np.linalg.cond(mass.ff):.3e})"
        ) from exc
    return scipy.linalg.cho_solve(cho, rhs)


def force_decomposition(state: GeneralizedState, mass: PartitionedMass,
                        dv_dq: np.ndarray) -> ForceDecomposition:
    return ForceDecomposition(
        q_ffm=mass.ff @ state.qdd_f,
        q_fem=mass.fe @ state.qdd_e,
        q_fc=centrifugal_coriolis_term(mass, state.qd, "free"),
        q_fg=dv_dq[:mass.n_f].copy(),
        q_eem=mass.ee @ state.qdd_e,
        q_efm=mass.ef @ state.qdd_f,
        q_ec=centrifugal_coriolis_term(mass, state.qd, "external"),
        q_eg=dv_dq[mass.n_f:].copy(),
    )


def equivalent_force(state: GeneralizedState, mass: PartitionedMass,
                     dv_dq: np.ndarray) -> np.ndarray:
    """Force a servo must exert on the driven coordinates to realize their
    prescribed motion.

    Q_e = M_ee qdd_e + M_ef qdd_f + Q_ec + dV/dq_e
    """
    q_ec = centrifugal_coriolis_term(mass, state.qd, "external")
    return (mass.ee @ state.qdd_e + mass.ef @ state.qdd_f
            + q_ec + dv_dq[mass.n_f:])


def extended_generalized_force(state: GeneralizedState, mass: PartitionedMass,
                               dv_dq: np.ndarray) -> np.ndarray:
    """Full-length force vector treating every coordinate as free.

    Splitting the result at n_f reproduces inverse_dynamics and
    equivalent_force respectively.
    """
    qd = state.qd
    mdot = mass_time_derivative(mass.dm_dq, qd)
    return (mass.m @ state.qdd + mdot @ qd
            - 0.5 * _rank3_contraction(mass.dm_dq, qd) + dv_dq)


def kinetic_energy_rate(mass: PartitionedMass, qd: np.ndarray,
                        qdd: np.ndarray) -> float:
    """Tdot written with the configuration gradient of M.

    Tdot = qd^T (M qdd + Mdot qd - (1/2) qd^T (dM/dq) qd)
    """
    mdot = mass_time_derivative(mass.dm_dq, qd)
    inner = mass.m @ qdd + mdot @ qd - 0.5 * _rank3_contraction(mass.dm_dq, qd)
    return float(qd @ inner)


def kinetic_energy_rate_default(m: np.ndarray, mdot: np.ndarray,
                                qd: np.ndarray, qdd: np.ndarray) -> float:
    """Tdot in product-rule form: qd^T M qdd + (1/2) qd^T Mdot qd."""
    return float(qd @ m @ qdd + 0.5 * qd @ mdot @ qd)


def energy_report(state: GeneralizedState, mass: PartitionedMass, v: float,
                  dv_dq: np.ndarray, q: np.ndarray) -> EnergyReport:
    """Energies, energy rates, and work rates for one sample.

    ``q`` is the full generalized force vector [Q_f; Q_e] whose work rate is
    reported; E and Edot are computed from the same arithmetic as their
    summands, so E = T + V and Edot = Tdot + Vdot hold exactly.
    """
    qd = state.qd
    t = kinetic_energy(mass.m, qd)
    t_dot = kinetic_energy_rate(mass, qd, state.qdd)
    v_dot = float(dv_dq @ qd)
    q = _vec(q)
    w_dot = qd * q
    return EnergyReport(
        t=t, v=float(v), e=t + float(v),
        t_dot=t_dot, v_dot=v_dot, e_dot=t_dot + v_dot,
        w_dot=w_dot, w_dot_total=float(qd @ q),
    )


def first_law_residual(report: EnergyReport) -> float:
    """Edot minus the total work rate; zero when Q_e is the equivalent force."""
    return report.e_dot - report.w_dot_total
