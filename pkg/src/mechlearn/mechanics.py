"""Assembly of rigid-body dynamics from mass matrix, its configuration
Jacobian, potential gradient, and applied force:

    M(q) qdd = F(q, qd, u) - C(q, qd) qd - G(q)

Velocity-product forces come from Christoffel symbols of the mass matrix,
the unique choice for which qd^T (Mdot - 2C) qd vanishes identically.
All functions are pure, operate on trailing axes (arbitrary batching),
and accept the generic AD carriers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ad import core as g
from .errors import NonPositiveDefiniteMassError, NumericError, ShapeError


@dataclass(frozen=True)
class MechState:
    """Generalized coordinates and velocities."""

    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        qd = np.asarray(self.qdot, dtype=float)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)
        if q.shape != qd.shape or q.shape[-1] < 1:
            raise ShapeError(f"q {q.shape} and qdot {qd.shape} must match, n_q >= 1")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise NumericError("non-finite entries in mechanical state")

    @property
    def n_q(self):
        return self.q.shape[-1]

    def as_vector(self):
        return np.concatenate([self.q, self.qdot], axis=-1)

    @staticmethod
    def from_vector(x):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1] // 2
        return MechState(x[..., :n], x[..., n:])


@dataclass(frozen=True)
class MechTerms:
    """Pieces of the manipulator equation at one (batch of) state(s).

    mass_jacobian[..., i, j, k] = dM_ij / dq_k.
    """

    mass_matrix: object
    mass_jacobian: object
    potential_gradient: object
    force: object


def check_terms(terms, sym_tol=1e-9):
    """Validate symmetry/PD of the mass matrix and Jacobian slice symmetry.

    Intended for tests and debug paths; works on plain arrays only.
    """
    m = np.asarray(terms.mass_matrix, dtype=float)
    if np.max(np.abs(m - np.swapaxes(m, -1, -2))) >= sym_tol:
        raise NumericError("mass matrix is not symmetric")
    g.cholesky_np(m)
    dm = np.asarray(terms.mass_jacobian, dtype=float)
    if np.max(np.abs(dm - np.swapaxes(dm, -3, -2))) >= sym_tol:
        raise NumericError("mass jacobian slices are not symmetric")


def coriolis_force(mass_jacobian, qdot):
    """C(q, qd) qd with c_i = sum_jk Gamma_ijk qd_j qd_k and
    Gamma_ijk = (dM_ij/dq_k + dM_ik/dq_j - dM_jk/dq_i) / 2.

    By symmetry of the double contraction the first two Christoffel terms
    coincide, so c = Mdot qd - (1/2) s with s_i = qd^T (dM/dq_i) qd.
    """
    nq = g.shape_of(qdot)[-1]
    if g.shape_of(mass_jacobian)[-3:] != (nq, nq, nq):
        raise ShapeError(
            f"mass jacobian trailing dims {g.shape_of(mass_jacobian)[-3:]} "
            f"do not match n_q={nq}"
        )
    qd_k = g.expand_dims(g.expand_dims(qdot, -2), -2)       # (..., 1, 1, nq)
    mdot = g.gsum(mass_jacobian * qd_k, axis=-1)            # (..., i, j)
    term1 = g.matmul(mdot, g.expand_dims(qdot, -1))[..., 0]
    qd_a = g.expand_dims(g.expand_dims(qdot, -1), -1)       # (..., nq, 1, 1)
    qd_b = g.expand_dims(g.expand_dims(qdot, -2), -1)       # (..., 1, nq, 1)
    s = g.gsum(mass_jacobian * qd_a * qd_b, axis=(-3, -2))  # (..., k)
    return term1 - 0.5 * s


def forward_dynamics(terms, qdot):
    """qdd = M^{-1} (F - C qd - G) via Cholesky solve."""
    c = coriolis_force(terms.mass_jacobian, qdot)
    rhs = terms.force - c - terms.potential_gradient
    try:
        return g.posdef_solve(terms.mass_matrix, rhs)
    except NumericError as e:
        raise NonPositiveDefiniteMassError(
            f"mass matrix not positive definite during forward dynamics: {e}"
        ) from e


def kinetic_energy(mass_matrix, qdot):
    """T = qd^T M qd / 2 (nonnegative for PD M)."""
    mqd = g.matmul(mass_matrix, g.expand_dims(qdot, -1))[..., 0]
    return 0.5 * g.gsum(qdot * mqd, axis=-1)


def total_energy(mass_matrix, qdot, potential):
    return kinetic_energy(mass_matrix, qdot) + potential
