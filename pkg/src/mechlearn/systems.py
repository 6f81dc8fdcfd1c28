"""Analytic ground-truth dynamics for the four benchmark robots: Furuta
pendulum, cartpole, acrobot, and double cartpole (cart with two serial
poles).

Each system supplies closed-form M(q), dM/dq, V(q), grad V, a constant
input matrix B, and per-joint viscous friction.  Everything is written
with the generic AD ops and trailing-axis broadcasting, so the same code
serves plain simulation, batched dataset generation, and exact Jacobians
of the discrete-time step map.

Poles are modeled as point masses at their center-of-mass distance.
Angles are measured from the hanging configuration, so every home state
is the origin and every goal places pole angles at pi.  Default physical
parameters: masses 1 kg, link lengths 1 m with centers of mass at 0.5 m,
g = 9.81, viscous friction 0.1 per joint, |u| <= 10.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ad import core as g
from .errors import ConfigError, NonPositiveDefiniteMassError
from .integrators import rk4_step, substepped
from .mechanics import MechState, MechTerms, forward_dynamics, kinetic_energy

SYSTEM_NAMES = ("furuta", "cartpole", "acrobot", "double_cartpole")

_DEFAULT_PARAMS = {
    "cartpole": {
        "m_cart": 1.0, "m_pole": 1.0, "l_pole": 0.5,
        "gravity": 9.81, "friction": (0.1, 0.1),
    },
    "furuta": {
        "m_arm": 1.0, "m_pend": 1.0, "l_arm": 1.0, "lc_arm": 0.5,
        "lc_pend": 0.5, "gravity": 9.81, "friction": (0.1, 0.1),
    },
    "acrobot": {
        "m1": 1.0, "m2": 1.0, "l1": 1.0, "lc1": 0.5, "lc2": 0.5,
        "gravity": 9.81, "friction": (0.1, 0.1),
    },
    "double_cartpole": {
        "m_cart": 1.0, "m1": 1.0, "m2": 1.0, "l1": 1.0, "lc1": 0.5,
        "lc2": 0.5, "gravity": 9.81, "friction": (0.1, 0.1, 0.1),
    },
}

_ANGLE_MASKS = {
    "cartpole": (False, True),
    "furuta": (True, True),
    "acrobot": (True, True),
    "double_cartpole": (False, True, True),
}

_GOAL_Q = {
    "cartpole": (0.0, np.pi),
    "furuta": (0.0, np.pi),
    "acrobot": (np.pi, 0.0),
    "double_cartpole": (0.0, np.pi, 0.0),
}

_INPUT_ROWS = {
    "cartpole": 0,
    "furuta": 0,
    "acrobot": 1,
    "double_cartpole": 0,
}

TRANSLATION_RANGE = 3.0
VELOCITY_RANGE = 8.0
DEFAULT_U_MAX = 10.0


@dataclass(frozen=True)
class SystemSpec:
    name: str
    n_q: int
    m: int
    params: dict
    angle_mask: tuple
    u_max: float
    x_home: np.ndarray
    x_goal: np.ndarray

    @property
    def n_x(self):
        return 2 * self.n_q

    @property
    def friction(self):
        return np.asarray(self.params["friction"], dtype=float)

    def state_box(self):
        """(lo, hi) sampling ranges over the full state vector."""
        lo_q = np.where(self.angle_mask, -np.pi, -TRANSLATION_RANGE)
        hi_q = np.where(self.angle_mask, np.pi, TRANSLATION_RANGE)
        lo = np.concatenate([lo_q, -VELOCITY_RANGE * np.ones(self.n_q)])
        hi = np.concatenate([hi_q, VELOCITY_RANGE * np.ones(self.n_q)])
        return lo, hi


def make_system(name, overrides=None, u_max=DEFAULT_U_MAX):
    if name not in SYSTEM_NAMES:
        raise ConfigError(f"unknown system {name!r}; choose from {SYSTEM_NAMES}")
    params = dict(_DEFAULT_PARAMS[name])
    for key, val in (overrides or {}).items():
        if key == "u_max":
            u_max = float(val)
            continue
        if key not in params:
            raise ConfigError(f"unknown parameter {key!r} for system {name!r}")
        params[key] = tuple(val) if key == "friction" else float(val)
    for key, val in params.items():
        if key == "friction":
            continue
        if key != "gravity" and val <= 0:
            raise ConfigError(f"{name}: parameter {key} must be positive")
    mask = _ANGLE_MASKS[name]
    n_q = len(mask)
    goal_q = np.asarray(_GOAL_Q[name], dtype=float)
    return SystemSpec(
        name=name, n_q=n_q, m=1, params=params, angle_mask=mask,
        u_max=float(u_max),
        x_home=np.zeros(2 * n_q),
        x_goal=np.concatenate([goal_q, np.zeros(n_q)]),
    )


# ---------------------------------------------------------------------------
# closed-form terms, one block per system

def _zero_like(ref):
    return ref * 0.0


def _cartpole_terms(p, q):
    mc, mp, l = p["m_cart"], p["m_pole"], p["l_pole"]
    th = q[..., 1]
    c, s = g.cos(th), g.sin(th)
    zero = _zero_like(c)
    m = g.stack([
        g.stack([zero + (mc + mp), mp * l * c], axis=-1),
        g.stack([mp * l * c, zero + mp * l * l], axis=-1),
    ], axis=-2)
    dth = g.stack([
        g.stack([zero, -mp * l * s], axis=-1),
        g.stack([-mp * l * s, zero], axis=-1),
    ], axis=-2)
    dm = g.stack([_zero_like(dth), dth], axis=-1)
    grad_v = g.stack([zero, mp * p["gravity"] * l * s], axis=-1)
    return m, dm, grad_v


def _cartpole_potential(p, q):
    return -p["m_pole"] * p["gravity"] * p["l_pole"] * g.cos(q[..., 1])


def _furuta_terms(p, q):
    m1, m2 = p["m_arm"], p["m_pend"]
    L1, lc1, l2 = p["l_arm"], p["lc_arm"], p["lc_pend"]
    th = q[..., 1]
    c, s = g.cos(th), g.sin(th)
    zero = _zero_like(c)
    m11 = m1 * lc1 ** 2 + m2 * (L1 ** 2) + m2 * (l2 ** 2) * s * s
    m12 = m2 * L1 * l2 * c
    m = g.stack([
        g.stack([m11, m12], axis=-1),
        g.stack([m12, zero + m2 * l2 ** 2], axis=-1),
    ], axis=-2)
    d11 = 2.0 * m2 * l2 ** 2 * s * c
    d12 = -m2 * L1 * l2 * s
    dth = g.stack([
        g.stack([d11, d12], axis=-1),
        g.stack([d12, zero], axis=-1),
    ], axis=-2)
    dm = g.stack([_zero_like(dth), dth], axis=-1)
    grad_v = g.stack([zero, m2 * p["gravity"] * l2 * s], axis=-1)
    return m, dm, grad_v


def _furuta_potential(p, q):
    return -p["m_pend"] * p["gravity"] * p["lc_pend"] * g.cos(q[..., 1])


def _acrobot_consts(p):
    m1, m2, l1, lc1, lc2 = p["m1"], p["m2"], p["l1"], p["lc1"], p["lc2"]
    alpha = m2 * l1 * lc2
    base11 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2)
    base12 = m2 * lc2 ** 2
    return alpha, base11, base12


def _acrobot_terms(p, q):
    alpha, base11, base12 = _acrobot_consts(p)
    th2 = q[..., 1]
    c2, s2 = g.cos(th2), g.sin(th2)
    zero = _zero_like(c2)
    m = g.stack([
        g.stack([base11 + 2.0 * alpha * c2, base12 + alpha * c2], axis=-1),
        g.stack([base12 + alpha * c2, zero + base12], axis=-1),
    ], axis=-2)
    dth2 = g.stack([
        g.stack([-2.0 * alpha * s2, -alpha * s2], axis=-1),
        g.stack([-alpha * s2, zero], axis=-1),
    ], axis=-2)
    dm = g.stack([_zero_like(dth2), dth2], axis=-1)
    s1 = g.sin(q[..., 0])
    s12 = g.sin(q[..., 0] + th2)
    grav = p["gravity"]
    w1 = p["m1"] * p["lc1"] + p["m2"] * p["l1"]
    w2 = p["m2"] * p["lc2"]
    grad_v = g.stack([grav * (w1 * s1 + w2 * s12), grav * w2 * s12], axis=-1)
    return m, dm, grad_v


def _acrobot_potential(p, q):
    w1 = p["m1"] * p["lc1"] + p["m2"] * p["l1"]
    w2 = p["m2"] * p["lc2"]
    return -p["gravity"] * (w1 * g.cos(q[..., 0]) + w2 * g.cos(q[..., 0] + q[..., 1]))


def _double_cartpole_terms(p, q):
    mc, m1, m2 = p["m_cart"], p["m1"], p["m2"]
    l1, lc1, lc2 = p["l1"], p["lc1"], p["lc2"]
    th1, th2 = q[..., 1], q[..., 2]
    c1, s1 = g.cos(th1), g.sin(th1)
    c2, s2 = g.cos(th2), g.sin(th2)
    c12, s12 = g.cos(th1 + th2), g.sin(th1 + th2)
    zero = _zero_like(c1)
    w1 = m1 * lc1 + m2 * l1
    w2 = m2 * lc2
    m00 = zero + (mc + m1 + m2)
    m01 = w1 * c1 + w2 * c12
    m02 = w2 * c12
    m11 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2) + 2.0 * m2 * l1 * lc2 * c2
    m12 = m2 * lc2 ** 2 + m2 * l1 * lc2 * c2
    m22 = zero + m2 * lc2 ** 2
    m = g.stack([
        g.stack([m00, m01, m02], axis=-1),
        g.stack([m01, m11, m12], axis=-1),
        g.stack([m02, m12, m22], axis=-1),
    ], axis=-2)
    # dM/dtheta1
    a01 = -w1 * s1 - w2 * s12
    a02 = -w2 * s12
    d1 = g.stack([
        g.stack([zero, a01, a02], axis=-1),
        g.stack([a01, zero, zero], axis=-1),
        g.stack([a02, zero, zero], axis=-1),
    ], axis=-2)
    # dM/dtheta2
    b01 = -w2 * s12
    b11 = -2.0 * m2 * l1 * lc2 * s2
    b12 = -m2 * l1 * lc2 * s2
    d2 = g.stack([
        g.stack([zero, b01, b01], axis=-1),
        g.stack([b01, b11, b12], axis=-1),
        g.stack([b01, b12, zero], axis=-1),
    ], axis=-2)
    dm = g.stack([_zero_like(d1), d1, d2], axis=-1)
    grav = p["gravity"]
    grad_v = g.stack([zero, grav * (w1 * s1 + w2 * s12), grav * w2 * s12], axis=-1)
    return m, dm, grad_v


def _double_cartpole_potential(p, q):
    w1 = p["m1"] * p["lc1"] + p["m2"] * p["l1"]
    w2 = p["m2"] * p["lc2"]
    return -p["gravity"] * (w1 * g.cos(q[..., 1]) + w2 * g.cos(q[..., 1] + q[..., 2]))


_TERMS = {
    "cartpole": _cartpole_terms,
    "furuta": _furuta_terms,
    "acrobot": _acrobot_terms,
    "double_cartpole": _double_cartpole_terms,
}

_POTENTIALS = {
    "cartpole": _cartpole_potential,
    "furuta": _furuta_potential,
    "acrobot": _acrobot_potential,
    "double_cartpole": _double_cartpole_potential,
}


def input_matrix(spec):
    """Constant input Jacobian B (n_q x m); all four robots drive one joint."""
    b = np.zeros((spec.n_q, spec.m))
    b[_INPUT_ROWS[spec.name], 0] = 1.0
    return b


def potential(spec, q):
    return _POTENTIALS[spec.name](spec.params, q)


def truth_terms(spec, state, u):
    """MechTerms at `state` with force -b*qd + B u."""
    if isinstance(state, MechState):
        q, qd = state.q, state.qdot
    else:
        q, qd = state
    m, dm, grad_v = _TERMS[spec.name](spec.params, q)
    b_mat = input_matrix(spec)
    force = -spec.friction * qd + g.matmul(u, b_mat.T)
    return MechTerms(m, dm, grad_v, force)


def truth_accel(spec, q, qd, u):
    terms = truth_terms(spec, (q, qd), u)
    try:
        return forward_dynamics(terms, qd)
    except NonPositiveDefiniteMassError as e:
        raise NonPositiveDefiniteMassError(
            f"{spec.name}: {e} at q={np.asarray(g.primal_of(q)).tolist()}"
        ) from e


def truth_xdot(spec, x, u):
    """Continuous-time state derivative; x is (..., 2 n_q), u is (..., m)."""
    n = spec.n_q
    q, qd = x[..., :n], x[..., n:]
    return g.concat([qd, truth_accel(spec, q, qd, u)], axis=-1)


def truth_step(spec, state, u, dt, substeps=1):
    """One RK4 transition of the true dynamics (zero-order hold on u)."""
    if dt <= 0:
        raise ConfigError(f"dt must be positive, got {dt}")
    step = substepped(rk4_step, substeps)
    x = state.as_vector() if isinstance(state, MechState) else np.asarray(state)
    x_next = step(lambda xx, uu: truth_xdot(spec, xx, uu), x,
                  np.asarray(u, dtype=float), dt)
    if isinstance(state, MechState):
        return MechState.from_vector(x_next)
    return x_next


def truth_energy(spec, x):
    """Total energy at state(s) x."""
    n = spec.n_q
    q, qd = x[..., :n], x[..., n:]
    m, _, _ = _TERMS[spec.name](spec.params, q)
    return kinetic_energy(m, qd) + potential(spec, q)


def truth_dt_step_fn(spec, dt, substeps=1):
    """Batched, AD-generic discrete-time map f(x, u) -> x_next."""
    step = substepped(rk4_step, substeps)

    def f(x, u):
        return step(lambda xx, uu: truth_xdot(spec, xx, uu), x, u, dt)

    return f


def wrap_state_difference(spec, dx):
    """Wrap angle coordinates of a state difference into [-pi, pi]."""
    dx = np.array(dx, dtype=float, copy=True)
    for i, is_angle in enumerate(spec.angle_mask):
        if not is_angle:
            continue
        a = dx[..., i]
        dx[..., i] = a - 2 * np.pi * np.round(a / (2 * np.pi))
    return dx
