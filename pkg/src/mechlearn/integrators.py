"""Fixed-step explicit integrators turning continuous-time dynamics
``xdot = f(x, u)`` into discrete-time maps, plus rollout utilities.

Integrators are written with the generic AD carriers, so stepping through
a Var-valued state or parameter stays differentiable end to end.  The
input u is held constant across substages (zero-order hold).
"""

from __future__ import annotations

import numpy as np

from .ad import primal_of
from .errors import NumericError


def euler_step(f, x, u, dt):
    return x + dt * f(x, u)


def midpoint_step(f, x, u, dt):
    k1 = f(x, u)
    return x + dt * f(x + (0.5 * dt) * k1, u)


def rk4_step(f, x, u, dt):
    """Classical fourth-order Runge-Kutta step."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    k1 = f(x, u)
    k2 = f(x + (0.5 * dt) * k1, u)
    k3 = f(x + (0.5 * dt) * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


INTEGRATORS = {
    "euler": euler_step,
    "midpoint": midpoint_step,
    "rk4": rk4_step,
}


def substepped(step, n_substeps):
    """Split each step of `step` into n equal substeps."""
    if n_substeps == 1:
        return step

    def stepped(f, x, u, dt):
        h = dt / n_substeps
        for _ in range(n_substeps):
            x = step(f, x, u, h)
        return x

    return stepped


def rollout(f, x0, inputs, dt, step=rk4_step):
    """States x_1..x_T from x_1 = x0 under inputs u_1..u_{T-1}.

    Raises NumericError annotated with the failing step index if the
    state goes non-finite.
    """
    xs = [np.asarray(x0, dtype=float)]
    for t, u in enumerate(inputs):
        x_next = step(f, xs[-1], u, dt)
        x_next = np.asarray(primal_of(x_next), dtype=float)
        if not np.all(np.isfinite(x_next)):
            raise NumericError(f"non-finite state at rollout step {t + 1}")
        xs.append(x_next)
    return np.stack(xs, axis=0)
