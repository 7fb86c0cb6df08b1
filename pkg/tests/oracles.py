"""Independent oracles used by the test suite.

Everything here is deliberately written from scratch (no imports from the
package under test) so the numbers it produces are an independent check:
a piecewise conjugate, a classical RK4 integrator for the deterministic
coupled promised-value system, and plain quadrature helpers.
"""
import numpy as np


def conjugate_oracle(kappa, a_max, y):
    """Closed-form sup_{a in [0,a_max]} (a*y - kappa*a^2/2), rederived independently."""
    y = np.asarray(y, dtype=float)
    kink = kappa * a_max
    out = np.where(
        y <= 0.0,
        0.0,
        np.where(y <= kink, y * y / (2.0 * kappa), a_max * y - 0.5 * kappa * a_max * a_max),
    )
    return out if out.ndim else float(out)


def intensity_oracle(kappa, a_max, y):
    y = np.asarray(y, dtype=float)
    out = np.minimum(np.maximum(y / kappa, 0.0), a_max)
    return out if out.ndim else float(out)


def ode_system_oracle(kappa, a_max, xi, wage, T, n_steps, refine=10):
    """RK4 backward integration of the deterministic coupled system.

    dY^i/dt = -[(1/(n-1)) sum_{j!=i} c*(Y^j - Y^i) + w^i(t)],  Y^i(T) = xi^i,
    with w^i piecewise constant on the coarse grid of n_steps intervals.
    Integrates on a grid refine-times finer and returns values at the coarse
    knots, shape (n, n_steps+1).
    """
    xi = np.asarray(xi, dtype=float)
    wage = np.asarray(wage, dtype=float)
    n = xi.size
    if wage.shape != (n, n_steps):
        raise ValueError("wage must be (n, n_steps)")
    dt_f = T / (n_steps * refine)

    def rhs(t, y):
        diff = y[None, :] - y[:, None]  # diff[i, j] = Y^j - Y^i
        coup = conjugate_oracle(kappa, a_max, diff).sum(axis=1) / (n - 1)
        k = min(int(t / (T / n_steps)), n_steps - 1)
        return -(coup + wage[:, k])

    fine = np.empty((n, n_steps * refine + 1))
    fine[:, -1] = xi
    # integrate backward from T to 0
    for m in range(n_steps * refine, 0, -1):
        t = m * dt_f
        y = fine[:, m]
        h = -dt_f
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        fine[:, m - 1] = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return fine[:, ::refine]


def survival_quadrature_oracle(alpha, T):
    """exp(-int_0^T alpha) for a piecewise-constant rate on a uniform grid."""
    alpha = np.asarray(alpha, dtype=float)
    return float(np.exp(-alpha.sum() * T / alpha.size))
