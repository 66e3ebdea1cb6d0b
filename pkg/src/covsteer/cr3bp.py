"""Earth-Moon rotating-frame three-body dynamics in nondimensional units.

All functions work on plain length-6 numpy arrays ordered as
[x, y, z, vx, vy, vz].  Positions are in LU, velocities in LU/TU.
"""

from dataclasses import dataclass

import numpy as np

# Earth-Moon values used throughout the bundled scenarios.
EARTH_MOON_MU = 0.01215059
EARTH_MOON_LU_KM = 384748.0
EARTH_MOON_TU_S = 375700.0


class SingularityError(ValueError):
    """State is inside (or numerically on top of) one of the primaries."""


@dataclass(frozen=True)
class SystemConstants:
    """Mass ratio and the dimensional units of the rotating frame."""

    mu: float = EARTH_MOON_MU
    lu_km: float = EARTH_MOON_LU_KM
    tu_s: float = EARTH_MOON_TU_S

    def __post_init__(self):
        if not 0.0 < self.mu < 0.5:
            raise ValueError(f"mass ratio must be in (0, 0.5), got {self.mu}")
        if self.lu_km <= 0 or self.tu_s <= 0:
            raise ValueError("length/time units must be positive")


def primary_distances(x, mu, floor=1e-12):
    """Distances d1, d2 from the larger and smaller primary."""
    d1 = np.sqrt((x[0] + mu) ** 2 + x[1] ** 2 + x[2] ** 2)
    d2 = np.sqrt((x[0] - 1.0 + mu) ** 2 + x[1] ** 2 + x[2] ** 2)
    if d1 < floor or d2 < floor:
        raise SingularityError(
            f"state within {floor} of a primary (d1={d1:.3e}, d2={d2:.3e})"
        )
    return d1, d2


def natural_dynamics(x, c, floor=1e-12):
    """Uncontrolled vector field f0(x) of the rotating-frame dynamics."""
    mu = c.mu
    d1, d2 = primary_distances(x, mu, floor)
    d13, d23 = d1**3, d2**3
    ax = 2.0 * x[4] + x[0] - (1.0 - mu) * (x[0] + mu) / d13 - mu * (x[0] - 1.0 + mu) / d23
    ay = -2.0 * x[3] + x[1] - (1.0 - mu) * x[1] / d13 - mu * x[1] / d23
    az = -(1.0 - mu) * x[2] / d13 - mu * x[2] / d23
    return np.array([x[3], x[4], x[5], ax, ay, az])


# Constant control influence: acceleration enters the velocity components.
B_CONTROL = np.vstack([np.zeros((3, 3)), np.eye(3)])


def controlled_dynamics(x, u, c, floor=1e-12):
    """f(x, u) = f0(x) + B u with B = [0; I3]."""
    f = natural_dynamics(x, c, floor)
    f[3:] += u
    return f


def jacobian(x, c, floor=1e-12):
    """Analytic 6x6 Jacobian of f with respect to the state.

    Independent of u since the control enters linearly through a
    constant matrix.
    """
    mu = c.mu
    d1, d2 = primary_distances(x, mu, floor)
    mu1 = 1.0 - mu
    r1 = np.array([x[0] + mu, x[1], x[2]])
    r2 = np.array([x[0] - 1.0 + mu, x[1], x[2]])
    d13, d15 = d1**3, d1**5
    d23, d25 = d2**3, d2**5

    # Hessian of the effective potential (gravity + centrifugal).
    uxx = 1.0 - mu1 * (1.0 / d13 - 3.0 * r1[0] ** 2 / d15) - mu * (1.0 / d23 - 3.0 * r2[0] ** 2 / d25)
    uyy = 1.0 - mu1 * (1.0 / d13 - 3.0 * x[1] ** 2 / d15) - mu * (1.0 / d23 - 3.0 * x[1] ** 2 / d25)
    uzz = -mu1 * (1.0 / d13 - 3.0 * x[2] ** 2 / d15) - mu * (1.0 / d23 - 3.0 * x[2] ** 2 / d25)
    uxy = 3.0 * x[1] * (mu1 * r1[0] / d15 + mu * r2[0] / d25)
    uxz = 3.0 * x[2] * (mu1 * r1[0] / d15 + mu * r2[0] / d25)
    uyz = 3.0 * x[1] * x[2] * (mu1 / d15 + mu / d25)

    a = np.zeros((6, 6))
    a[0, 3] = a[1, 4] = a[2, 5] = 1.0
    a[3, 0], a[3, 1], a[3, 2] = uxx, uxy, uxz
    a[4, 0], a[4, 1], a[4, 2] = uxy, uyy, uyz
    a[5, 0], a[5, 1], a[5, 2] = uxz, uyz, uzz
    a[3, 4] = 2.0
    a[4, 3] = -2.0
    return a


def jacobi_constant(x, c, floor=1e-12):
    """First integral of the natural flow, C = x^2+y^2 + 2(1-mu)/d1 + 2mu/d2 - v^2."""
    mu = c.mu
    d1, d2 = primary_distances(x, mu, floor)
    v2 = x[3] ** 2 + x[4] ** 2 + x[5] ** 2
    return x[0] ** 2 + x[1] ** 2 + 2.0 * (1.0 - mu) / d1 + 2.0 * mu / d2 - v2


def collinear_equilibria(c):
    """x-axis equilibrium points, found by root-finding the axial force balance."""
    from scipy.optimize import brentq

    mu = c.mu

    def fx(x):
        d1 = abs(x + mu)
        d2 = abs(x - 1.0 + mu)
        return x - (1.0 - mu) * (x + mu) / d1**3 - mu * (x - 1.0 + mu) / d2**3

    l1 = brentq(fx, -mu + 1e-9, 1.0 - mu - 1e-9, xtol=1e-15)
    l2 = brentq(fx, 1.0 - mu + 1e-9, 2.0, xtol=1e-15)
    l3 = brentq(fx, -2.0, -mu - 1e-9, xtol=1e-15)
    return l1, l2, l3
