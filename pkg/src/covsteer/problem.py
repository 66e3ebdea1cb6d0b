"""Scenario data model, unit conversion, scaling and quantile bounds.

Everything downstream of this module works in nondimensional units; the
unit tags only exist at the scenario-file boundary.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import chi2

from .cr3bp import SystemConstants
from .discretize import TimeGrid
from .uncertainty import GatesParams, ObservationModel

N_U = 3  # control dimension


def chi2_quantile(dof, p):
    """Inverse chi-squared CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must be in (0, 1), got {p}")
    if dof < 1:
        raise ValueError("dof must be a positive integer")
    return float(chi2.ppf(p, dof))


def dv99_bound(u_bar, y, p=0.99):
    """Deterministic upper bound on the p-quantile of ||u|| for a Gaussian
    control with mean u_bar and covariance y (triangle inequality)."""
    y = np.asarray(y, dtype=float)
    lam = max(float(np.linalg.eigvalsh(0.5 * (y + y.T)).max()), 0.0)
    return float(np.linalg.norm(u_bar)) + np.sqrt(chi2_quantile(N_U, p)) * np.sqrt(lam)


class UnitConverter:
    """Dimensional <-> nondimensional conversion with explicit unit tags."""

    def __init__(self, constants: SystemConstants):
        self.lu = constants.lu_km       # km
        self.tu = constants.tu_s        # s

    def to_nd(self, value, unit):
        lu, tu = self.lu, self.tu
        factors = {
            "nd": 1.0,
            "km": 1.0 / lu,
            "m": 1e-3 / lu,
            "km/s": tu / lu,
            "m/s": 1e-3 * tu / lu,
            "mm/s": 1e-6 * tu / lu,
            "km/s^2": tu**2 / lu,
            "m/s^2": 1e-3 * tu**2 / lu,
            "mm/s^2": 1e-6 * tu**2 / lu,
            "km/s^1.5": tu**1.5 / lu,
            "s": 1.0 / tu,
            "days": 86400.0 / tu,
            "rad": 1.0,
            "deg": np.pi / 180.0,
            "frac": 1.0,
            "percent": 0.01,
        }
        if unit not in factors:
            raise ValueError(f"unknown unit tag {unit!r}")
        return value * factors[unit]

    def from_nd(self, value, unit):
        return value / self.to_nd(1.0, unit)


@dataclass(frozen=True)
class ScenarioConfig:
    """Fully nondimensional problem definition for one transfer."""

    name: str
    constants: SystemConstants
    grid: TimeGrid
    mu0: np.ndarray
    p_hat_0_prior: np.ndarray
    p_tilde_0_prior: np.ndarray
    mu_f: np.ndarray
    p_f: np.ndarray
    p_max: np.ndarray | None          # None encodes an absent (infinite) cap
    u_max: float
    eps_u: float
    gates: GatesParams
    obs: ObservationModel
    sigma_a: float
    eps_y: float = 1e-4
    d_scale: float = 100.0
    quantile_p: float = 0.99
    propulsion: str = "low-thrust"

    def __post_init__(self):
        for name in ("p_hat_0_prior", "p_tilde_0_prior", "p_f"):
            m = getattr(self, name)
            if np.linalg.eigvalsh(0.5 * (m + m.T)).min() < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if self.p_max is not None and np.linalg.eigvalsh(self.p_max).min() < -1e-12:
            raise ValueError("p_max must be positive semidefinite")
        if not 0.0 < self.eps_u < 1.0:
            raise ValueError("eps_u must be in (0, 1)")
        if self.u_max <= 0:
            raise ValueError("u_max must be positive")
        if self.d_scale < 1.0:
            raise ValueError("d_scale must be >= 1")
        if self.eps_y <= 0:
            raise ValueError("eps_y must be positive")

    @property
    def n(self):
        return self.grid.n

    @property
    def noise_diffusion(self):
        """Constant diffusion matrix: velocity kicks with strength sigma_a."""
        g = np.zeros((6, 3))
        g[3:, :] = self.sigma_a * np.eye(3)
        return g


@dataclass
class SteeringIterate:
    """Decision-variable bundle for one SCP iterate.

    Covariance-related entries (p_hat, u_mat, y_mat, tau) are stored in
    the solver's d-scaled units; see Scaling for conversions.
    """

    x_bar: np.ndarray               # (N+1, 6)
    u_bar: np.ndarray               # (N, 3)
    p_hat: np.ndarray               # (N+1, 6, 6), scaled
    u_mat: np.ndarray               # (N, 3, 6), scaled
    y_mat: np.ndarray               # (N, 3, 3), scaled
    tau: np.ndarray                 # (N,), scaled
    xi: np.ndarray | None = None    # (N, 6) mean-dynamics slack
    zeta: np.ndarray | None = None  # (N,) inequality slack

    @classmethod
    def zeros(cls, n):
        return cls(
            x_bar=np.zeros((n + 1, 6)), u_bar=np.zeros((n, 3)),
            p_hat=np.zeros((n + 1, 6, 6)), u_mat=np.zeros((n, 3, 6)),
            y_mat=np.zeros((n, 3, 3)), tau=np.zeros(n),
            xi=np.zeros((n, 6)), zeta=np.zeros(n),
        )


@dataclass(frozen=True)
class Scaling:
    """Scalar d-squared substitution for covariance-related quantities.

    The solver sees P_hat, U, Y multiplied by d^2 (and tau by d); the
    covariance dynamics keep their form with coefficients Q_hat, P_max,
    P_f, P_tilde scaled by d^2, while objective terms divide tau by d and
    tr(Y) by d^2.
    """

    d: float = 1.0

    @property
    def d2(self):
        return self.d * self.d

    def scale_cov(self, m):
        return self.d2 * np.asarray(m, dtype=float)

    def unscale_cov(self, m):
        return np.asarray(m, dtype=float) / self.d2

    def scale_tau(self, tau):
        return self.d * np.asarray(tau, dtype=float)

    def unscale_tau(self, tau):
        return np.asarray(tau, dtype=float) / self.d


@dataclass
class ScaledFilterData:
    """Filter pre-pass covariances in solver (d-scaled) units."""

    q_hat: list
    p_tilde: list
    p_f: np.ndarray
    p_max: np.ndarray | None
    p_hat_0: np.ndarray           # scaled P_hat_0_prior + Q_hat_0


def apply_scaling(sc: ScenarioConfig, pre) -> ScaledFilterData:
    s = Scaling(sc.d_scale)
    return ScaledFilterData(
        q_hat=[s.scale_cov(q) for q in pre.q_hat],
        p_tilde=[s.scale_cov(p) for p in pre.p_tilde],
        p_f=s.scale_cov(sc.p_f),
        p_max=None if sc.p_max is None else s.scale_cov(sc.p_max),
        p_hat_0=s.scale_cov(sc.p_hat_0_prior) + s.scale_cov(pre.q_hat[0]),
    )
