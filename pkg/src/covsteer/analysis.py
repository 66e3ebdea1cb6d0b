"""Post-solution diagnostics: local Lyapunov exponents, prediction vs
Monte Carlo comparison, and fuel accounting."""

from dataclasses import dataclass

import numpy as np

from . import discretize
from .problem import chi2_quantile, dv99_bound


@dataclass
class LleProfile:
    times: np.ndarray      # node times (start of each segment)
    values: np.ndarray     # finite-time exponents, 1/TU


def lle_from_stm(phi, dt):
    """Finite-time exponent over one segment: log of the largest singular
    value of the transition matrix, divided by the horizon."""
    sigma_max = np.linalg.svd(phi, compute_uv=False)[0]
    return float(np.log(sigma_max) / dt)


def lle_profile(x_bar, u_bar, grid, constants, segs=None) -> LleProfile:
    """Exponent per segment along a nominal trajectory.

    The horizon equals the grid step; segment STMs are reused when the
    discretization is already available.
    """
    if segs is None:
        segs = discretize.discretize_all(x_bar, u_bar, grid,
                                         np.zeros((6, 3)), constants)
    values = np.array([lle_from_stm(segs[k].a, grid.dt[k])
                       for k in range(grid.n)])
    return LleProfile(times=grid.nodes[:-1].copy(), values=values)


def tcm_profile(solution, report=None, p=0.99):
    """Per-node correction-magnitude quantile bound, and the matching
    empirical quantile when a Monte Carlo report is supplied.

    The bound is sqrt(chi2 quantile) times the largest standard deviation
    of the correction term K P_hat K^T (zero-mean), in physical units.
    """
    sc = solution.config
    d2 = sc.d_scale**2
    cq = np.sqrt(chi2_quantile(3, p))
    bounds = np.empty(sc.n)
    for k in range(sc.n):
        cov = solution.gains[k] @ (solution.iterate.p_hat[k] / d2) @ solution.gains[k].T
        lam = max(float(np.linalg.eigvalsh(0.5 * (cov + cov.T)).max()), 0.0)
        bounds[k] = cq * np.sqrt(lam)
    empirical = None
    if report is not None:
        empirical = np.quantile(report.feedback_norms, p, axis=0)
    return bounds, empirical


def compare_statistics(report, solution):
    """Node-wise distance between empirical and predicted covariance, the
    terminal containment check, and the fuel table."""
    sc = solution.config
    d2 = sc.d_scale**2
    n = sc.n
    distances = np.empty(n + 1)
    for k in range(n + 1):
        predicted = solution.iterate.p_hat[k] / d2 + solution.pre.p_tilde[k]
        distances[k] = np.linalg.norm(report.node_covs[k] - predicted, "fro")

    terminal_gap_min_eig = float(report.terminal_gap_min_eig)

    dv_table = {
        "nominal_robust_dv": solution.dv_nominal,
        "predicted_dv99_bound": solution.dv99_bound,
        "empirical_dv99": float(report.dv99_empirical),
        "empirical_dv_mean": float(report.dv_samples.mean()),
    }
    return {
        "cov_distances": distances,
        "terminal_gap_min_eig": terminal_gap_min_eig,
        "terminal_contained": bool(report.terminal_contained),
        "dv_table": dv_table,
    }
