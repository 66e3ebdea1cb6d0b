"""Nonlinear flow propagation and exact zero-order-hold discretization.

Each segment [t_k, t_{k+1}] is integrated once as a stacked 96-dimensional
ODE carrying the nonlinear state, the state transition matrix, the control
influence integral and the accumulated process-noise covariance.
"""

from dataclasses import dataclass, field
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy.integrate import solve_ivp

from . import cr3bp

DEFAULT_TOL = 1e-13

# slices into the stacked integration vector
_SX = slice(0, 6)
_SA = slice(6, 42)
_SB = slice(42, 60)
_SP = slice(60, 96)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing node times t_0 < ... < t_N (TU)."""

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or len(nodes) < 2:
            raise ValueError("grid needs at least two nodes")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("node times must be strictly increasing")

    @property
    def n(self):
        return len(self.nodes) - 1

    @property
    def dt(self):
        return np.diff(self.nodes)

    @classmethod
    def uniform(cls, t0, tf, n):
        return cls(np.linspace(t0, tf, n + 1))


@dataclass
class SegmentMatrices:
    """Discrete matrices of one zero-order-hold segment."""

    a: np.ndarray          # 6x6 state transition
    b: np.ndarray          # 6x3 control influence
    c: np.ndarray          # 6 affine residual
    g: np.ndarray          # 6x6 symmetric noise factor, g g^T = phi_p
    phi_p: np.ndarray      # 6x6 accumulated process-noise covariance
    endpoint: np.ndarray   # propagated nonlinear endpoint

    def affine_map(self, x, u):
        return self.a @ x + self.b @ u + self.c


def flow(x0, u, t0, t1, c, tol=DEFAULT_TOL):
    """Endpoint of the controlled nonlinear flow with constant u over [t0, t1]."""
    if t1 == t0:
        return np.array(x0, dtype=float)
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    u = np.asarray(u, dtype=float)

    def rhs(t, x):
        return cr3bp.controlled_dynamics(x, u, c)

    sol = solve_ivp(rhs, (t0, t1), np.asarray(x0, dtype=float),
                    method="DOP853", rtol=tol, atol=tol, dense_output=False)
    if not sol.success:
        raise RuntimeError(f"flow integration failed: {sol.message}")
    return sol.y[:, -1]


def _stacked_rhs(t, z, u, c, gg_t):
    x = z[_SX]
    a_t = cr3bp.jacobian(x, c)
    phi_a = z[_SA].reshape(6, 6)
    phi_b = z[_SB].reshape(6, 3)
    phi_p = z[_SP].reshape(6, 6)
    dx = cr3bp.controlled_dynamics(x, u, c)
    d_phi_a = a_t @ phi_a
    d_phi_b = a_t @ phi_b + cr3bp.B_CONTROL
    d_phi_p = a_t @ phi_p + phi_p @ a_t.T + gg_t
    return np.concatenate([dx, d_phi_a.ravel(), d_phi_b.ravel(), d_phi_p.ravel()])


def noise_factor(phi_p, clamp=-1e-12):
    """Symmetric PSD factor g with g g^T = phi_p, eigenvalue-clamped."""
    sym = 0.5 * (phi_p + phi_p.T)
    w, v = np.linalg.eigh(sym)
    if np.any(w < clamp):
        raise RuntimeError(f"process-noise covariance indefinite: min eig {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def discretize_segment(x_ref, u_ref, t0, t1, noise_diffusion, c, tol=DEFAULT_TOL):
    """Integrate the stacked ODE over one segment and assemble its matrices."""
    x_ref = np.asarray(x_ref, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    g_mat = np.asarray(noise_diffusion, dtype=float)
    gg_t = g_mat @ g_mat.T

    z0 = np.concatenate([x_ref, np.eye(6).ravel(), np.zeros(18), np.zeros(36)])
    sol = solve_ivp(_stacked_rhs, (t0, t1), z0, args=(u_ref, c, gg_t),
                    method="DOP853", rtol=tol, atol=tol)
    if not sol.success:
        raise RuntimeError(f"segment discretization failed: {sol.message}")
    zf = sol.y[:, -1]
    a_k = zf[_SA].reshape(6, 6)
    b_k = zf[_SB].reshape(6, 3)
    phi_p = 0.5 * (zf[_SP].reshape(6, 6) + zf[_SP].reshape(6, 6).T)
    endpoint = zf[_SX]
    c_k = endpoint - a_k @ x_ref - b_k @ u_ref
    return SegmentMatrices(a=a_k, b=b_k, c=c_k, g=noise_factor(phi_p),
                           phi_p=phi_p, endpoint=endpoint)


def _segment_worker(args):
    x_ref, u_ref, t0, t1, noise_diffusion, c, tol = args
    return discretize_segment(x_ref, u_ref, t0, t1, noise_diffusion, c, tol)


def discretize_all(x_refs, u_refs, grid, noise_diffusion, c, tol=DEFAULT_TOL, workers=None):
    """Per-segment discretization along a reference; optionally parallel.

    Results are deterministic regardless of scheduling since every segment
    is an independent pure computation.
    """
    x_refs = np.asarray(x_refs, dtype=float)
    u_refs = np.asarray(u_refs, dtype=float)
    if len(x_refs) != grid.n + 1 or len(u_refs) != grid.n:
        raise ValueError(
            f"expected {grid.n + 1} states and {grid.n} controls, "
            f"got {len(x_refs)} and {len(u_refs)}"
        )
    tasks = [
        (x_refs[k], u_refs[k], grid.nodes[k], grid.nodes[k + 1], noise_diffusion, c, tol)
        for k in range(grid.n)
    ]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_segment_worker, tasks, chunksize=4))
    else:
        results = []
        for k, task in enumerate(tasks):
            try:
                results.append(_segment_worker(task))
            except Exception as exc:
                raise RuntimeError(f"segment {k} failed: {exc}") from exc
    return results
