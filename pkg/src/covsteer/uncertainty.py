"""Maneuver execution noise, the observation model and the filter pre-pass.

The Kalman gains and estimation-error covariances depend only on the
reference trajectory (through the discrete matrices and the reference
controls), so the whole filter recursion is run once per reference update,
before the optimizer sees the problem.
"""

from dataclasses import dataclass, field

import numpy as np

from .discretize import SegmentMatrices


def _sym(m):
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class GatesParams:
    """Four-parameter execution-error model (nondimensional units).

    sigma1/sigma3 are fixed magnitude/pointing floors, sigma2/sigma4 the
    per-unit-thrust proportional terms (fraction and radians).
    """

    sigma1: float = 0.0
    sigma2: float = 0.0
    sigma3: float = 0.0
    sigma4: float = 0.0

    def __post_init__(self):
        if min(self.sigma1, self.sigma2, self.sigma3, self.sigma4) < 0:
            raise ValueError("Gates parameters must be nonnegative")


@dataclass(frozen=True)
class ObservationModel:
    """Full-state observation with independent position/velocity noise."""

    sigma_r: float
    sigma_v: float

    def __post_init__(self):
        if self.sigma_r <= 0 or self.sigma_v <= 0:
            raise ValueError("measurement standard deviations must be positive")

    @property
    def d_mat(self):
        return np.diag([self.sigma_r] * 3 + [self.sigma_v] * 3)

    @property
    def noise_cov(self):
        d = self.d_mat
        return d @ d


def thrust_frame(u):
    """Orthonormal frame with third column along u.

    Falls back to the reference axis [1,0,0] for the cross product when u
    is parallel to [0,0,1], and to the identity frame when u is zero
    (fixed errors have no preferred direction).
    """
    norm_u = np.linalg.norm(u)
    if norm_u == 0.0:
        return np.eye(3)
    z_hat = u / norm_u
    ref = np.array([0.0, 0.0, 1.0])
    cross = np.cross(ref, z_hat)
    if np.linalg.norm(cross) < 1e-12:
        cross = np.cross(np.array([1.0, 0.0, 0.0]), z_hat)
    e_hat = cross / np.linalg.norm(cross)
    s_hat = np.cross(e_hat, z_hat)
    return np.column_stack([s_hat, e_hat, z_hat])


def gates_covariance_factor(u, p):
    """Square-root factor of the execution-error covariance for control u."""
    u = np.asarray(u, dtype=float)
    norm_u2 = float(u @ u)
    sigma_m = np.sqrt(p.sigma1**2 + p.sigma2**2 * norm_u2)
    sigma_p = np.sqrt(p.sigma3**2 + p.sigma4**2 * norm_u2)
    return thrust_frame(u) @ np.diag([sigma_p, sigma_p, sigma_m])


@dataclass
class FilterPrePass:
    """Precomputed filter quantities at every node (index 0..N)."""

    p_tilde_prior: list       # estimation-error covariance before update
    p_tilde: list             # after update
    gains: list               # Kalman gains L_k
    q_hat: list               # injected estimate noise L_k P_y L_k^T
    innov_cov: list           # innovation covariances

    @property
    def n_nodes(self):
        return len(self.p_tilde)


def kalman_prepass(segs, obs, gates, u_refs, p_tilde_0_prior):
    """Run the covariance/gain recursion over all nodes.

    Node 0 gets a measurement update as well, so the optimizer's initial
    estimate covariance is P_hat_0_prior + q_hat[0].
    """
    n = len(segs)
    if len(u_refs) != n:
        raise ValueError("need one reference control per segment")
    r = obs.noise_cov
    eye = np.eye(6)

    p_prior = _sym(np.asarray(p_tilde_0_prior, dtype=float))
    priors, posts, gains, q_hats, innovs = [], [], [], [], []
    for k in range(n + 1):
        # full-state observation: C = I
        s = _sym(p_prior + r)
        gain = p_prior @ np.linalg.inv(s)
        # Joseph form keeps the posterior symmetric PSD
        imlc = eye - gain
        post = _sym(imlc @ p_prior @ imlc.T + gain @ r @ gain.T)
        priors.append(p_prior)
        posts.append(post)
        gains.append(gain)
        innovs.append(s)
        q_hats.append(_sym(gain @ s @ gain.T))
        if k < n:
            seg = segs[k]
            g_exe = seg.b @ gates_covariance_factor(u_refs[k], gates)
            p_prior = _sym(seg.a @ post @ seg.a.T + g_exe @ g_exe.T + seg.phi_p)
    return FilterPrePass(p_tilde_prior=priors, p_tilde=posts, gains=gains,
                         q_hat=q_hats, innov_cov=innovs)
