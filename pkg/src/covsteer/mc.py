"""Closed-loop Monte Carlo validation of a steering solution.

Each sample draws its own initial dispersion, applies the affine
correction policy through the precomputed-gain filter, propagates the
true state with sub-stepped Euler-Maruyama velocity kicks on top of the
adaptive integrator, and records states/estimates/controls.

Samples are independent; for throughput the propagation is batched
(one stacked ODE over all active samples per substep), which leaves the
per-sample noise streams untouched.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import cr3bp
from .uncertainty import gates_covariance_factor

DIVERGENCE_RADIUS = 3.0       # LU from the barycenter
LUNAR_RADIUS_LU = 1737.4 / 384748.0
DEFAULT_SUBSTEPS = 10


@dataclass
class SampleTrace:
    states: np.ndarray          # (N+1, 6) true states
    estimates: np.ndarray       # (N+1, 6) filtered estimates
    controls: np.ndarray        # (N, 3) applied controls (incl. execution error)
    feedback: np.ndarray        # (N, 3) correction term K(x_hat - x_bar)
    dv_total: float
    diverged: bool = False
    diverged_at: int = -1


@dataclass
class McReport:
    sample_count: int
    node_means: np.ndarray          # (N+1, 6) over non-diverged samples
    node_covs: np.ndarray           # (N+1, 6, 6)
    dv_samples: np.ndarray          # (S,)
    dv99_empirical: float
    control_norms: np.ndarray       # (S, N)
    feedback_norms: np.ndarray      # (S, N)
    violation_rates: np.ndarray     # (N,) empirical P(||u_k|| > u_max)
    terminal_states: np.ndarray     # (S, 6)
    terminal_miss_ratio: np.ndarray  # (S,) Mahalanobis miss vs 3-sigma of P_f
    diverged: np.ndarray            # (S,) bool
    terminal_gap_min_eig: float     # min eig of P_f - empirical terminal cov
    terminal_contained: bool

    def to_dict(self):
        return {
            "sample_count": int(self.sample_count),
            "diverged_count": int(self.diverged.sum()),
            "dv99_empirical": float(self.dv99_empirical),
            "dv_mean": float(self.dv_samples.mean()),
            "violation_rates": self.violation_rates.tolist(),
            "terminal_gap_min_eig": float(self.terminal_gap_min_eig),
            "terminal_contained": bool(self.terminal_contained),
            "terminal_miss_ratio_max": float(np.max(self.terminal_miss_ratio)),
            "node_means": self.node_means.tolist(),
            "node_covs": self.node_covs.tolist(),
        }


def _chol_psd(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0.0, None)))


def _batch_rhs(t, z, u_flat, mu):
    s = z.size // 6
    x = z.reshape(s, 6)
    u = u_flat.reshape(s, 3)
    r1 = x[:, :3] + np.array([mu, 0.0, 0.0])
    r2 = x[:, :3] - np.array([1.0 - mu, 0.0, 0.0])
    d13 = (r1[:, 0] ** 2 + r1[:, 1] ** 2 + r1[:, 2] ** 2) ** 1.5
    d23 = (r2[:, 0] ** 2 + r2[:, 1] ** 2 + r2[:, 2] ** 2) ** 1.5
    acc = np.empty((s, 3))
    acc[:, 0] = (2.0 * x[:, 4] + x[:, 0]
                 - (1.0 - mu) * r1[:, 0] / d13 - mu * r2[:, 0] / d23)
    acc[:, 1] = (-2.0 * x[:, 3] + x[:, 1]
                 - (1.0 - mu) * x[:, 1] / d13 - mu * x[:, 1] / d23)
    acc[:, 2] = -(1.0 - mu) * x[:, 2] / d13 - mu * x[:, 2] / d23
    out = np.empty_like(x)
    out[:, :3] = x[:, 3:]
    out[:, 3:] = acc + u
    return out.ravel()


def _propagate_batch(states, controls, t0, t1, mu, tol):
    """Deterministic batch flow over [t0, t1]; returns (new_states, ok_mask)."""
    z0 = states.ravel()
    sol = solve_ivp(_batch_rhs, (t0, t1), z0, args=(controls.ravel(), mu),
                    method="DOP853", rtol=tol, atol=tol)
    if sol.success:
        return sol.y[:, -1].reshape(states.shape), np.ones(len(states), dtype=bool)
    # isolate the failing samples one by one
    out = states.copy()
    ok = np.zeros(len(states), dtype=bool)
    for i in range(len(states)):
        soli = solve_ivp(_batch_rhs, (t0, t1), states[i], args=(controls[i], mu),
                         method="DOP853", rtol=tol, atol=tol)
        if soli.success:
            out[i] = soli.y[:, -1]
            ok[i] = True
    return out, ok


def _simulate_batch(seeds, solution, open_loop=False, substeps=DEFAULT_SUBSTEPS,
                    tol=1e-13):
    sc = solution.config
    segs, pre = solution.segs, solution.pre
    gains = np.zeros_like(solution.gains) if open_loop else solution.gains
    n = sc.n
    s_count = len(seeds)
    mu = sc.constants.mu
    d_mat = sc.obs.d_mat

    rngs = [np.random.default_rng(seed) for seed in seeds]
    chol_p_hat0 = _chol_psd(sc.p_hat_0_prior)
    chol_p_tilde0 = _chol_psd(sc.p_tilde_0_prior)

    states = np.empty((s_count, n + 1, 6))
    estimates = np.empty((s_count, n + 1, 6))
    controls = np.empty((s_count, n, 3))
    feedback = np.empty((s_count, n, 3))
    dv = np.zeros(s_count)
    diverged = np.zeros(s_count, dtype=bool)
    diverged_at = np.full(s_count, -1, dtype=int)

    # initial dispersion and node-0 measurement
    x_true = np.empty((s_count, 6))
    x_hat = np.empty((s_count, 6))
    for i, rng in enumerate(rngs):
        x_hat_prior = sc.mu0 + chol_p_hat0 @ rng.standard_normal(6)
        x_true[i] = x_hat_prior + chol_p_tilde0 @ rng.standard_normal(6)
        y0 = x_true[i] + d_mat @ rng.standard_normal(6)
        x_hat[i] = x_hat_prior + pre.gains[0] @ (y0 - x_hat_prior)
    states[:, 0] = x_true
    estimates[:, 0] = x_hat

    for k in range(n):
        dt_k = sc.grid.dt[k]
        ddt = dt_k / substeps
        kick_std = sc.sigma_a * np.sqrt(ddt)

        u_cmd = np.empty((s_count, 3))
        u_act = np.empty((s_count, 3))
        kicks = np.empty((s_count, substeps, 3))
        v_meas = np.empty((s_count, 6))
        for i, rng in enumerate(rngs):
            fb = gains[k] @ (x_hat[i] - solution.iterate.x_bar[k])
            feedback[i, k] = fb
            u_cmd[i] = solution.iterate.u_bar[k] + fb
            w_exe = rng.standard_normal(3)
            u_act[i] = u_cmd[i] + gates_covariance_factor(u_cmd[i], sc.gates) @ w_exe
            kicks[i] = rng.standard_normal((substeps, 3))
            v_meas[i] = rng.standard_normal(6)
        controls[:, k] = u_act
        dv += np.where(diverged, 0.0, np.linalg.norm(u_act, axis=1) * dt_k)

        active = ~diverged
        for m in range(substeps):
            if not active.any():
                break
            t_a = sc.grid.nodes[k] + m * ddt
            new_states, ok = _propagate_batch(x_true[active], u_act[active],
                                              t_a, t_a + ddt, mu, tol)
            idx = np.flatnonzero(active)
            x_true[idx] = new_states
            x_true[idx, 3:] += kick_std * kicks[idx, m]
            # divergence: escape, lunar impact or integration failure
            r_bary = np.linalg.norm(x_true[idx, :3], axis=1)
            r_moon = np.linalg.norm(
                x_true[idx, :3] - np.array([1.0 - mu, 0.0, 0.0]), axis=1)
            bad = (~ok) | (r_bary > DIVERGENCE_RADIUS) | (r_moon < LUNAR_RADIUS_LU)
            if bad.any():
                for j in idx[bad]:
                    diverged[j] = True
                    diverged_at[j] = k
                active = ~diverged

        # filter time update with the commanded control, then measurement
        for i, rng_unused in enumerate(rngs):
            x_hat_prior = segs[k].a @ x_hat[i] + segs[k].b @ u_cmd[i] + segs[k].c
            y = x_true[i] + d_mat @ v_meas[i]
            x_hat[i] = x_hat_prior + pre.gains[k + 1] @ (y - x_hat_prior)
        states[:, k + 1] = x_true
        estimates[:, k + 1] = x_hat

    traces = [SampleTrace(states=states[i], estimates=estimates[i],
                          controls=controls[i], feedback=feedback[i],
                          dv_total=float(dv[i]), diverged=bool(diverged[i]),
                          diverged_at=int(diverged_at[i]))
              for i in range(s_count)]
    return traces


def simulate_sample(seed, solution, open_loop=False, substeps=DEFAULT_SUBSTEPS):
    """Run one closed-loop sample; deterministic in the seed."""
    return _simulate_batch([seed], solution, open_loop, substeps)[0]


def _sample_seeds(base_seed, n_samples):
    return [[int(base_seed), i] for i in range(n_samples)]


def run_campaign(solution, n_samples, base_seed=0, open_loop=False,
                 substeps=DEFAULT_SUBSTEPS, batch_size=None) -> McReport:
    """Aggregate statistics over a deterministic batch of samples."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    sc = solution.config
    seeds = _sample_seeds(base_seed, n_samples)
    batch_size = batch_size or n_samples
    traces = []
    for lo in range(0, n_samples, batch_size):
        traces.extend(_simulate_batch(seeds[lo:lo + batch_size], solution,
                                      open_loop, substeps))

    n = sc.n
    states = np.array([t.states for t in traces])
    controls = np.array([t.controls for t in traces])
    fb = np.array([t.feedback for t in traces])
    dv = np.array([t.dv_total for t in traces])
    diverged = np.array([t.diverged for t in traces])

    good = ~diverged
    node_means = states[good].mean(axis=0) if good.any() else np.full((n + 1, 6), np.nan)
    node_covs = np.empty((n + 1, 6, 6))
    for k in range(n + 1):
        if good.sum() > 1:
            dev = states[good, k] - node_means[k]
            node_covs[k] = dev.T @ dev / (good.sum() - 1)
        else:
            node_covs[k] = np.nan

    control_norms = np.linalg.norm(controls, axis=2)
    feedback_norms = np.linalg.norm(fb, axis=2)
    violation_rates = (control_norms > sc.u_max).mean(axis=0)
    dv99 = float(np.quantile(dv, 0.99, method="higher"))

    terminal = states[:, -1]
    p_f_inv = np.linalg.inv(sc.p_f)
    miss = terminal - sc.mu_f
    miss_ratio = np.sqrt(np.einsum("ij,jk,ik->i", miss, p_f_inv, miss)) / 3.0
    miss_ratio[diverged] = np.inf

    if good.sum() > 1:
        gap = sc.p_f - node_covs[-1]
        gap_min_eig = float(np.linalg.eigvalsh(0.5 * (gap + gap.T)).min())
        # whitened test with a sampling tolerance: eigenvalues of the
        # empirical covariance in P_f-normalized coordinates fluctuate by
        # O(sqrt(2/S)) even when the true covariance sits exactly on the cap
        w_f, v_f = np.linalg.eigh(sc.p_f)
        white = v_f / np.sqrt(w_f)
        ratio = float(np.linalg.eigvalsh(white.T @ node_covs[-1] @ white).max())
        tol = 3.0 * np.sqrt(2.0 / (good.sum() - 1))
        contained = bool(ratio <= 1.0 + tol and not diverged.any())
    else:
        gap_min_eig = -np.inf
        contained = False

    return McReport(sample_count=n_samples, node_means=node_means,
                    node_covs=node_covs, dv_samples=dv, dv99_empirical=dv99,
                    control_norms=control_norms, feedback_norms=feedback_norms,
                    violation_rates=violation_rates, terminal_states=terminal,
                    terminal_miss_ratio=miss_ratio, diverged=diverged,
                    terminal_gap_min_eig=gap_min_eig,
                    terminal_contained=contained)
