"""Augmented-Lagrangian sequential convex programming driver.

Outer loop: discretize about the reference, solve the convex subproblem,
score the candidate by the ratio of nonlinear to predicted cost reduction,
then update reference, multipliers, penalty weight and trust region.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import discretize, subproblem, uncertainty
from .problem import ScenarioConfig, SteeringIterate, chi2_quantile


@dataclass
class PenaltyState:
    """Penalty weight and augmented-Lagrangian multipliers."""

    w: float
    lam: np.ndarray        # (N,) inequality multipliers, >= 0
    mu_eq: np.ndarray      # (N, 6) equality multipliers

    @classmethod
    def initial(cls, n_eq, n_ineq, w_init):
        return cls(w=w_init, lam=np.zeros(n_ineq), mu_eq=np.zeros((n_eq, 6)))


@dataclass(frozen=True)
class ScvxParams:
    """Outer-loop tuning; defaults follow the reference configuration."""

    eps_opt: float = 1e-4
    eps_feas: float = 1e-6
    eta0: float = 1.0
    eta1: float = 0.85
    eta2: float = 0.1
    alpha1: float = 2.0
    alpha2: float = 3.0
    beta: float = 2.0
    gamma: float = 0.9
    tr_min: float = 1e-6
    tr_max: float = 1.0
    tr_init: float = 0.3
    w_max: float = 1e8
    w_init: float = 1000.0
    max_iters: int = 120

    def __post_init__(self):
        if not (1.0 >= self.eta0 > self.eta1 > self.eta2 > 0.0):
            raise ValueError("need 1 >= eta0 > eta1 > eta2 > 0")
        if self.alpha1 <= 1.0 or self.alpha2 <= 1.0:
            raise ValueError("trust-region ratios must exceed 1")
        if not (self.tr_min < self.tr_init <= self.tr_max):
            raise ValueError("need tr_min < tr_init <= tr_max")


@dataclass
class IterationRecord:
    iteration: int
    j0: float
    j_pen: float
    rho: float
    tr_radius: float
    w: float
    feasibility: float
    accepted: bool
    wall_time: float


@dataclass
class SteeringSolutionReport:
    """Final iterate plus everything needed for validation and analysis."""

    config: ScenarioConfig
    iterate: SteeringIterate
    gains: np.ndarray                    # (N, 3, 6) or zeros in deterministic mode
    converged: bool
    iterations: int
    history: list
    segs: list                           # discretization about the final iterate
    pre: object                          # filter pre-pass about the final iterate
    s_tau: float
    deterministic: bool = False

    @property
    def dv_nominal(self):
        dt = self.config.grid.dt
        return float(np.sum(np.linalg.norm(self.iterate.u_bar, axis=1) * dt))

    @property
    def dv99_bound(self):
        """Quantile fuel bound accumulated over segments (physical units)."""
        from .problem import dv99_bound as node_bound

        d = self.config.d_scale
        dt = self.config.grid.dt
        total = 0.0
        for k in range(self.config.n):
            total += dt[k] * node_bound(self.iterate.u_bar[k],
                                        self.iterate.y_mat[k] / d**2,
                                        self.config.quantile_p)
        return float(total)


class _CostContext:
    """Evaluates nonlinear constraint residuals and the base cost.

    Besides the dynamics defects and the DC residuals, the inequality
    residual vector carries the covariance constraints re-evaluated with
    the candidate's own filter pre-pass.  The convex subproblem freezes
    the execution-error noise at the reference controls, so a candidate
    that burns hard near arrival can look feasible to the subproblem
    while actually violating the terminal covariance target; scoring the
    true residual here lets the augmented Lagrangian reject such steps.
    """

    def __init__(self, sc: ScenarioConfig, deterministic: bool, workers=None,
                 det_objective="fuel"):
        self.sc = sc
        self.deterministic = deterministic
        self.workers = workers
        self.det_objective = det_objective
        self._cq = np.sqrt(chi2_quantile(3, sc.quantile_p))

    def n_ineq(self):
        n = self.sc.n
        if self.deterministic:
            return n
        return n + 1 + ((n + 1) if self.sc.p_max is not None else 0)

    def evaluate(self, z: SteeringIterate):
        """Returns (g, h, segs, pre): nonlinear residuals plus the
        discretization/pre-pass about z, reusable if z is accepted."""
        sc = self.sc
        segs = discretize.discretize_all(z.x_bar, z.u_bar, sc.grid,
                                         sc.noise_diffusion, sc.constants,
                                         workers=self.workers)
        pre = uncertainty.kalman_prepass(segs, sc.obs, sc.gates, z.u_bar,
                                         sc.p_tilde_0_prior)
        g, h = self.residuals(z, segs, pre)
        return g, h, segs, pre

    def residuals(self, z: SteeringIterate, segs, pre):
        sc = self.sc
        g = z.x_bar[1:] - np.array([seg.endpoint for seg in segs])
        if self.deterministic:
            return g, np.zeros(sc.n)

        d2 = sc.d_scale**2
        lam_max = np.array([np.linalg.eigvalsh(y).max() for y in z.y_mat])
        parts = [lam_max - z.tau**2]
        term = z.p_hat[sc.n] + d2 * np.asarray(pre.p_tilde[sc.n]) - d2 * sc.p_f
        parts.append([np.linalg.eigvalsh(0.5 * (term + term.T)).max()])
        if sc.p_max is not None:
            cap = []
            for k in range(sc.n + 1):
                r = z.p_hat[k] + d2 * np.asarray(pre.p_tilde[k]) - d2 * sc.p_max
                cap.append(np.linalg.eigvalsh(0.5 * (r + r.T)).max())
            parts.append(cap)
        return g, np.concatenate([np.atleast_1d(p) for p in parts])

    def reference_viable(self, pre, margin=0.98):
        """Whether a subproblem linearized about this reference can be
        feasible at all.

        The estimate dispersion after the node-k update is at least the
        injected innovation covariance, so P_tilde_prior <= margin * cap
        is necessary for the covariance caps; references that burn hard
        on the final segments fail this.
        """
        if self.deterministic:
            return True
        sc = self.sc
        gap = margin * sc.p_f - np.asarray(pre.p_tilde_prior[sc.n])
        if np.linalg.eigvalsh(0.5 * (gap + gap.T)).min() < 0.0:
            return False
        if sc.p_max is not None:
            for k in range(sc.n + 1):
                gap = margin * sc.p_max - np.asarray(pre.p_tilde_prior[k])
                if np.linalg.eigvalsh(0.5 * (gap + gap.T)).min() < 0.0:
                    return False
        return True

    def base_cost(self, z: SteeringIterate):
        sc = self.sc
        if self.deterministic and self.det_objective == "energy":
            return float(np.sum(z.u_bar**2)) / sc.u_max
        j0 = float(np.sum(np.linalg.norm(z.u_bar, axis=1)))
        if not self.deterministic:
            j0 += self._cq / sc.d_scale * float(np.sum(z.tau))
            j0 += sc.eps_y * float(sum(np.trace(y) for y in z.y_mat))
        return j0


def penalty_value(g, h, penalty: PenaltyState):
    """Augmented-Lagrangian penalty of equality residuals g and
    inequality residuals h."""
    w = penalty.w
    gv = np.asarray(g, dtype=float).ravel()
    hv = np.asarray(h, dtype=float).ravel()
    hp = np.maximum(hv, 0.0)
    val = (penalty.mu_eq.ravel() @ gv + 0.5 * w * gv @ gv
           + np.sqrt(w) * np.abs(gv).sum())
    val += penalty.lam @ hv + 0.5 * w * hp @ hp + np.sqrt(w) * hp.sum()
    return float(val)


def nonlinear_cost(z, ctx: _CostContext, penalty: PenaltyState,
                   constraint_cache=None):
    """J_aug^NL: base cost plus penalty on the true constraint residuals."""
    if constraint_cache is None:
        try:
            constraint_cache = ctx.evaluate(z)
        except Exception:
            return np.inf, None
    g, h = constraint_cache[0], constraint_cache[1]
    return ctx.base_cost(z) + penalty_value(g, h, penalty), constraint_cache


def feasibility_metric(g, h):
    return max(float(np.abs(g).max()), float(np.maximum(h, 0.0).max()) if len(h) else 0.0)


def rho_ratio(j_ref_nl, j_cand_nl, j_cand_lin):
    """Ratio of nonlinear to predicted cost reduction; degenerate
    denominators count as perfect agreement."""
    delta_j = j_ref_nl - j_cand_nl
    delta_l = j_ref_nl - j_cand_lin
    if abs(delta_l) < 1e-14:
        return 1.0
    return delta_j / delta_l


def accept_step(rho, params: ScvxParams):
    return (1.0 - params.eta0) <= rho <= (1.0 + params.eta0)


def update_trust_region(tr, rho, params: ScvxParams):
    if (1.0 - params.eta2) <= rho <= (1.0 + params.eta2):
        return min(params.alpha2 * tr, params.tr_max)
    if (1.0 - params.eta1) <= rho <= (1.0 + params.eta1):
        return tr
    return max(tr / params.alpha1, params.tr_min)


def update_multipliers(penalty: PenaltyState, g, h, feas, params: ScvxParams):
    """Damped first-order multiplier update on the true residuals of the
    accepted iterate; grow w only while infeasible."""
    mu_eq = penalty.mu_eq + params.gamma * penalty.w * np.asarray(g)
    lam = np.maximum(0.0, penalty.lam + params.gamma * penalty.w * np.asarray(h))
    w = penalty.w
    if feas > params.eps_feas:
        w = min(params.beta * w, params.w_max)
    return PenaltyState(w=w, lam=lam, mu_eq=mu_eq)


def ballistic_blend(sc: ScenarioConfig):
    """Crude initial guess: ballistic propagation from the initial mean,
    linearly blended into the target mean; zero control."""
    n = sc.n
    x = np.empty((n + 1, 6))
    x[0] = sc.mu0
    for k in range(n):
        x[k + 1] = discretize.flow(x[k], np.zeros(3), sc.grid.nodes[k],
                                   sc.grid.nodes[k + 1], sc.constants)
    blend = np.linspace(0.0, 1.0, n + 1)[:, None]
    return x + blend * (sc.mu_f - x[-1]), np.zeros((n, 3))


def bootstrap_reference(sc: ScenarioConfig, x_init=None, u_init=None,
                        coast_head=1, coast_tail=3, max_iters=100,
                        solver=subproblem.DEFAULT_SOLVER, workers=None,
                        log=None):
    """Minimum-energy deterministic reference with enforced coast arcs.

    The head/tail coast segments keep the execution-error injection small
    near the boundaries, which the stochastic problem needs: the terminal
    covariance constraint is infeasible for any gain choice when the
    reference burns hard on the final segments.
    """
    if x_init is None:
        x_init, u_init = ballistic_blend(sc)
    params = ScvxParams(max_iters=max_iters)
    rep = run(sc, x_init, u_init, params, deterministic=True, solver=solver,
              workers=workers, log=log, det_objective="energy",
              coast_head=coast_head, coast_tail=coast_tail)
    if not rep.converged:
        feas = rep.history[-1].feasibility if rep.history else np.inf
        raise RuntimeError(
            f"bootstrap reference did not converge (last feasibility {feas:.2e})")
    return rep.iterate.x_bar, rep.iterate.u_bar


def run(sc: ScenarioConfig, x_init, u_init, params: ScvxParams = None,
        deterministic=False, solver=subproblem.DEFAULT_SOLVER, workers=None,
        log=None, det_objective="fuel", coast_head=0,
        coast_tail=0) -> SteeringSolutionReport:
    """Full SCvx* loop from an initial node-state/control reference."""
    params = params or ScvxParams()
    n = sc.n
    x_init = np.asarray(x_init, dtype=float)
    u_init = np.asarray(u_init, dtype=float)
    if x_init.shape != (n + 1, 6) or u_init.shape != (n, 3):
        raise ValueError("initial reference does not match the time grid")

    ctx = _CostContext(sc, deterministic, workers=workers,
                       det_objective=det_objective)

    ref = SteeringIterate.zeros(n)
    ref.x_bar, ref.u_bar = x_init.copy(), u_init.copy()
    ref_cache = ctx.evaluate(ref)
    segs, pre = ref_cache[2], ref_cache[3]
    s_tau = 1.0
    if not deterministic:
        tau_ref, s_tau, p_val, u_val, y_val = subproblem.initial_tau_reference(
            segs, pre, sc, solver=solver)
        ref.tau, ref.p_hat, ref.u_mat, ref.y_mat = tau_ref, p_val, u_val, y_val
        g0, h0 = ctx.residuals(ref, segs, pre)
        ref_cache = (g0, h0, segs, pre)

    penalty = PenaltyState.initial(n, ctx.n_ineq(), params.w_init)
    tr = params.tr_init

    history = []
    prog = None
    converged = False
    accepted_any = False
    t_start = time.time()

    for it in range(1, params.max_iters + 1):
        t_iter = time.time()
        if prog is None:
            prog = subproblem.build_subproblem(ref, segs, pre, sc, tr, penalty,
                                               s_tau=s_tau,
                                               deterministic=deterministic,
                                               det_objective=det_objective,
                                               coast_head=coast_head,
                                               coast_tail=coast_tail)
        prog.tr_radius.value = tr
        prog.set_penalty(penalty)
        sol = prog.solve(solver=solver)

        if sol.solver_status not in ("optimal", "near-optimal"):
            rho = np.inf
            feas = np.inf
            accepted = False
            tr = max(tr / params.alpha1, params.tr_min)
            history.append(IterationRecord(it, np.inf, np.inf, rho, tr,
                                           penalty.w, feas, accepted,
                                           time.time() - t_iter))
            if log:
                log(history[-1])
            continue

        cand = sol.iterate
        j_ref_nl, _ = nonlinear_cost(ref, ctx, penalty, ref_cache)
        j_cand_nl, cand_cache = nonlinear_cost(cand, ctx, penalty)
        j_cand_lin = sol.total
        rho = rho_ratio(j_ref_nl, j_cand_nl, j_cand_lin)

        if cand_cache is None:
            feas = np.inf
            accepted = False
        elif not ctx.reference_viable(cand_cache[3]):
            # the candidate's own execution-error noise level would make
            # the next linearization infeasible; treat as a failed step
            feas = feasibility_metric(cand_cache[0], cand_cache[1])
            accepted = False
            tr = max(tr / params.alpha1, params.tr_min)
            history.append(IterationRecord(it, sol.objective_value,
                                           sol.penalty_value, rho, tr,
                                           penalty.w, feas, False,
                                           time.time() - t_iter))
            if log:
                log(history[-1])
            continue
        else:
            feas = feasibility_metric(cand_cache[0], cand_cache[1])
            delta_j = j_ref_nl - j_cand_nl
            if accepted_any and abs(delta_j) <= params.eps_opt and feas <= params.eps_feas:
                ref, ref_cache = cand, cand_cache
                segs, pre = ref_cache[2], ref_cache[3]
                history.append(IterationRecord(it, sol.objective_value,
                                               sol.penalty_value, rho, tr,
                                               penalty.w, feas, True,
                                               time.time() - t_iter))
                if log:
                    log(history[-1])
                converged = True
                break
            accepted = accept_step(rho, params)

        if accepted:
            accepted_any = True
            ref, ref_cache = cand, cand_cache
            segs, pre = ref_cache[2], ref_cache[3]
            penalty = update_multipliers(penalty, ref_cache[0], ref_cache[1],
                                         feas, params)
            prog = None

        tr = update_trust_region(tr, rho, params)
        history.append(IterationRecord(it, sol.objective_value, sol.penalty_value,
                                       rho, tr, penalty.w, feas, accepted,
                                       time.time() - t_iter))
        if log:
            log(history[-1])

    if deterministic:
        gains = np.zeros((n, 3, 6))
    else:
        ref, gains = subproblem.polish_covariance(ref, segs, pre, sc)
    return SteeringSolutionReport(config=sc, iterate=ref, gains=gains,
                                  converged=converged, iterations=len(history),
                                  history=history, segs=segs, pre=pre,
                                  s_tau=s_tau, deterministic=deterministic)
