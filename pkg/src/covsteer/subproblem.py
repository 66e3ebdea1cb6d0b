"""Per-iteration convex subproblem: assembly, solving and gain extraction.

The subproblem couples the linearized mean dynamics with the exact linear
covariance dynamics in (P_hat, U, Y) variables, the losslessness LMI, the
relaxed control chance constraint and infinity-norm trust regions.  cvxpy
carries the conic form; trust-region radius and penalty weights are
parameters so rejected steps re-solve without recompiling.
"""

from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .problem import ScenarioConfig, SteeringIterate, Scaling, apply_scaling, chi2_quantile

DEFAULT_SOLVER = "CLARABEL"


@dataclass
class SubproblemSolution:
    iterate: SteeringIterate
    objective_value: float       # J0 only
    penalty_value: float         # J_pen at the solver's slacks
    solver_status: str           # optimal | near-optimal | infeasible | numerical-failure

    @property
    def total(self):
        return self.objective_value + self.penalty_value


def _status_label(status):
    return {
        cp.OPTIMAL: "optimal",
        cp.OPTIMAL_INACCURATE: "near-optimal",
        cp.INFEASIBLE: "infeasible",
        cp.INFEASIBLE_INACCURATE: "infeasible",
    }.get(status, "numerical-failure")


class ConicProgram:
    """Compiled subproblem for one linearization reference.

    Rebuild on reference updates (the discrete matrices and tau_ref are
    baked in); penalty state and trust-region radius are parameters.
    """

    def __init__(self, ref: SteeringIterate, segs, pre, sc: ScenarioConfig,
                 s_tau: float, deterministic: bool = False,
                 det_objective: str = "fuel", coast_head: int = 0,
                 coast_tail: int = 0, penalty=None):
        n = sc.n
        self.n = n
        self.sc = sc
        self.deterministic = deterministic
        self.s_tau = s_tau
        d = sc.d_scale

        self.x_bar = cp.Variable((n + 1, 6), name="x_bar")
        self.u_bar = cp.Variable((n, 3), name="u_bar")
        self.xi = cp.Variable((n, 6), name="xi")

        # only scalars are cvxpy Parameters: the parametric canonicalization
        # tensor scales with the number of parameter entries, and vector
        # multipliers at a few hundred nodes push it into gigabytes.  The
        # multiplier vectors only change together with the linearization
        # reference, which already forces a rebuild, so they are baked in
        # as constants.
        self.tr_radius = cp.Parameter(pos=True, name="tr_radius")
        self.w = cp.Parameter(nonneg=True, name="w")
        self.sqrt_w = cp.Parameter(nonneg=True, name="sqrt_w")
        self._mu_eq = (np.zeros((n, 6)) if penalty is None
                       else np.asarray(penalty.mu_eq, dtype=float).reshape(n, 6))

        cons = []
        for k in range(n):
            cons.append(
                self.x_bar[k + 1] - (segs[k].a @ self.x_bar[k]
                                     + segs[k].b @ self.u_bar[k] + segs[k].c)
                == self.xi[k]
            )
        cons += [self.x_bar[0] == sc.mu0, self.x_bar[n] == sc.mu_f]

        # trust regions: infinity norms scaled per variable group and per
        # node.  Near the Moon the linearization is only locally valid, so
        # nodes inside the flyby region get a radius shrunk by the squared
        # lunar-distance ratio; elsewhere the full radius applies.  This
        # keeps one sensitive perilune segment from strangling progress
        # along the whole trajectory.
        x_ref, u_ref = ref.x_bar, ref.u_bar
        moon = np.array([1.0 - sc.constants.mu, 0.0, 0.0])
        r_moon = np.linalg.norm(x_ref[:, :3] - moon, axis=1)
        s_node = np.clip((r_moon / 0.1) ** 2, 1e-3, 1.0)
        s_seg = np.minimum(s_node[:-1], s_node[1:])
        for k in range(n + 1):
            cons.append(cp.norm_inf(self.x_bar[k] - x_ref[k])
                        <= s_node[k] * self.tr_radius)
        for k in range(n):
            cons.append(cp.norm_inf(self.u_bar[k] - u_ref[k]) / sc.u_max
                        <= s_seg[k] * self.tr_radius)

        if coast_head:
            cons.append(self.u_bar[:coast_head] == 0)
        if coast_tail:
            cons.append(self.u_bar[n - coast_tail:] == 0)

        if deterministic and det_objective == "energy":
            j0 = cp.sum_squares(self.u_bar) / sc.u_max
        else:
            j0 = cp.sum(cp.norm(self.u_bar, axis=1))
        j_pen = (cp.sum(cp.multiply(self._mu_eq, self.xi))
                 + self.w / 2 * cp.sum_squares(self.xi)
                 + self.sqrt_w * cp.sum(cp.abs(self.xi)))

        if deterministic:
            self.p_hat = self.u_mat = self.y_mat = self.tau = self.zeta = None
            cons += [cp.norm(self.u_bar, axis=1) <= sc.u_max]
        else:
            scaled = apply_scaling(sc, pre)
            cq_cost = np.sqrt(chi2_quantile(3, sc.quantile_p))
            cq_cc = np.sqrt(chi2_quantile(3, 1.0 - sc.eps_u))

            self.p_hat = [cp.Variable((6, 6), symmetric=True, name=f"p_hat_{k}")
                          for k in range(n + 1)]
            self.u_mat = [cp.Variable((3, 6), name=f"u_mat_{k}") for k in range(n)]
            self.y_mat = [cp.Variable((3, 3), symmetric=True, name=f"y_mat_{k}")
                          for k in range(n)]
            self.tau = cp.Variable(n, nonneg=True, name="tau")
            self.zeta = cp.Variable(n, nonneg=True, name="zeta")
            self._lam_ineq = (np.zeros(n) if penalty is None
                              else np.asarray(penalty.lam[:n], dtype=float))
            tau_ref = ref.tau

            for k in range(n):
                a, b = segs[k].a, segs[k].b
                cons.append(
                    self.p_hat[k + 1] ==
                    a @ self.p_hat[k] @ a.T + b @ self.u_mat[k] @ a.T
                    + a @ self.u_mat[k].T @ b.T + b @ self.y_mat[k] @ b.T
                    + scaled.q_hat[k + 1]
                )
                cons.append(cp.bmat([[self.p_hat[k], self.u_mat[k].T],
                                     [self.u_mat[k], self.y_mat[k]]]) >> 0)
                cons.append(self.y_mat[k] >> 0)
                cons.append(
                    cp.lambda_max(self.y_mat[k])
                    - tau_ref[k] ** 2 - 2.0 * tau_ref[k] * (self.tau[k] - tau_ref[k])
                    <= self.zeta[k]
                )
                cons.append(
                    cp.norm(self.u_bar[k]) + cq_cc * self.tau[k] / d <= sc.u_max
                )
            if scaled.p_max is not None:
                for k in range(n + 1):
                    cons.append(scaled.p_max - self.p_hat[k] - scaled.p_tilde[k] >> 0)
            cons.append(self.p_hat[0] == scaled.p_hat_0)
            cons.append(scaled.p_f - self.p_hat[n] - scaled.p_tilde[n] >> 0)
            cons.append(s_tau * cp.norm_inf(self.tau - tau_ref) <= self.tr_radius)

            # the trace regularizer acts on the scaled Y; it is what pulls
            # Y down onto U P^-1 U^T and makes the LMI relaxation lossless
            j0 = j0 + cq_cost / d * cp.sum(self.tau) \
                + sc.eps_y * cp.sum([cp.trace(y) for y in self.y_mat])
            j_pen = j_pen + (self._lam_ineq @ self.zeta
                             + self.w / 2 * cp.sum_squares(self.zeta)
                             + self.sqrt_w * cp.sum(self.zeta))

        self._j0 = j0
        self._j_pen = j_pen
        self.prob = cp.Problem(cp.Minimize(j0 + j_pen), cons)

    def set_penalty(self, penalty):
        self.w.value = penalty.w
        self.sqrt_w.value = np.sqrt(penalty.w)
        # only the DC residuals have slack variables in the subproblem; the
        # remaining inequality residuals are hard-enforced there.  The
        # multiplier vectors are baked in as constants, so a change in them
        # requires a rebuild rather than a parameter update.
        if not np.array_equal(penalty.mu_eq.reshape(self.n, 6), self._mu_eq):
            raise ValueError("equality multipliers changed; rebuild the program")
        if not self.deterministic and not np.array_equal(
                penalty.lam[:self.n], self._lam_ineq):
            raise ValueError("inequality multipliers changed; rebuild the program")

    def solve(self, solver=DEFAULT_SOLVER, **kwargs):
        try:
            self.prob.solve(solver=solver, **kwargs)
        except cp.error.SolverError as exc:
            empty = SteeringIterate.zeros(self.n)
            return SubproblemSolution(empty, np.inf, np.inf,
                                      f"numerical-failure ({exc})")
        status = _status_label(self.prob.status)
        if self.prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            empty = SteeringIterate.zeros(self.n)
            return SubproblemSolution(empty, np.inf, np.inf, status)
        n = self.n
        if self.deterministic:
            it = SteeringIterate(
                x_bar=np.array(self.x_bar.value), u_bar=np.array(self.u_bar.value),
                p_hat=np.zeros((n + 1, 6, 6)), u_mat=np.zeros((n, 3, 6)),
                y_mat=np.zeros((n, 3, 3)), tau=np.zeros(n),
                xi=np.array(self.xi.value), zeta=np.zeros(n),
            )
        else:
            it = SteeringIterate(
                x_bar=np.array(self.x_bar.value), u_bar=np.array(self.u_bar.value),
                p_hat=np.array([0.5 * (p.value + p.value.T) for p in self.p_hat]),
                u_mat=np.array([u.value for u in self.u_mat]),
                y_mat=np.array([0.5 * (y.value + y.value.T) for y in self.y_mat]),
                tau=np.maximum(np.array(self.tau.value), 0.0),
                xi=np.array(self.xi.value),
                zeta=np.maximum(np.array(self.zeta.value), 0.0),
            )
        return SubproblemSolution(it, float(self._j0.value),
                                  float(self._j_pen.value), status)

    def dump(self, stream):
        """Write a human-readable description of variable blocks and rows."""
        stream.write(f"conic program: N={self.n} deterministic={self.deterministic}\n")
        stream.write("variable blocks:\n")
        for v in self.prob.variables():
            stream.write(f"  {v.name()}: shape {v.shape}\n")
        stream.write(f"constraints: {len(self.prob.constraints)}\n")
        for i, con in enumerate(self.prob.constraints):
            stream.write(f"  [{i:4d}] {type(con).__name__}, size {con.size}\n")


def build_subproblem(ref, segs, pre, sc, tr_radius, penalty, s_tau=1.0,
                     deterministic=False, det_objective="fuel",
                     coast_head=0, coast_tail=0):
    prog = ConicProgram(ref, segs, pre, sc, s_tau, deterministic,
                        det_objective, coast_head, coast_tail, penalty=penalty)
    prog.tr_radius.value = tr_radius
    prog.set_penalty(penalty)
    return prog


def solve_subproblem(prog, solver=DEFAULT_SOLVER, **kwargs):
    return prog.solve(solver=solver, **kwargs)


def extract_gains(iterate: SteeringIterate, cond_limit=1e12):
    """Feedback gains K_k = U_k P_hat_k^{-1} (scaling cancels)."""
    gains = []
    for k in range(len(iterate.u_mat)):
        p = iterate.p_hat[k]
        if np.linalg.cond(p) > cond_limit:
            import warnings

            warnings.warn(f"ill-conditioned estimate covariance at node {k}; "
                          "using regularized inverse")
            p = p + np.trace(p) / 6.0 / cond_limit * np.eye(6)
        gains.append(np.linalg.solve(p.T, iterate.u_mat[k].T).T)
    return np.array(gains)


def polish_covariance(iterate: SteeringIterate, segs, pre, sc):
    """Project the covariance block onto the lossless manifold.

    Extracts the gains implied by (U, P_hat) and re-propagates the
    closed-loop covariance exactly, replacing Y by K P_hat K^T and tau by
    its largest-deviation value.  Since the solver returns Y above the
    LMI face by its tolerance, this only shrinks Y (and hence P_hat and
    tau), so every constraint satisfied before is satisfied after.
    Returns (polished iterate, gains).
    """
    from .problem import apply_scaling

    gains = extract_gains(iterate)
    scaled = apply_scaling(sc, pre)
    n = len(gains)
    p = scaled.p_hat_0.copy()
    p_hat = np.empty((n + 1, 6, 6))
    u_mat = np.empty((n, 3, 6))
    y_mat = np.empty((n, 3, 3))
    tau = np.empty(n)
    p_hat[0] = p
    for k in range(n):
        kk = gains[k]
        u_mat[k] = kk @ p
        y = kk @ p @ kk.T
        y_mat[k] = 0.5 * (y + y.T)
        tau[k] = np.sqrt(max(np.linalg.eigvalsh(y_mat[k]).max(), 0.0))
        acl = segs[k].a + segs[k].b @ kk
        p = acl @ p @ acl.T + scaled.q_hat[k + 1]
        p = 0.5 * (p + p.T)
        p_hat[k + 1] = p
    polished = SteeringIterate(
        x_bar=iterate.x_bar.copy(), u_bar=iterate.u_bar.copy(),
        p_hat=p_hat, u_mat=u_mat, y_mat=y_mat, tau=tau,
        xi=iterate.xi.copy(), zeta=iterate.zeta.copy())
    return polished, gains


def losslessness_gap(iterate: SteeringIterate):
    """max_k lambda_max(Y_k - U_k P_hat_k^{-1} U_k^T), in scaled units."""
    gaps = []
    for k in range(len(iterate.u_mat)):
        u, p, y = iterate.u_mat[k], iterate.p_hat[k], iterate.y_mat[k]
        resid = y - u @ np.linalg.solve(p, u.T)
        gaps.append(float(np.linalg.eigvalsh(0.5 * (resid + resid.T)).max()))
    return max(gaps)


def initial_tau_reference(segs, pre, sc, solver=DEFAULT_SOLVER):
    """Covariance seed: (tau_ref, s_tau, p_hat, u_mat, y_mat) in scaled units.

    Used to seed the SCP iterate and the tau trust-region scaling.  Small
    instances solve a covariance-only steering SDP with a trace objective;
    large instances use a discrete LQR (Riccati) gain sweep with exact
    closed-loop propagation, which is constructive and O(N) -- the SDP at a
    few hundred nodes takes longer than the whole SCP loop and interior
    point solvers return it inaccurately anyway.  The seed only anchors
    the first linearization; the SCP enforces the actual constraints.
    """
    n = sc.n
    scaled = apply_scaling(sc, pre)
    # necessary condition independent of any feedback: the estimation error
    # alone must fit inside the terminal dispersion target
    if np.linalg.eigvalsh(scaled.p_f - scaled.p_tilde[n]).min() < -1e-12:
        raise RuntimeError(
            "covariance steering infeasible for this reference: the terminal "
            "covariance target cannot absorb the execution-error noise "
            "injected by the reference controls -- a reference that coasts "
            "on the final segments is usually required"
        )
    if n > 100:
        return _riccati_seed(segs, scaled, n)
    p_hat = [cp.Variable((6, 6), symmetric=True) for _ in range(n + 1)]
    u_mat = [cp.Variable((3, 6)) for _ in range(n)]
    y_mat = [cp.Variable((3, 3), symmetric=True) for _ in range(n)]
    cons = [p_hat[0] == scaled.p_hat_0,
            scaled.p_f - p_hat[n] - scaled.p_tilde[n] >> 0]
    for k in range(n):
        a, b = segs[k].a, segs[k].b
        cons.append(
            p_hat[k + 1] == a @ p_hat[k] @ a.T + b @ u_mat[k] @ a.T
            + a @ u_mat[k].T @ b.T + b @ y_mat[k] @ b.T + scaled.q_hat[k + 1]
        )
        cons.append(cp.bmat([[p_hat[k], u_mat[k].T], [u_mat[k], y_mat[k]]]) >> 0)
        cons.append(y_mat[k] >> 0)
    if scaled.p_max is not None:
        for k in range(n + 1):
            cons.append(scaled.p_max - p_hat[k] - scaled.p_tilde[k] >> 0)
    prob = cp.Problem(cp.Minimize(cp.sum([cp.trace(y) for y in y_mat])), cons)
    try:
        prob.solve(solver=solver)
    except cp.error.SolverError:
        pass
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) and solver != "SCS":
        try:
            prob.solve(solver="SCS")
        except cp.error.SolverError:
            pass
    if prob.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise RuntimeError(
            f"covariance steering infeasible for this reference (status {prob.status}); "
            "the terminal covariance target cannot absorb the execution-error "
            "noise injected by the reference controls -- a reference that "
            "coasts on the final segments is usually required"
        )
    y_val = np.array([0.5 * (y.value + y.value.T) for y in y_mat])
    tau_ref = np.array([np.sqrt(max(np.linalg.eigvalsh(y).max(), 0.0)) for y in y_val])
    s_tau = float(tau_ref.max()) if tau_ref.max() > 0 else 1.0
    p_val = np.array([0.5 * (p.value + p.value.T) for p in p_hat])
    u_val = np.array([u.value for u in u_mat])
    return tau_ref, s_tau, p_val, u_val, y_val


def _riccati_seed(segs, scaled, n):
    """Constructive covariance seed from a time-varying LQR sweep.

    A backward Riccati recursion with unit state/control weights over the
    linearized segment dynamics gives stabilizing gains K_k; the closed-loop
    covariance is then propagated forward exactly, matching the lossless
    parameterization (U = K P_hat, Y = K P_hat K^T).
    """
    s = np.eye(6)
    gains = np.empty((n, 3, 6))
    for k in range(n - 1, -1, -1):
        a, b = segs[k].a, segs[k].b
        bsb = b.T @ s @ b + np.eye(3)
        gains[k] = -np.linalg.solve(bsb, b.T @ s @ a)
        s = np.eye(6) + a.T @ s @ a + a.T @ s @ b @ gains[k]
        s = 0.5 * (s + s.T)
    p = scaled.p_hat_0.copy()
    p_hat = np.empty((n + 1, 6, 6))
    u_mat = np.empty((n, 3, 6))
    y_mat = np.empty((n, 3, 3))
    tau_ref = np.empty(n)
    p_hat[0] = p
    for k in range(n):
        kk = gains[k]
        u_mat[k] = kk @ p
        y = kk @ p @ kk.T
        y_mat[k] = 0.5 * (y + y.T)
        tau_ref[k] = np.sqrt(max(np.linalg.eigvalsh(y_mat[k]).max(), 0.0))
        acl = segs[k].a + segs[k].b @ kk
        p = acl @ p @ acl.T + scaled.q_hat[k + 1]
        p_hat[k + 1] = 0.5 * (p + p.T)
        p = p_hat[k + 1]
    s_tau = float(tau_ref.max()) if tau_ref.max() > 0 else 1.0
    return tau_ref, s_tau, p_hat, u_mat, y_mat
