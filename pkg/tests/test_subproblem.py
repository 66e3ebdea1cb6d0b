import warnings

import numpy as np
import pytest

from covsteer import discretize, scvx, subproblem, uncertainty
from covsteer.problem import SteeringIterate, apply_scaling

from conftest import make_toy_config


def test_losslessness_gap_at_converged_toy(toy_report):
    assert subproblem.losslessness_gap(toy_report.iterate) <= 1e-5


def test_extract_gains_identity(toy_report):
    it = toy_report.iterate
    gains = subproblem.extract_gains(it)
    for k in range(len(gains)):
        assert np.abs(gains[k] @ it.p_hat[k] - it.u_mat[k]).max() <= 1e-8


def test_polish_preserves_constraints(toy_report):
    sc = toy_report.config
    polished, gains = subproblem.polish_covariance(
        toy_report.iterate, toy_report.segs, toy_report.pre, sc)
    scaled = apply_scaling(sc, toy_report.pre)
    # exact closed-loop propagation consistency
    for k in range(sc.n):
        acl = toy_report.segs[k].a + toy_report.segs[k].b @ gains[k]
        pred = acl @ polished.p_hat[k] @ acl.T + scaled.q_hat[k + 1]
        assert np.abs(polished.p_hat[k + 1] - 0.5 * (pred + pred.T)).max() <= 1e-10
    # terminal covariance cap still met
    gap = scaled.p_f - polished.p_hat[sc.n] - scaled.p_tilde[sc.n]
    assert np.linalg.eigvalsh(0.5 * (gap + gap.T)).min() >= -1e-8
    # losslessness is exact after polishing
    assert subproblem.losslessness_gap(polished) <= 1e-12


def test_scaled_vs_unscaled_solve_agreement():
    """Same 5-node instance solved with d = 100 and d = 1 gives the same
    physical solution to 1e-6."""
    results = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # d=1 triggers accuracy warnings
        for d in (100.0, 1.0):
            sc, x = make_toy_config(d_scale=d)
            rep = scvx.run(sc, x, np.zeros((5, 3)),
                           scvx.ScvxParams(max_iters=40))
            assert rep.converged
            d2 = d * d
            results[d] = (rep.iterate.u_bar, rep.iterate.x_bar,
                          rep.iterate.p_hat / d2, rep.iterate.y_mat / d2,
                          (rep.iterate.tau / d) ** 2)
    for a, b in zip(results[100.0], results[1.0]):
        assert np.abs(a - b).max() <= 1e-6


def test_solver_cross_check(toy_report):
    """CLARABEL and SCS agree on the subproblem about the converged
    reference."""
    sc = toy_report.config
    penalty = scvx.PenaltyState.initial(sc.n, sc.n + 1, 1000.0)
    sols = {}
    kwargs = {"CLARABEL": {}, "SCS": {"eps": 1e-9, "max_iters": 200000}}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for solver in ("CLARABEL", "SCS"):
            prog = subproblem.build_subproblem(
                toy_report.iterate, toy_report.segs, toy_report.pre, sc,
                tr_radius=0.3, penalty=penalty, s_tau=toy_report.s_tau)
            sols[solver] = prog.solve(solver=solver, **kwargs[solver])
    assert sols["CLARABEL"].solver_status in ("optimal", "near-optimal")
    assert sols["SCS"].solver_status in ("optimal", "near-optimal")
    ref = abs(sols["CLARABEL"].objective_value)
    # flat directions in the covariance terms limit agreement to ~1%
    assert abs(sols["CLARABEL"].objective_value
               - sols["SCS"].objective_value) <= 1e-2 * max(ref, 1e-6)
    assert np.abs(sols["CLARABEL"].iterate.u_bar
                  - sols["SCS"].iterate.u_bar).max() <= 1e-6


def test_subproblem_respects_trust_region(toy_report):
    sc = toy_report.config
    penalty = scvx.PenaltyState.initial(sc.n, sc.n + 1, 1000.0)
    tr = 1e-3
    prog = subproblem.build_subproblem(
        toy_report.iterate, toy_report.segs, toy_report.pre, sc,
        tr_radius=tr, penalty=penalty, s_tau=toy_report.s_tau)
    sol = prog.solve()
    assert sol.solver_status in ("optimal", "near-optimal")
    tol = 1e-6
    assert np.abs(sol.iterate.x_bar - toy_report.iterate.x_bar).max() <= tr + tol
    assert (np.abs(sol.iterate.u_bar - toy_report.iterate.u_bar).max() / sc.u_max
            <= tr + tol)


def test_deterministic_subproblem_coast_arcs(toy_report):
    sc = toy_report.config
    x, u = toy_report.iterate.x_bar, toy_report.iterate.u_bar
    segs = discretize.discretize_all(x, u, sc.grid, sc.noise_diffusion,
                                     sc.constants)
    pre = uncertainty.kalman_prepass(segs, sc.obs, sc.gates, u,
                                     sc.p_tilde_0_prior)
    ref = SteeringIterate.zeros(sc.n)
    ref.x_bar, ref.u_bar = x.copy(), u.copy()
    penalty = scvx.PenaltyState.initial(sc.n, sc.n, 1000.0)
    prog = subproblem.build_subproblem(ref, segs, pre, sc, tr_radius=0.3,
                                       penalty=penalty, deterministic=True,
                                       det_objective="energy",
                                       coast_head=1, coast_tail=2)
    sol = prog.solve()
    assert sol.solver_status in ("optimal", "near-optimal")
    assert np.abs(sol.iterate.u_bar[0]).max() <= 1e-9
    assert np.abs(sol.iterate.u_bar[-2:]).max() <= 1e-9
    assert np.all(np.linalg.norm(sol.iterate.u_bar, axis=1) <= sc.u_max + 1e-9)


def test_chance_constraint_margin(toy_report):
    """At the converged iterate, ||u|| + sqrt(Q(1-eps)) tau/d <= u_max."""
    sc = toy_report.config
    from covsteer.problem import chi2_quantile
    cq = np.sqrt(chi2_quantile(3, 1.0 - sc.eps_u))
    it = toy_report.iterate
    lhs = np.linalg.norm(it.u_bar, axis=1) + cq * it.tau / sc.d_scale
    assert np.all(lhs <= sc.u_max + 1e-8)


def test_status_label():
    import cvxpy as cp
    assert subproblem._status_label(cp.OPTIMAL) == "optimal"
    assert subproblem._status_label(cp.OPTIMAL_INACCURATE) == "near-optimal"
    assert subproblem._status_label(cp.INFEASIBLE) == "infeasible"
    assert subproblem._status_label("whatever") == "numerical-failure"


def test_dump_describes_program(toy_report, tmp_path):
    import io
    sc = toy_report.config
    penalty = scvx.PenaltyState.initial(sc.n, sc.n + 1, 1000.0)
    prog = subproblem.build_subproblem(
        toy_report.iterate, toy_report.segs, toy_report.pre, sc,
        tr_radius=0.3, penalty=penalty, s_tau=toy_report.s_tau)
    buf = io.StringIO()
    prog.dump(buf)
    text = buf.getvalue()
    assert "N=5" in text and "constraints" in text
