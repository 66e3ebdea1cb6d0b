"""Command-line front end and scenario/artifact file formats.

Scenario files are YAML with explicit unit tags on every dimensional
value; all outputs are CSV/JSON with 17 significant digits so doubles
round-trip exactly.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import analysis, discretize, mc, scvx, subproblem, uncertainty
from .cr3bp import SystemConstants
from .discretize import TimeGrid
from .problem import ScenarioConfig, SteeringIterate, UnitConverter
from .uncertainty import GatesParams, ObservationModel

SCHEMA_VERSION = 1
FMT = "%.17g"
_SCENARIO_DIR = Path(__file__).parent / "scenarios"
_DATA_DIR = Path(__file__).parent / "data"


class ScenarioError(ValueError):
    pass


def _tagged(node, conv, key_path):
    """Read a {value, unit} pair (or bare number treated as nd)."""
    if isinstance(node, dict):
        try:
            return conv.to_nd(float(node["value"]), node["unit"])
        except KeyError as exc:
            raise ScenarioError(f"{key_path}: missing {exc}") from None
        except ValueError as exc:
            raise ScenarioError(f"{key_path}: {exc}") from None
    return float(node)


def _std_cov(node, conv, key_path):
    """Block-diagonal covariance from position/velocity standard deviations."""
    sr = _tagged(node["position_std"], conv, key_path + ".position_std")
    sv = _tagged(node["velocity_std"], conv, key_path + ".velocity_std")
    if sr < 0 or sv < 0:
        raise ScenarioError(f"{key_path}: standard deviations must be nonnegative")
    return np.diag([sr**2] * 3 + [sv**2] * 3)


def resolve_scenario_path(name_or_path):
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = _SCENARIO_DIR / f"{name_or_path}.yaml"
    if bundled.exists():
        return bundled
    raise ScenarioError(f"scenario {name_or_path!r} not found")


def _apply_overrides(doc, overrides):
    for item in overrides or []:
        key, _, raw = item.partition("=")
        if not raw:
            raise ScenarioError(f"override {item!r} is not key=value")
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ScenarioError(f"override key {key!r} not in schema")
            node = node[part]
        if parts[-1] not in node:
            raise ScenarioError(f"override key {key!r} not in schema")
        node[parts[-1]] = yaml.safe_load(raw)
    return doc


def parse_scenario(name_or_path, overrides=None):
    """Load and validate a scenario file.

    Returns (ScenarioConfig, ScvxParams, reference CSV path or None).
    """
    path = resolve_scenario_path(name_or_path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    _apply_overrides(doc, overrides)

    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported schema_version {version}")

    sysblock = doc["system"]
    constants = SystemConstants(
        mu=float(sysblock["mu"]),
        lu_km=float(sysblock["lu"]["value"]),
        tu_s=float(sysblock["tu"]["value"]),
    )
    conv = UnitConverter(constants)

    tof = _tagged(doc["grid"]["tof"], conv, "grid.tof")
    nodes = int(doc["grid"]["nodes"])
    grid = TimeGrid.uniform(0.0, tof, nodes)

    bnd = doc["boundary"]
    mu0 = np.asarray(bnd["mu0"]["value"], dtype=float)
    mu_f = np.asarray(bnd["mu_f"]["value"], dtype=float)
    if mu0.shape != (6,) or mu_f.shape != (6,):
        raise ScenarioError("boundary.mu0/mu_f must be 6-vectors")
    if bnd["mu0"].get("unit", "nd") != "nd" or bnd["mu_f"].get("unit", "nd") != "nd":
        raise ScenarioError("boundary states must use unit 'nd'")

    unc = doc["uncertainty"]
    p_tilde_0 = _std_cov(unc["estimation_error"], conv, "uncertainty.estimation_error")
    p_hat_0 = _std_cov(unc["estimate_dispersion"], conv, "uncertainty.estimate_dispersion")
    gb = unc["gates"]
    gates = GatesParams(
        sigma1=_tagged(gb["sigma1"], conv, "gates.sigma1"),
        sigma2=_tagged(gb["sigma2"], conv, "gates.sigma2"),
        sigma3=_tagged(gb["sigma3"], conv, "gates.sigma3"),
        sigma4=_tagged(gb["sigma4"], conv, "gates.sigma4"),
    )
    nav = unc["navigation"]
    obs = ObservationModel(
        sigma_r=_tagged(nav["position_std"], conv, "navigation.position_std"),
        sigma_v=_tagged(nav["velocity_std"], conv, "navigation.velocity_std"),
    )
    sigma_a = _tagged(unc["stochastic_acceleration"], conv,
                      "uncertainty.stochastic_acceleration")

    con = doc["constraints"]
    p_f = _std_cov(con["final"], conv, "constraints.final")
    p_max = None
    if con.get("p_max") is not None:
        p_max = _std_cov(con["p_max"], conv, "constraints.p_max")
    u_max = _tagged(con["u_max"], conv, "constraints.u_max")
    eps_u = float(con["eps_u"])

    sol = doc.get("solver", {})
    try:
        sc = ScenarioConfig(
            name=doc.get("name", path.stem), constants=constants, grid=grid,
            mu0=mu0, p_hat_0_prior=p_hat_0, p_tilde_0_prior=p_tilde_0,
            mu_f=mu_f, p_f=p_f, p_max=p_max, u_max=u_max, eps_u=eps_u,
            gates=gates, obs=obs, sigma_a=sigma_a,
            eps_y=float(sol.get("eps_y", 1e-4)),
            d_scale=float(sol.get("d_scale", 100.0)),
            quantile_p=float(sol.get("quantile_p", 0.99)),
            propulsion=doc.get("propulsion", "low-thrust"),
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None

    params = scvx.ScvxParams(**doc.get("scvx", {}))

    ref = doc.get("reference")
    ref_path = None
    if ref:
        ref_path = Path(ref)
        if not ref_path.is_absolute() and not ref_path.exists():
            for base in (path.parent, _DATA_DIR):
                if (base / ref).exists():
                    ref_path = base / ref
                    break
    return sc, params, ref_path


# ---------------------------------------------------------------------------
# reference and solution bundle IO


def save_reference_csv(path, x, u):
    n = len(u)
    rows = np.hstack([x, np.vstack([u, np.zeros((1, 3))])])
    header = "x,y,z,vx,vy,vz,ux,uy,uz"
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=FMT)


def load_reference_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    x = rows[:, :6]
    u = rows[:-1, 6:9]
    return x, u


def ballistic_reference(sc):
    """Crude initial guess; see scvx.ballistic_blend."""
    return scvx.ballistic_blend(sc)


def save_solution(outdir, report):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sc = report.config
    t = sc.grid.nodes
    it = report.iterate
    d = sc.d_scale

    np.savetxt(outdir / "trajectory.csv",
               np.column_stack([t, it.x_bar]), delimiter=",", fmt=FMT,
               header="t,x,y,z,vx,vy,vz", comments="")
    from .problem import dv99_bound
    bounds = [dv99_bound(it.u_bar[k], it.y_mat[k] / d**2, sc.quantile_p)
              for k in range(sc.n)]
    np.savetxt(outdir / "control.csv",
               np.column_stack([t[:-1], it.u_bar, it.tau / d, bounds]),
               delimiter=",", fmt=FMT,
               header="t,ux,uy,uz,tau,dv99_node_bound", comments="")
    np.savetxt(outdir / "gains.csv",
               np.column_stack([np.arange(sc.n),
                                report.gains.reshape(sc.n, 18)]),
               delimiter=",", fmt=FMT,
               header="k," + ",".join(f"k{i}{j}" for i in range(3) for j in range(6)),
               comments="")
    tri = np.tril_indices(6)
    cov_rows = np.column_stack([
        np.arange(sc.n + 1),
        np.array([(it.p_hat[k] / d**2)[tri] for k in range(sc.n + 1)]),
        np.array([report.pre.p_tilde[k][tri] for k in range(sc.n + 1)]),
    ])
    np.savetxt(outdir / "covariance.csv", cov_rows, delimiter=",", fmt=FMT,
               header="k," + ",".join(f"phat_{i}{j}" for i, j in zip(*tri))
               + "," + ",".join(f"ptilde_{i}{j}" for i, j in zip(*tri)),
               comments="")
    with open(outdir / "iterations.csv", "w") as fh:
        fh.write("iter,j0,j_pen,rho,tr_radius,w,feasibility,accepted,wall_time\n")
        for rec in report.history:
            fh.write(",".join(FMT % v if isinstance(v, float) else str(v)
                              for v in (rec.iteration, rec.j0, rec.j_pen, rec.rho,
                                        rec.tr_radius, rec.w, rec.feasibility,
                                        int(rec.accepted), rec.wall_time)) + "\n")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "scenario": sc.name,
        "converged": bool(report.converged),
        "iterations": int(report.iterations),
        "deterministic": bool(report.deterministic),
        "s_tau": float(report.s_tau),
        "dv_nominal": report.dv_nominal,
        "dv99_bound": report.dv99_bound,
        "u_mat_scaled": it.u_mat.tolist(),
        "y_mat_scaled": it.y_mat.tolist(),
        "tau_scaled": it.tau.tolist(),
    }
    with open(outdir / "solution.json", "w") as fh:
        json.dump(meta, fh, indent=1)


def load_solution(outdir, sc):
    """Rebuild a SteeringSolutionReport from a solution bundle.

    Discretization and the filter pre-pass are recomputed about the saved
    nominal, which is exactly how they were produced.
    """
    outdir = Path(outdir)
    traj = np.loadtxt(outdir / "trajectory.csv", delimiter=",", skiprows=1)
    ctrl = np.loadtxt(outdir / "control.csv", delimiter=",", skiprows=1)
    gains_rows = np.loadtxt(outdir / "gains.csv", delimiter=",", skiprows=1)
    with open(outdir / "solution.json") as fh:
        meta = json.load(fh)

    x_bar = traj[:, 1:7]
    u_bar = ctrl[:, 1:4]
    n = len(u_bar)
    gains = gains_rows[:, 1:].reshape(n, 3, 6)
    d = sc.d_scale

    cov_rows = np.loadtxt(outdir / "covariance.csv", delimiter=",", skiprows=1)
    tri = np.tril_indices(6)
    p_hat = np.empty((n + 1, 6, 6))
    for k in range(n + 1):
        m = np.zeros((6, 6))
        m[tri] = cov_rows[k, 1:22]
        p_hat[k] = m + np.tril(m, -1).T
    it = SteeringIterate(
        x_bar=x_bar, u_bar=u_bar, p_hat=p_hat * d**2,
        u_mat=np.asarray(meta["u_mat_scaled"], dtype=float),
        y_mat=np.asarray(meta["y_mat_scaled"], dtype=float),
        tau=np.asarray(meta["tau_scaled"], dtype=float),
        xi=np.zeros((n, 6)), zeta=np.zeros(n),
    )
    segs = discretize.discretize_all(x_bar, u_bar, sc.grid, sc.noise_diffusion,
                                     sc.constants)
    pre = uncertainty.kalman_prepass(segs, sc.obs, sc.gates, u_bar,
                                     sc.p_tilde_0_prior)
    return scvx.SteeringSolutionReport(
        config=sc, iterate=it, gains=gains, converged=meta["converged"],
        iterations=meta["iterations"], history=[], segs=segs, pre=pre,
        s_tau=meta["s_tau"], deterministic=meta["deterministic"])


# ---------------------------------------------------------------------------
# commands


def _print_iteration(rec):
    print(f"  iter {rec.iteration:3d}  J0={rec.j0:.6e}  Jpen={rec.j_pen:.3e}  "
          f"rho={rec.rho:+.3f}  tr={rec.tr_radius:.2e}  w={rec.w:.1e}  "
          f"feas={rec.feasibility:.2e}  {'accept' if rec.accepted else 'reject'}",
          flush=True)


def cmd_solve(args):
    sc, params, ref_path = parse_scenario(args.scenario, args.override)
    if args.max_iters:
        from dataclasses import replace
        params = replace(params, max_iters=args.max_iters)
    if args.ballistic_init or ref_path is None or not ref_path.exists():
        print("no reference file; bootstrapping a minimum-energy reference",
              flush=True)
        x0, u0 = scvx.bootstrap_reference(sc, workers=args.threads,
                                          log=_print_iteration)
    else:
        x0, u0 = load_reference_csv(ref_path)
    report = scvx.run(sc, x0, u0, params, deterministic=args.deterministic,
                      workers=args.threads, log=_print_iteration)
    save_solution(args.out, report)
    print(f"converged={report.converged} iterations={report.iterations} "
          f"dv_nominal={report.dv_nominal:.6e} dv99_bound={report.dv99_bound:.6e}")
    return 0 if report.converged else 2


def cmd_mc(args):
    sc, _, _ = parse_scenario(args.scenario, args.override)
    outdir = Path(args.out)
    if not (outdir / "solution.json").exists():
        print("no solution bundle in output directory; run solve first",
              file=sys.stderr)
        return 1
    solution = load_solution(outdir, sc)
    report = mc.run_campaign(solution, args.samples, base_seed=args.seed,
                             open_loop=args.open_loop)
    with open(outdir / "mc_report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1)
    d2 = sc.d_scale**2
    rows = []
    for k in range(sc.n + 1):
        pred = solution.iterate.p_hat[k] / d2 + solution.pre.p_tilde[k]
        for j in range(6):
            rows.append((k, j, np.sqrt(pred[j, j]),
                         np.sqrt(report.node_covs[k][j, j])))
    np.savetxt(outdir / "dispersion.csv", np.array(rows), delimiter=",",
               fmt=FMT, header="node,component,predicted_std,empirical_std",
               comments="")
    print(f"samples={report.sample_count} diverged={int(report.diverged.sum())} "
          f"dv99_empirical={report.dv99_empirical:.6e} "
          f"terminal_contained={report.terminal_contained}")
    return 0


def cmd_analyze(args):
    sc, _, _ = parse_scenario(args.scenario, args.override)
    outdir = Path(args.out)
    solution = load_solution(outdir, sc)
    lle = analysis.lle_profile(solution.iterate.x_bar, solution.iterate.u_bar,
                               sc.grid, sc.constants, segs=solution.segs)
    np.savetxt(outdir / "lle.csv",
               np.column_stack([np.arange(sc.n), lle.times, lle.values]),
               delimiter=",", fmt=FMT, header="segment,t,lle", comments="")

    mc_report = None
    if (outdir / "mc_report.json").exists():
        mc_report = mc.run_campaign(solution, args.samples, base_seed=args.seed,
                                    open_loop=args.open_loop) if args.recompute_mc else None
    bounds, empirical = analysis.tcm_profile(solution, mc_report)
    cols = [np.arange(sc.n), bounds]
    header = "node,tcm_bound"
    if empirical is not None:
        cols.append(empirical)
        header += ",tcm_empirical"
    np.savetxt(outdir / "tcm.csv", np.column_stack(cols), delimiter=",",
               fmt=FMT, header=header, comments="")

    dv_table = {
        "nominal_robust_dv": solution.dv_nominal,
        "predicted_dv99_bound": solution.dv99_bound,
    }
    if (outdir / "mc_report.json").exists():
        with open(outdir / "mc_report.json") as fh:
            mcd = json.load(fh)
        dv_table["empirical_dv99"] = mcd["dv99_empirical"]
    with open(outdir / "dv_table.json", "w") as fh:
        json.dump(dv_table, fh, indent=1)
    print(f"lle_max={lle.values.max():.4f} at segment {int(lle.values.argmax())}")
    return 0


def cmd_pipeline(args):
    rc = cmd_solve(args)
    if rc == 1:
        return 1
    rc_mc = cmd_mc(args)
    rc_an = cmd_analyze(args)
    return max(rc, rc_mc, rc_an)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="covsteer",
        description="Robust transfer design via chance-constrained "
                    "covariance steering in the Earth-Moon CR3BP")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("solve", cmd_solve), ("mc", cmd_mc),
                     ("analyze", cmd_analyze), ("pipeline", cmd_pipeline)):
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True,
                       help="bundled scenario name or YAML path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--samples", type=int, default=200)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--open-loop", action="store_true")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VAL")
        p.add_argument("--ballistic-init", action="store_true",
                       help="build a crude initial reference by ballistic "
                            "propagation instead of reading a file")
        p.add_argument("--deterministic", action="store_true",
                       help="mean-only trajectory optimization "
                            "(covariance machinery off)")
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--recompute-mc", action="store_true")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
