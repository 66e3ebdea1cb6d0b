"""Narrative walkthrough: robust DRO-to-DRO transfer design.

Runs the full pipeline on the bundled 25-day transfer between two distant
retrograde orbits: solve the chance-constrained covariance-steering
problem, validate the policy with a closed-loop Monte Carlo campaign, and
print the fuel table that the design is judged by.

Usage:  python3 demos/dro_transfer_walkthrough.py [outdir]
"""

import sys
from pathlib import Path

import numpy as np

from covsteer import analysis, cli, mc, scvx, subproblem

outdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out/dro_dro")

# -- 1. the scenario ---------------------------------------------------------
# Every dimensional quantity in the YAML carries a unit tag; parse_scenario
# hands back a fully nondimensional problem definition.
sc, params, ref_path = cli.parse_scenario("dro_dro")
conv = cli.UnitConverter(sc.constants)
print(f"scenario {sc.name}: {sc.n} segments over "
      f"{conv.from_nd(sc.grid.nodes[-1], 'days'):.1f} days, "
      f"u_max = {conv.from_nd(sc.u_max, 'mm/s^2'):.3f} mm/s^2")

# -- 2. solve ----------------------------------------------------------------
# The bundled reference is a minimum-energy deterministic solution whose
# final segments coast; that matters because the execution-error noise a
# burning segment injects near arrival cannot be removed by any feedback.
x0, u0 = cli.load_reference_csv(ref_path)
report = scvx.run(sc, x0, u0, params, log=cli._print_iteration)
print(f"converged={report.converged} in {report.iterations} iterations")
print(f"nominal dv      = {conv.from_nd(report.dv_nominal, 'm/s'):8.2f} m/s")
print(f"dv99 bound      = {conv.from_nd(report.dv99_bound, 'm/s'):8.2f} m/s")
print(f"losslessness gap = {subproblem.losslessness_gap(report.iterate):.2e} "
      "(scaled units; ~machine precision after the polish step)")
cli.save_solution(outdir, report)

# -- 3. Monte Carlo validation ----------------------------------------------
# 200 closed-loop samples: initial dispersion, navigation errors, Gates
# execution errors and stochastic accelerations, flown with the designed
# feedback gains through the full nonlinear dynamics.
campaign = mc.run_campaign(report, 200, base_seed=42)
stats = analysis.compare_statistics(campaign, report)
print(f"diverged samples       : {int(campaign.diverged.sum())}/200")
print(f"terminal containment   : {stats['terminal_contained']}")
print(f"empirical dv99         : "
      f"{conv.from_nd(campaign.dv99_empirical, 'm/s'):.2f} m/s "
      f"(bound {conv.from_nd(report.dv99_bound, 'm/s'):.2f})")
print(f"worst violation rate   : {campaign.violation_rates.max():.4f} "
      "(chance constraint allows 0.01)")

# -- 4. where do corrections happen? ----------------------------------------
bounds, empirical = analysis.tcm_profile(report, campaign)
k = int(np.argmax(bounds))
print(f"largest correction quantile at node {k} "
      f"({conv.from_nd(bounds[k], 'mm/s^2'):.4f} mm/s^2 bound, "
      f"{conv.from_nd(empirical[k], 'mm/s^2'):.4f} empirical)")
print(f"artifacts in {outdir}/")
