"""Shared fixtures: a fast 5-node instance solved once per session.

The toy instance starts on the first bundled distant-retrograde orbit and
targets the ballistic endpoint of a 1 TU arc, so the zero-control
reference is dynamically feasible and the solve converges in a few
iterations.  The terminal covariance target sits well below the
open-loop dispersion, which forces genuinely nonzero feedback gains.
"""

import numpy as np
import pytest

from covsteer import discretize, mc, scvx
from covsteer.cr3bp import SystemConstants
from covsteer.discretize import TimeGrid
from covsteer.problem import ScenarioConfig
from covsteer.uncertainty import GatesParams, ObservationModel

DRO1_IC = np.array([0.58041127991124, 0.0, 0.0, 0.0, 0.973651613293327, 0.0])
DRO1_PERIOD = 5.71743682447432


def make_toy_config(d_scale=100.0, n=5, tof=1.0):
    c = SystemConstants()
    grid = TimeGrid.uniform(0.0, tof, n)
    x = np.empty((n + 1, 6))
    x[0] = DRO1_IC
    for k in range(n):
        x[k + 1] = discretize.flow(x[k], np.zeros(3), grid.nodes[k],
                                   grid.nodes[k + 1], c)
    lu, tu = c.lu_km, c.tu_s
    km, ms = 1.0 / lu, 1e-3 * tu / lu
    mmss = 1e-6 * tu**2 / lu
    sc = ScenarioConfig(
        name="toy", constants=c, grid=grid, mu0=DRO1_IC.copy(),
        p_hat_0_prior=np.diag([(20 * km) ** 2] * 3 + [(0.05 * ms) ** 2] * 3),
        p_tilde_0_prior=np.diag([(20 * km) ** 2] * 3 + [(0.05 * ms) ** 2] * 3),
        mu_f=x[-1].copy(),
        p_f=np.diag([(60 * km) ** 2] * 3 + [(0.4 * ms) ** 2] * 3),
        p_max=None, u_max=0.5, eps_u=0.01,
        gates=GatesParams(sigma1=1e-3 * mmss, sigma2=0.01,
                          sigma3=1e-3 * mmss, sigma4=np.deg2rad(0.5)),
        obs=ObservationModel(sigma_r=10 * km, sigma_v=0.1 * ms),
        sigma_a=1e-10 * tu**1.5 / lu,
        d_scale=d_scale,
    )
    return sc, x


@pytest.fixture(scope="session")
def toy_sc():
    sc, _ = make_toy_config()
    return sc


@pytest.fixture(scope="session")
def toy_ref():
    _, x = make_toy_config()
    return x, np.zeros((5, 3))


@pytest.fixture(scope="session")
def toy_report(toy_sc, toy_ref):
    rep = scvx.run(toy_sc, toy_ref[0], toy_ref[1],
                   scvx.ScvxParams(max_iters=40))
    assert rep.converged
    return rep


@pytest.fixture(scope="session")
def toy_mc(toy_report):
    return mc.run_campaign(toy_report, 2000, base_seed=7)
