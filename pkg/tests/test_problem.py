import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import gammainc

from covsteer.cr3bp import SystemConstants
from covsteer.problem import (Scaling, UnitConverter, apply_scaling,
                              chi2_quantile, dv99_bound)

from conftest import make_toy_config

C = SystemConstants()


def _chi2_quantile_oracle(dof, p, lo=0.0, hi=200.0, tol=1e-12):
    """Bisection on the regularized lower incomplete gamma function,
    independent of the distribution machinery used by the library."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gammainc(dof / 2.0, mid / 2.0) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def test_chi2_quantile_vs_incomplete_gamma_bisection():
    assert abs(chi2_quantile(3, 0.99) - _chi2_quantile_oracle(3, 0.99)) <= 1e-9
    for dof, p in [(1, 0.5), (3, 0.9), (3, 0.999), (6, 0.99), (2, 0.01)]:
        assert abs(chi2_quantile(dof, p) - _chi2_quantile_oracle(dof, p)) <= 1e-9


def test_chi2_quantile_validation():
    for bad in (0.0, 1.0, -0.5, 2.0):
        with pytest.raises(ValueError):
            chi2_quantile(3, bad)
    with pytest.raises(ValueError):
        chi2_quantile(0, 0.5)


def test_dv99_bound_formula():
    u = np.array([3e-3, 4e-3, 0.0])
    assert dv99_bound(u, np.zeros((3, 3))) == pytest.approx(5e-3, rel=1e-15)
    y = np.diag([1e-8, 4e-8, 9e-8])
    expected = 5e-3 + np.sqrt(chi2_quantile(3, 0.99)) * 3e-4
    assert dv99_bound(u, y) == pytest.approx(expected, rel=1e-12)
    # negative roundoff eigenvalues are clamped
    assert dv99_bound(np.zeros(3), -1e-30 * np.eye(3)) == 0.0


UNIT_TAGS = ["nd", "km", "m", "km/s", "m/s", "mm/s", "km/s^2", "m/s^2",
             "mm/s^2", "km/s^1.5", "s", "days", "rad", "deg", "frac", "percent"]


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(UNIT_TAGS), st.floats(1e-12, 1e6))
def test_unit_round_trip(unit, value):
    conv = UnitConverter(C)
    back = conv.from_nd(conv.to_nd(value, unit), unit)
    assert back == pytest.approx(value, rel=1e-14)


def test_unit_reference_values():
    conv = UnitConverter(C)
    assert conv.to_nd(384748.0, "km") == pytest.approx(1.0, rel=1e-15)
    assert conv.to_nd(1.0, "days") == pytest.approx(86400.0 / 375700.0, rel=1e-15)
    # 1 mm/s^2 in LU/TU^2
    assert conv.to_nd(1.0, "mm/s^2") == pytest.approx(
        1e-6 * 375700.0**2 / 384748.0, rel=1e-15)
    assert conv.to_nd(90.0, "deg") == pytest.approx(np.pi / 2, rel=1e-15)
    assert conv.to_nd(5.0, "percent") == pytest.approx(0.05, rel=1e-15)
    with pytest.raises(ValueError):
        conv.to_nd(1.0, "furlong")


@settings(max_examples=30, deadline=None)
@given(st.floats(1.0, 1e4))
def test_scaling_round_trip(d):
    s = Scaling(d)
    rng = np.random.default_rng(4)
    m = rng.standard_normal((6, 6))
    assert np.allclose(s.unscale_cov(s.scale_cov(m)), m, rtol=1e-14)
    tau = rng.random(5)
    assert np.allclose(s.unscale_tau(s.scale_tau(tau)), tau, rtol=1e-15)


def test_config_validation():
    sc, _ = make_toy_config()
    from dataclasses import replace
    with pytest.raises(ValueError):
        replace(sc, eps_u=0.0)
    with pytest.raises(ValueError):
        replace(sc, u_max=-1.0)
    with pytest.raises(ValueError):
        replace(sc, d_scale=0.5)
    with pytest.raises(ValueError):
        replace(sc, eps_y=0.0)
    with pytest.raises(ValueError):
        replace(sc, p_f=-np.eye(6))
    with pytest.raises(ValueError):
        replace(sc, p_max=-np.eye(6))


def test_noise_diffusion_shape():
    sc, _ = make_toy_config()
    g = sc.noise_diffusion
    assert np.array_equal(g[:3], np.zeros((3, 3)))
    assert np.array_equal(g[3:], sc.sigma_a * np.eye(3))


def test_apply_scaling_is_d2(toy_report):
    sc = toy_report.config
    scaled = apply_scaling(sc, toy_report.pre)
    d2 = sc.d_scale**2
    assert np.allclose(scaled.p_f, d2 * sc.p_f, rtol=1e-15)
    for q, q0 in zip(scaled.q_hat, toy_report.pre.q_hat):
        assert np.allclose(q, d2 * np.asarray(q0), rtol=1e-15)
    assert np.allclose(scaled.p_hat_0,
                       d2 * (sc.p_hat_0_prior + toy_report.pre.q_hat[0]),
                       rtol=1e-14)
