import numpy as np
import pytest

from covsteer import cr3bp, discretize
from covsteer.cr3bp import SystemConstants
from covsteer.discretize import TimeGrid

from conftest import DRO1_IC

C = SystemConstants()
U_TEST = np.array([2e-3, -1e-3, 5e-4])


def test_grid_validation():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 1.0, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([[0.0, 1.0]]))
    g = TimeGrid.uniform(0.0, 2.0, 4)
    assert g.n == 4
    assert np.allclose(g.dt, 0.5)


def test_flow_degenerate_interval():
    assert np.array_equal(discretize.flow(DRO1_IC, np.zeros(3), 1.0, 1.0, C),
                          DRO1_IC)
    with pytest.raises(ValueError):
        discretize.flow(DRO1_IC, np.zeros(3), 1.0, 0.5, C)


@pytest.fixture(scope="module")
def segment():
    return discretize.discretize_segment(DRO1_IC, U_TEST, 0.0, 0.2,
                                         np.zeros((6, 3)), C)


def test_affine_map_consistent_with_endpoint(segment):
    assert np.abs(segment.affine_map(DRO1_IC, U_TEST)
                  - segment.endpoint).max() <= 1e-12


def test_endpoint_matches_flow(segment):
    xf = discretize.flow(DRO1_IC, U_TEST, 0.0, 0.2, C)
    assert np.abs(segment.endpoint - xf).max() <= 1e-10


def test_stm_vs_central_finite_differences(segment):
    h = 1e-7
    a_fd = np.empty((6, 6))
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        a_fd[:, i] = (discretize.flow(DRO1_IC + e, U_TEST, 0.0, 0.2, C)
                      - discretize.flow(DRO1_IC - e, U_TEST, 0.0, 0.2, C)) / (2 * h)
    assert np.abs(segment.a - a_fd).max() / np.abs(segment.a).max() <= 1e-5


def test_control_influence_vs_central_finite_differences(segment):
    h = 1e-7
    b_fd = np.empty((6, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        b_fd[:, i] = (discretize.flow(DRO1_IC, U_TEST + e, 0.0, 0.2, C)
                      - discretize.flow(DRO1_IC, U_TEST - e, 0.0, 0.2, C)) / (2 * h)
    assert np.abs(segment.b - b_fd).max() / np.abs(segment.b).max() <= 1e-5


def test_affine_map_first_order_accuracy(segment):
    rng = np.random.default_rng(3)
    for _ in range(3):
        dx = 1e-5 * rng.standard_normal(6)
        pred = segment.affine_map(DRO1_IC + dx, U_TEST)
        true = discretize.flow(DRO1_IC + dx, U_TEST, 0.0, 0.2, C)
        assert np.abs(pred - true).max() <= 1e-8  # O(|dx|^2)


def test_process_noise_short_segment_analytic():
    """For small dt, the accumulated noise covariance is G G^T dt + O(dt^2)."""
    sigma = 1e-4
    g = np.zeros((6, 3))
    g[3:] = sigma * np.eye(3)
    dt = 1e-3
    seg = discretize.discretize_segment(DRO1_IC, np.zeros(3), 0.0, dt, g, C)
    expected = g @ g.T * dt
    assert np.abs(seg.phi_p - expected).max() <= 1e-3 * sigma**2 * dt


def test_noise_factor_roundtrip():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((6, 6))
    psd = m @ m.T
    f = discretize.noise_factor(psd)
    assert np.abs(f @ f.T - psd).max() <= 1e-10
    assert np.abs(f - f.T).max() <= 1e-12


def test_noise_factor_rejects_indefinite():
    with pytest.raises(RuntimeError):
        discretize.noise_factor(np.diag([1.0, -1.0, 0, 0, 0, 0]))


def test_noise_factor_clamps_roundoff():
    f = discretize.noise_factor(np.diag([1.0, -1e-14, 0, 0, 0, 0]))
    assert np.all(np.linalg.eigvalsh(f) >= 0)


def test_discretize_all_validates_shapes():
    grid = TimeGrid.uniform(0.0, 1.0, 3)
    with pytest.raises(ValueError):
        discretize.discretize_all(np.zeros((3, 6)), np.zeros((3, 3)), grid,
                                  np.zeros((6, 3)), C)


def test_discretize_all_parallel_matches_serial():
    grid = TimeGrid.uniform(0.0, 0.6, 3)
    x = np.empty((4, 6))
    x[0] = DRO1_IC
    u = np.tile(U_TEST, (3, 1))
    for k in range(3):
        x[k + 1] = discretize.flow(x[k], u[k], grid.nodes[k], grid.nodes[k + 1], C)
    g = np.zeros((6, 3))
    g[3:] = 1e-6 * np.eye(3)
    serial = discretize.discretize_all(x, u, grid, g, C)
    parallel = discretize.discretize_all(x, u, grid, g, C, workers=2)
    for s, p in zip(serial, parallel):
        assert np.array_equal(s.a, p.a)
        assert np.array_equal(s.b, p.b)
        assert np.array_equal(s.phi_p, p.phi_p)
        assert np.array_equal(s.endpoint, p.endpoint)


def test_stm_determinant_liouville(segment):
    """det(STM) = exp(integral tr A dt) = 1: the CR3BP flow is volume
    preserving (tr A = 0 identically)."""
    assert abs(np.linalg.det(segment.a) - 1.0) <= 1e-9
