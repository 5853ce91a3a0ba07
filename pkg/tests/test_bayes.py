import numpy as np
import pytest
import scipy.sparse as sp

from heatoed.bayes import (
    NoiseModel,
    PriorModel,
    calibrate_noise,
    posterior_covariance_dense,
    posterior_mean,
    reconstruction_error,
    sample_prior,
    simulate_measurements,
)
from heatoed.errors import DataError
from heatoed.fem import MaterialModel, assemble_mass, assemble_stiffness
from heatoed.mesh import build_unit_square_mesh
from heatoed.sensing import SensorDesign, build_boundary_pixel_rows, build_internal_sensor_rows
from heatoed.sources import generate_random_source
from heatoed.stepping import ForwardBlocks, MidpointPropagator, TimeGrid, assemble_forward_rows


@pytest.fixture(scope="module")
def setup():
    mesh = build_unit_square_mesh(14)
    M = assemble_mass(mesh, 1.0)
    K = assemble_stiffness(mesh, MaterialModel.homogeneous())
    grid = TimeGrid(0.6, 6, 5)
    prop = MidpointPropagator(M, K, grid)
    prior = PriorModel.from_mesh(mesh, alpha=10.0, beta=0.1)
    design = SensorDesign(np.array([[0.3, 0.35], [0.7, 0.55], [0.45, 0.8]]), 0.05)
    f_int = assemble_forward_rows(M, prop, build_internal_sensor_rows(mesh, design).matrix)
    f_bdry = assemble_forward_rows(M, prop, build_boundary_pixel_rows(mesh, 16).matrix)
    blocks = ForwardBlocks(f_int, f_bdry, grid.n_obs, mesh.n_nodes)
    truth = generate_random_source(mesh, 42)
    return mesh, M, prior, blocks, truth


def test_calibrate_noise_formula():
    noise = calibrate_noise(np.array([2.0, -10.0, 3.0]), np.array([1.0, 5.0]), 0.5)
    assert noise.gamma_int == pytest.approx(0.05)
    assert noise.gamma_bdry == pytest.approx(0.025)


def test_calibrate_noise_rejects_zero_data():
    with pytest.raises(DataError):
        calibrate_noise(np.zeros(4), None, 0.5)


def test_simulate_zero_noise_exact(setup):
    _, _, _, blocks, truth = setup
    noise = NoiseModel(0.0, 0.0)
    y = simulate_measurements(blocks, truth, noise, 3)
    assert np.array_equal(y, blocks.apply(truth))


def test_simulate_seed_reproducible(setup):
    _, _, _, blocks, truth = setup
    noise = NoiseModel(0.1, 0.2)
    y1 = simulate_measurements(blocks, truth, noise, 99)
    y2 = simulate_measurements(blocks, truth, noise, 99)
    assert np.array_equal(y1, y2)
    y3 = simulate_measurements(blocks, truth, noise, 100)
    assert not np.array_equal(y1, y3)


def test_simulate_noise_statistics(setup):
    _, _, _, blocks, truth = setup
    noise = NoiseModel(0.37, 0.11)
    clean = blocks.apply(truth)
    draws = np.array(
        [simulate_measurements(blocks, truth, noise, s) - clean for s in range(10_000)]
    )
    std = draws.std(axis=0)
    expected = noise.deviations(blocks)
    assert np.all(np.abs(std - expected) < 0.03 * expected)


def test_posterior_no_measurements_returns_prior_mean(setup):
    mesh, _, prior, _, _ = setup
    blocks = ForwardBlocks(None, None, 1, mesh.n_nodes)
    x = posterior_mean(prior, NoiseModel(1.0, 1.0), blocks, np.zeros(0))
    assert np.array_equal(x, prior.mean)


def test_posterior_dual_paths_agree(setup):
    mesh, M, prior, blocks, truth = setup
    ci, cb = blocks.split_data(blocks.apply(truth))
    noise = calibrate_noise(ci, cb, 1.0)
    y = simulate_measurements(blocks, truth, noise, 7)
    x_n = posterior_mean(prior, noise, blocks, y, method="normal")
    x_w = posterior_mean(prior, noise, blocks, y, method="woodbury")
    assert np.linalg.norm(x_n - x_w) / np.linalg.norm(x_n) < 1e-8


def test_posterior_covariance_forms_agree(setup):
    mesh, M, prior, blocks, truth = setup
    ci, cb = blocks.split_data(blocks.apply(truth))
    noise = calibrate_noise(ci, cb, 1.0)
    c1 = posterior_covariance_dense(prior, noise, blocks, form="precision")
    c2 = posterior_covariance_dense(prior, noise, blocks, form="woodbury")
    assert np.linalg.norm(c1 - c2) / np.linalg.norm(c1) < 1e-8
    msp = sp.csr_matrix(M)
    t1 = msp.multiply(c1).sum()
    t2 = msp.multiply(c2).sum()
    assert abs(t1 - t2) / abs(t1) < 1e-8


def test_posterior_covariance_no_data_is_prior(setup):
    mesh, _, prior, _, _ = setup
    blocks = ForwardBlocks(None, None, 1, mesh.n_nodes)
    cov = posterior_covariance_dense(prior, NoiseModel(1.0, 1.0), blocks)
    cov_pr = prior.factor.solve(np.eye(mesh.n_nodes))
    assert np.allclose(cov, 0.5 * (cov_pr + cov_pr.T), rtol=1e-9)


def test_posterior_marginals_never_grow(setup):
    mesh, _, prior, blocks, truth = setup
    ci, cb = blocks.split_data(blocks.apply(truth))
    noise = calibrate_noise(ci, cb, 1.0)
    cov = posterior_covariance_dense(prior, noise, blocks)
    cov_pr = prior.factor.solve(np.eye(mesh.n_nodes))
    assert np.all(np.diag(cov) <= np.diag(cov_pr) + 1e-10)


def test_trace_decreases_with_extra_sensor(setup):
    mesh, M, prior, blocks, truth = setup
    msp = sp.csr_matrix(M)
    ci, cb = blocks.split_data(blocks.apply(truth))
    noise = calibrate_noise(ci, cb, 1.0)
    cov_few = posterior_covariance_dense(
        prior, noise, ForwardBlocks(blocks.f_int[: 2 * blocks.n_obs], blocks.f_bdry, blocks.n_obs, mesh.n_nodes)
    )
    cov_all = posterior_covariance_dense(prior, noise, blocks)
    assert msp.multiply(cov_all).sum() < msp.multiply(cov_few).sum()


def test_posterior_mean_is_tikhonov_minimizer(setup):
    mesh, _, prior, blocks, truth = setup
    ci, cb = blocks.split_data(blocks.apply(truth))
    noise = calibrate_noise(ci, cb, 1.0)
    y = simulate_measurements(blocks, truth, noise, 11)
    x = posterior_mean(prior, noise, blocks, y)
    F = blocks.stacked()
    var = noise.variances(blocks)
    grad = prior.precision @ (x - prior.mean) - F.T @ ((y - F @ x) / var)
    scale = np.abs(prior.precision @ x).max() + np.abs(F.T @ (y / var)).max()
    assert np.abs(grad).max() / scale < 1e-8


def test_posterior_scaling_linearity(setup):
    mesh, _, prior, blocks, truth = setup
    ci, cb = blocks.split_data(blocks.apply(truth))
    noise = calibrate_noise(ci, cb, 1.0)
    y = simulate_measurements(blocks, truth, noise, 5)
    x1 = posterior_mean(prior, noise, blocks, y)
    x2 = posterior_mean(prior, noise, blocks, 3.0 * y)
    assert np.allclose(x2, 3.0 * x1, rtol=1e-11)


def test_noise_information_monotonicity(setup):
    mesh, M, prior, blocks, truth = setup
    msp = sp.csr_matrix(M)
    traces = []
    for g in (0.01, 0.1, 1.0):
        noise = NoiseModel(g, g)
        cov = posterior_covariance_dense(prior, noise, blocks)
        traces.append(msp.multiply(cov).sum())
    assert traces[0] < traces[1] < traces[2]


def test_sample_prior_mean_and_reproducibility(setup):
    _, _, prior, _, _ = setup

    class ZeroRng:
        def standard_normal(self, n):
            return np.zeros(n)

    assert np.array_equal(sample_prior(prior, rng=ZeroRng()), prior.mean)
    s1 = sample_prior(prior, seed=5)
    s2 = sample_prior(prior, seed=5)
    assert np.array_equal(s1, s2)


def test_sample_prior_covariance_small_mesh():
    mesh = build_unit_square_mesh(6)  # 49 nodes
    prior = PriorModel.from_mesh(mesh, alpha=1.0, beta=1.0)
    rng = np.random.default_rng(0)
    samples = np.array([sample_prior(prior, rng=rng) for _ in range(10_000)])
    emp = samples.var(axis=0)
    cov = prior.factor.solve(np.eye(mesh.n_nodes))
    assert np.all(np.abs(emp - np.diag(cov)) < 0.05 * np.diag(cov))


def test_reconstruction_error_cases(setup):
    mesh, M, _, _, truth = setup
    assert reconstruction_error(truth, truth, M) == 0.0
    assert reconstruction_error(np.zeros_like(truth), truth, M) == pytest.approx(1.0)
    assert reconstruction_error(2.0 * truth, truth, M) == pytest.approx(1.0)
    with pytest.raises(DataError):
        reconstruction_error(truth, np.zeros_like(truth), M)
