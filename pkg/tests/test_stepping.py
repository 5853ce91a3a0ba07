import numpy as np
import pytest
import scipy.sparse as sp

from heatoed.errors import GuardError
from heatoed.fem import MaterialModel, assemble_mass, assemble_stiffness, cholesky
from heatoed.mesh import build_unit_square_mesh
from heatoed.sensing import SensorDesign, build_boundary_pixel_rows, build_internal_sensor_rows
from heatoed.stepping import (
    ForwardBlocks,
    MidpointPropagator,
    TimeGrid,
    apply_forward,
    assemble_forward_rows,
    exact_propagator,
    propagate_midpoint,
    spectral_reference,
    steady_state,
    thermal_time_constant,
)


@pytest.fixture(scope="module")
def square():
    mesh = build_unit_square_mesh(12)
    M = assemble_mass(mesh, 1.0)
    K = assemble_stiffness(mesh, MaterialModel.homogeneous())
    return mesh, M, K


def gaussian_load(mesh, mass):
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    return mass @ np.exp(-30 * ((x - 0.4) ** 2 + (y - 0.55) ** 2))


def test_zero_load_stays_zero(square):
    _, M, K = square
    snaps = propagate_midpoint(M, K, np.zeros(M.shape[0]), TimeGrid(0.5, 4, 3))
    assert np.all(snaps == 0.0)


def test_scalar_surrogate_recursion():
    # n = 1 with M = K = 1 and unit load: closed-form midpoint recursion
    M = sp.csr_matrix(np.array([[1.0]]))
    K = sp.csr_matrix(np.array([[1.0]]))
    grid = TimeGrid(2.0, 10, 4)
    snaps = propagate_midpoint(M, K, np.array([1.0]), grid)
    dt = grid.dt
    u = 0.0
    ref = []
    for k in range(grid.n_steps):
        u = ((1 - dt / 2) * u + dt) / (1 + dt / 2)
        if (k + 1) % grid.substeps == 0:
            ref.append(u)
    assert np.allclose(snaps[:, 0], ref, rtol=1e-14)
    # converges toward 1 - exp(-t)
    t = grid.observation_times
    assert np.allclose(snaps[:, 0], 1 - np.exp(-t), atol=5e-3)


def test_spectral_reference_limits(square):
    _, M, K = square
    load = gaussian_load(square[0], M)
    assert np.allclose(spectral_reference(M, K, load, 0.0), 0.0)
    u_inf = spectral_reference(M, K, load, 1e6)
    u_steady = steady_state(cholesky(K), load)
    assert np.allclose(u_inf, u_steady, rtol=1e-10)


def test_spectral_vs_matrix_exponential(square):
    _, M, K = square
    load = gaussian_load(square[0], M)
    u1 = spectral_reference(M, K, load, 0.37)
    u2 = exact_propagator(M, K, load, 0.37)
    assert np.abs(u1 - u2).max() < 1e-11 * np.abs(u1).max()


def test_spectral_guard():
    n = 2100
    M = sp.identity(n, format="csr")
    with pytest.raises(GuardError):
        spectral_reference(M, M, np.ones(n), 1.0)


def test_midpoint_second_order(square):
    mesh, M, K = square
    load = gaussian_load(mesh, M)
    ref = spectral_reference(M, K, load, 0.6)
    errs = []
    for s in (32, 64, 128):
        u = MidpointPropagator(M, K, TimeGrid(0.6, 1, s)).final(load)
        errs.append(np.abs(u - ref).max())
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(ratios > 3.4) and np.all(ratios < 4.6)


def test_midpoint_stability_and_monotone_heating(square):
    # A-stable (not L-stable): steps must resolve the slowest decay scale
    # for the transient to stay below the steady profile
    mesh, M, K = square
    load = gaussian_load(mesh, M)
    steady = steady_state(cholesky(K), load)
    bound = np.abs(steady).max() * (1 + 1e-6)
    for s in (4, 8, 32):
        snaps = propagate_midpoint(M, K, load, TimeGrid(5.0, 5, s))
        assert np.abs(snaps).max() <= bound
        assert snaps.min() >= -1e-10 * np.abs(steady).max()


def test_forward_rows_match_brute_force(square):
    mesh, M, K = square
    grid = TimeGrid(0.6, 5, 4)
    prop = MidpointPropagator(M, K, grid)
    design = SensorDesign(np.array([[0.3, 0.3], [0.7, 0.6], [0.5, 0.8]]), 0.05)
    rows = sp.vstack(
        [
            build_internal_sensor_rows(mesh, design).matrix,
            build_boundary_pixel_rows(mesh, 2).matrix,
        ]
    ).tocsr()
    F = assemble_forward_rows(M, prop, rows)

    brute = np.zeros_like(F)
    snaps = prop.observe(M @ np.eye(mesh.n_nodes))
    m_s = rows.shape[0]
    for j in range(grid.n_obs):
        brute[j * m_s : (j + 1) * m_s] = rows @ snaps[j]
    rel = np.linalg.norm(F - brute) / np.linalg.norm(brute)
    assert rel < 1e-10


def test_forward_adjoint_identity(square):
    mesh, M, K = square
    grid = TimeGrid(0.6, 4, 3)
    prop = MidpointPropagator(M, K, grid)
    rows = build_boundary_pixel_rows(mesh, 6).matrix
    F = assemble_forward_rows(M, prop, rows)
    rng = np.random.default_rng(0)
    f = rng.standard_normal(mesh.n_nodes)
    y = rng.standard_normal(F.shape[0])
    assert abs((F @ f) @ y - f @ (F.T @ y)) < 1e-10 * abs((F @ f) @ y + 1)


def test_apply_forward_linearity_and_layout(square):
    mesh, M, K = square
    grid = TimeGrid(0.6, 3, 3)
    prop = MidpointPropagator(M, K, grid)
    design = SensorDesign(np.array([[0.4, 0.4], [0.6, 0.6]]), 0.05)
    f_int = assemble_forward_rows(M, prop, build_internal_sensor_rows(mesh, design).matrix)
    f_bdry = assemble_forward_rows(M, prop, build_boundary_pixel_rows(mesh, 4).matrix)
    blocks = ForwardBlocks(f_int, f_bdry, grid.n_obs, mesh.n_nodes)
    assert blocks.m_int == 2 and blocks.m_bdry == 4
    rng = np.random.default_rng(1)
    x = rng.standard_normal(mesh.n_nodes)
    z = rng.standard_normal(mesh.n_nodes)
    y = apply_forward(blocks, x)
    assert y.shape[0] == (2 + 4) * 3
    assert np.all(apply_forward(blocks, np.zeros_like(x)) == 0.0)
    lhs = apply_forward(blocks, 2.0 * x + 3.0 * z)
    rhs = 2.0 * apply_forward(blocks, x) + 3.0 * apply_forward(blocks, z)
    assert np.allclose(lhs, rhs, rtol=1e-12)
    y_int, y_bdry = blocks.split_data(y)
    assert y_int.shape[0] == 6 and y_bdry.shape[0] == 12


def test_forward_rows_steady_limit(square):
    # smooth source far beyond the slowest transient approaches B K^{-1} M x
    mesh, M, K = square
    rows = build_boundary_pixel_rows(mesh, 5).matrix
    grid = TimeGrid(60.0, 1, 800)
    prop = MidpointPropagator(M, K, grid)
    F = assemble_forward_rows(M, prop, rows)
    x = np.exp(-8 * ((mesh.nodes[:, 0] - 0.5) ** 2 + (mesh.nodes[:, 1] - 0.4) ** 2))
    direct = rows @ cholesky(K).solve(M @ x)
    assert np.allclose(F @ x, direct, rtol=1e-10)


def test_thermal_time_constant(square):
    import scipy.linalg as sla

    mesh, M, K = square
    tau = thermal_time_constant(M, K)
    eigs = sla.eigh(K.toarray(), M.toarray(), eigvals_only=True)
    assert tau == pytest.approx(1.0 / eigs.min(), rel=1e-6)
