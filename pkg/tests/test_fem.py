import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from heatoed.errors import DefinitenessError
from heatoed.fem import (
    MaterialModel,
    SPDFactor,
    assemble_interface_coupling,
    assemble_mass,
    assemble_prior_precision,
    assemble_robin_mass,
    assemble_stiffness,
    assemble_volume_stiffness,
    cholesky,
)
from heatoed.mesh import (
    LABEL_COIL,
    LABEL_CORE,
    TAG_ROBIN,
    DomainSpec,
    Mesh,
    build_transformer_mesh,
    build_unit_square_mesh,
)

RHO_CORE, RHO_COIL = 3.43e6, 3.26e6


def single_triangle_mesh(p0, p1, p2):
    nodes = np.array([p0, p1, p2], dtype=float)
    tris = np.array([[0, 1, 2]])
    edges = np.array([[0, 1], [1, 2], [2, 0]])
    tags = np.full(3, TAG_ROBIN)
    return Mesh(nodes, tris, [LABEL_CORE], edges, tags, np.zeros(3, bool))


@pytest.fixture(scope="module")
def transformer():
    return build_transformer_mesh(DomainSpec(target_h=2.5e-3))


@pytest.fixture(scope="module")
def transformer_material():
    return MaterialModel(
        kappa={LABEL_CORE: 10.0, LABEL_COIL: 26.0},
        rho={LABEL_CORE: RHO_CORE, LABEL_COIL: RHO_COIL},
        h=14.0,
        kappa_ins=0.028,
        d_ins=5.0e-4,
    )


def test_single_triangle_mass_closed_form():
    mesh = single_triangle_mesh([0, 0], [2, 0], [0, 3])
    area = 3.0
    local = assemble_mass(mesh, 1.0).toarray()
    expected = area / 12.0 * np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]])
    assert np.allclose(local, expected, rtol=1e-14)


def test_mass_partition_of_unity():
    mesh = build_unit_square_mesh(16)
    M = assemble_mass(mesh, 1.0)
    ones = np.ones(mesh.n_nodes)
    assert ones @ (M @ ones) == pytest.approx(1.0, abs=1e-12)


def test_weighted_mass_transformer(transformer):
    M_rho = assemble_mass(transformer, {LABEL_CORE: RHO_CORE, LABEL_COIL: RHO_COIL})
    ones = np.ones(transformer.n_nodes)
    areas = transformer.triangle_areas()
    area_coil = areas[transformer.tri_labels == LABEL_COIL].sum()
    area_core = areas[transformer.tri_labels == LABEL_CORE].sum()
    expected = RHO_CORE * area_core + RHO_COIL * area_coil
    assert ones @ (M_rho @ ones) == pytest.approx(expected, rel=1e-12)


def test_stiffness_constant_vector_sees_only_robin():
    mesh = build_unit_square_mesh(12)
    K = assemble_stiffness(mesh, MaterialModel.homogeneous(h=1.0))
    ones = np.ones(mesh.n_nodes)
    assert ones @ (K @ ones) == pytest.approx(4.0, abs=1e-10)
    K_vol = assemble_volume_stiffness(mesh, 1.0)
    assert abs(ones @ (K_vol @ ones)) < 1e-12


def test_pencil_positive_definite():
    mesh = build_unit_square_mesh(8)
    M = assemble_mass(mesh, 1.0).toarray()
    K = assemble_stiffness(mesh, MaterialModel.homogeneous()).toarray()
    eigs = sla.eigh(K, M, eigvals_only=True)
    assert eigs.min() > 0


def test_anisotropic_local_stiffness_matches_vandermonde_oracle():
    # independent oracle: affine basis coefficients from the Vandermonde
    # system, exact integral of the constant-gradient integrand
    verts = np.array([[0.2, 0.1], [1.1, 0.3], [0.4, 0.9]])
    kappa = np.diag([2.0, 1.0])
    V = np.column_stack([np.ones(3), verts])
    grads = np.linalg.solve(V, np.eye(3))[1:, :].T  # (3, 2) basis gradients
    area = 0.5 * abs(np.linalg.det(V))
    expected = area * grads @ kappa @ grads.T

    mesh = single_triangle_mesh(*verts)
    local = assemble_volume_stiffness(mesh, kappa).toarray()
    assert np.allclose(local, expected, rtol=1e-12)


def test_interface_local_block_and_kernel():
    # two coincident edges of length 1, one triangle per side
    nodes = np.array(
        [[0, 0], [1, 0], [0.5, 1.0], [0, 0], [1, 0], [0.5, -1.0]], dtype=float
    )
    tris = np.array([[0, 1, 2], [3, 5, 4]])
    labels = [LABEL_CORE, LABEL_COIL]
    edges = np.array([[1, 2], [2, 0], [3, 5], [5, 4]])
    mesh = Mesh(
        nodes,
        tris,
        labels,
        edges,
        np.full(4, TAG_ROBIN),
        np.zeros(4, bool),
        interface_edges=np.array([[0, 1, 3, 4]]),
    )
    c = 0.028 / 5e-4
    assert c == pytest.approx(56.0)
    C = assemble_interface_coupling(mesh, 0.028, 5e-4).toarray()
    pattern = np.array(
        [
            [2, 1, -2, -1],
            [1, 2, -1, -2],
            [-2, -1, 2, 1],
            [-1, -2, 1, 2],
        ]
    )
    block = C[np.ix_([0, 1, 3, 4], [0, 1, 3, 4])]
    assert np.allclose(block, c / 6.0 * pattern, rtol=1e-14)
    # kernel: equal values across each duplicated pair
    u = np.array([3.0, -2.0, 7.0, 3.0, -2.0, 5.0])
    assert np.allclose(C @ u, 0.0, atol=1e-12)


def test_transformer_stiffness_coercive(transformer, transformer_material):
    K = assemble_stiffness(transformer, transformer_material)
    assert (K - K.T).nnz == 0
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.standard_normal(transformer.n_nodes)
        assert x @ (K @ x) > 0


def test_assembled_matrices_bitwise_symmetric(transformer, transformer_material):
    for mat in (
        assemble_mass(transformer, 1.0),
        assemble_stiffness(transformer, transformer_material),
        assemble_prior_precision(transformer, 1e-7, 1e-8),
    ):
        assert (mat - mat.T).nnz == 0


def test_prior_precision_reduces_to_mass():
    mesh = build_unit_square_mesh(6)
    P = assemble_prior_precision(mesh, beta=1.0, alpha=0.0)
    M = assemble_mass(mesh, 1.0)
    assert (P - M).nnz == 0


def test_prior_precision_experiment_values():
    mesh = build_unit_square_mesh(6)
    for alpha, beta in ((10.0, 0.1), (1e-8, 1e-7)):
        P = assemble_prior_precision(mesh, beta=beta, alpha=alpha)
        eigs = sla.eigh(P.toarray(), eigvals_only=True)
        assert eigs.min() > 0


def test_cholesky_identity():
    # factor of the identity is the identity up to the fill-reducing permutation
    eye = sp.identity(7, format="csr")
    f = cholesky(eye)
    v = np.arange(7.0)
    assert np.allclose(f.solve(v), v)
    assert np.array_equal(np.sort(f.apply_l(v)), v)  # pure permutation
    assert np.allclose(f.apply_lt(f.apply_l(v)), v)


def test_cholesky_random_spd_solve():
    rng = np.random.default_rng(1)
    R = rng.standard_normal((50, 50))
    A = sp.csr_matrix(R @ R.T + 50 * np.eye(50))
    f = cholesky(A)
    b = rng.standard_normal(50)
    x = f.solve(b)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-10


def test_cholesky_factor_identities():
    mesh = build_unit_square_mesh(10)
    P = assemble_prior_precision(mesh, beta=0.1, alpha=10.0)
    f = cholesky(P)
    rng = np.random.default_rng(2)
    v = rng.standard_normal(mesh.n_nodes)
    # L^T L reconstructs the matrix through the factor operations
    assert np.allclose(f.apply_lt(f.apply_l(v)), P @ v, rtol=1e-10)
    # L L^{-1} = identity on random vectors
    assert np.allclose(f.apply_l(f.solve_l(v)), v, rtol=1e-10)
    assert np.allclose(f.apply_lt(f.solve_lt(v)), v, rtol=1e-10)
    # covariance action equals the full solve
    assert np.allclose(f.solve_l(f.solve_lt(v)), f.solve(v), rtol=1e-9)


def test_cholesky_rejects_indefinite():
    A = sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(DefinitenessError):
        SPDFactor(A)


def test_robin_mass_only_on_robin_edges(transformer):
    R = assemble_robin_mass(transformer, 14.0)
    ones = np.ones(transformer.n_nodes)
    robin = transformer.boundary_edges[transformer.boundary_tags == TAG_ROBIN]
    length = transformer.edge_lengths(robin).sum()
    assert ones @ (R @ ones) == pytest.approx(14.0 * length, rel=1e-12)
