import numpy as np
import pytest

from heatoed.errors import DesignInfeasibleError
from heatoed.mesh import DomainSpec, build_transformer_mesh, build_unit_square_mesh
from heatoed.sensing import (
    AdmissibleRegion,
    SensorDesign,
    build_boundary_pixel_rows,
    build_internal_sensor_rows,
    internal_row_derivative,
    internal_row_derivatives,
    overlap_penalty,
)


@pytest.fixture(scope="module")
def square():
    return build_unit_square_mesh(24)


def test_pixel_rows_average_constants(square):
    rows = build_boundary_pixel_rows(square, 13)
    sums = np.asarray(rows.matrix.sum(axis=1)).ravel()
    assert np.allclose(sums, 1.0, atol=1e-12)
    const = rows.matrix @ np.full(square.n_nodes, 4.2)
    assert np.allclose(const, 4.2, atol=1e-12)


def test_pixel_rows_on_straight_edge_read_midpoints():
    mesh = build_transformer_mesh(DomainSpec(target_h=2.0e-3))
    m_bdry = 60
    rows = build_boundary_pixel_rows(mesh, m_bdry)
    assert rows.m_s == m_bdry
    # linear field u(x, y) = y; pixels on the straight measured edge should
    # read the segment midpoint ordinates
    readings = rows.matrix @ mesh.nodes[:, 1]
    length = 0.060
    start = -0.030
    midpoints = start + (np.arange(m_bdry) + 0.5) * length / m_bdry
    order = np.sort(readings)
    assert np.allclose(order, np.sort(midpoints), atol=1e-12)
    # each pixel touches only a few nodes
    per_row = np.diff(rows.matrix.indptr)
    assert per_row.max() <= 6


def test_internal_rows_partition_of_unity(square):
    design = SensorDesign(np.array([[0.31, 0.41], [0.62, 0.57]]), 0.05)
    rows = build_internal_sensor_rows(square, design)
    sums = np.asarray(rows.matrix.sum(axis=1)).ravel()
    assert np.allclose(sums, 1.0, atol=1e-12)
    const = rows.matrix @ np.full(square.n_nodes, -2.5)
    assert np.allclose(const, -2.5, atol=1e-12)


def test_internal_rows_linear_field_reads_center(square):
    design = SensorDesign(np.array([[0.37, 0.52]]), 0.06)
    rows = build_internal_sensor_rows(square, design)
    field = 2.0 * square.nodes[:, 0] - 0.7 * square.nodes[:, 1] + 0.3
    reading = float(rows.matrix @ field)
    assert reading == pytest.approx(2.0 * 0.37 - 0.7 * 0.52 + 0.3, abs=1e-12)


def test_internal_rows_quadratic_stencil_value():
    mesh = build_unit_square_mesh(64)
    r = 0.05
    q = 7
    design = SensorDesign(np.array([[0.52, 0.47]]), r, q)
    rows = build_internal_sensor_rows(mesh, design)
    reading = float(rows.matrix @ mesh.nodes[:, 0] ** 2)
    stencil_exact = 0.52**2 + (r**2 / 2.0) * (q - 1) / q
    # interpolation error of x^2 on this mesh is O(h^2) ~ 3e-5
    assert reading == pytest.approx(stencil_exact, abs=2e-4)
    disk_exact = 0.52**2 + r**2 / 4.0
    assert abs(stencil_exact - disk_exact) < r**2  # documented stencil bias


def test_stencil_outside_domain_raises(square):
    design = SensorDesign(np.array([[0.01, 0.5]]), 0.05)
    with pytest.raises(DesignInfeasibleError):
        build_internal_sensor_rows(square, design)


def test_derivative_rows_zero_sum_and_linear_field(square):
    design = SensorDesign(np.array([[0.43, 0.57]]), 0.05)
    der = internal_row_derivative(square, design, 0, 0)
    assert abs(der.sum()) < 1e-12
    assert float(der @ (2.0 * square.nodes[:, 0])) == pytest.approx(2.0, abs=1e-10)
    assert float(der @ np.full(square.n_nodes, 3.3)) == pytest.approx(0.0, abs=1e-12)
    der_y = internal_row_derivative(square, design, 0, 1)
    assert float(der_y @ (2.0 * square.nodes[:, 0])) == pytest.approx(0.0, abs=1e-10)


def test_derivative_matches_finite_difference(square):
    # smooth nodal field, stencil away from element edges
    field = np.sin(3 * square.nodes[:, 0]) * np.cos(2 * square.nodes[:, 1])
    design = SensorDesign(np.array([[0.412, 0.533]]), 0.043)
    delta = 1e-7 * square.diameter()
    for axis in (0, 1):
        der = internal_row_derivative(square, design, 0, axis)
        analytic = float(der @ field)
        shift = np.zeros(2)
        shift[axis] = delta
        up = build_internal_sensor_rows(
            square, design.with_positions(design.positions + shift)
        ).matrix
        dn = build_internal_sensor_rows(
            square, design.with_positions(design.positions - shift)
        ).matrix
        fd = float((up - dn) @ field) / (2 * delta)
        assert analytic == pytest.approx(fd, rel=1e-5)


def test_derivative_equals_boundary_integral_form_on_linear_fields(square):
    # for v = c + g.x the exact boundary form (1/|S|) int_{dS} (nu.q) v dS
    # collapses to q.g, matching the stencil volume form exactly
    g = np.array([1.7, -0.9])
    field = 0.4 + square.nodes @ g
    design = SensorDesign(np.array([[0.61, 0.44]]), 0.05)
    for axis, unit in ((0, np.array([1.0, 0.0])), (1, np.array([0.0, 1.0]))):
        der = internal_row_derivative(square, design, 0, axis)
        assert float(der @ field) == pytest.approx(unit @ g, abs=1e-10)


def test_translation_equivariance(square):
    shift = np.array([0.11, -0.07])
    design = SensorDesign(np.array([[0.45, 0.55]]), 0.04)
    moved = design.with_positions(design.positions + shift)
    g = np.array([0.8, 1.3])
    reading = build_internal_sensor_rows(square, design).matrix @ (square.nodes @ g)
    exp_moved = build_internal_sensor_rows(square, moved).matrix @ (square.nodes @ g)
    assert float(exp_moved - reading) == pytest.approx(shift @ g, abs=1e-12)


def test_derivatives_stacked_layout(square):
    design = SensorDesign(np.array([[0.3, 0.4], [0.6, 0.7]]), 0.04)
    der = internal_row_derivatives(square, design)
    assert der.shape == (4, square.n_nodes)
    single = internal_row_derivative(square, design, 1, 1)
    assert np.allclose(der[3].toarray(), single.toarray())


def test_overlap_penalty_cases():
    design = SensorDesign(np.array([[0.2, 0.2], [0.8, 0.8]]), 0.05)
    value, grad = overlap_penalty(design, 2.0)
    assert value == 0.0 and np.all(grad == 0.0)

    coincident = SensorDesign(np.array([[0.5, 0.5], [0.5, 0.5]]), 0.05)
    value, grad = overlap_penalty(coincident, 2.0)
    assert value == pytest.approx(2.0 * (2 * 0.05) ** 2)
    assert np.all(grad == 0.0)  # non-differentiable point, zero by convention


def test_overlap_penalty_gradient_finite_difference():
    rng = np.random.default_rng(4)
    for _ in range(5):
        pos = rng.uniform(0.3, 0.45, size=(4, 2))
        design = SensorDesign(pos, 0.05)
        value, grad = overlap_penalty(design, 1.7)
        delta = 1e-7
        for s in range(4):
            for a in range(2):
                up = pos.copy()
                up[s, a] += delta
                dn = pos.copy()
                dn[s, a] -= delta
                fd = (
                    overlap_penalty(design.with_positions(up), 1.7)[0]
                    - overlap_penalty(design.with_positions(dn), 1.7)[0]
                ) / (2 * delta)
                assert grad[s, a] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_admissible_region_projection():
    mesh = build_transformer_mesh(DomainSpec(target_h=2.5e-3))
    region = AdmissibleRegion.from_mesh(mesh, margin=1e-3, label=0)
    pts = np.array(
        [
            [0.012, 0.0],  # inside the coil hole
            [-0.5, 0.0],  # far outside
            [0.004, 0.01],  # already feasible
        ]
    )
    proj = region.project(pts)
    assert np.all(region.contains(proj))
    assert np.allclose(proj[2], pts[2])


def test_region_label_enforced():
    mesh = build_transformer_mesh(DomainSpec(target_h=2.5e-3))
    region = AdmissibleRegion.from_mesh(mesh, margin=1e-3, label=0)
    design = SensorDesign(np.array([[0.012, 0.0]]), 5e-4, 7, region)
    with pytest.raises(DesignInfeasibleError):
        build_internal_sensor_rows(mesh, design)
