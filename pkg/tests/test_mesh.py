import numpy as np
import pytest

from heatoed.errors import GeometryError, LocationError
from heatoed.mesh import (
    TAG_NEUMANN,
    TAG_ROBIN,
    DomainSpec,
    Mesh,
    build_transformer_mesh,
    build_unit_square_mesh,
    locate_point,
)


@pytest.fixture(scope="module")
def transformer():
    return build_transformer_mesh(DomainSpec(target_h=2.0e-3))


def test_unit_square_refinement_one():
    mesh = build_unit_square_mesh(1)
    assert mesh.n_nodes == 4
    assert mesh.n_triangles == 2
    assert mesh.triangle_areas().sum() == pytest.approx(1.0, abs=1e-15)


def test_unit_square_area_exact():
    mesh = build_unit_square_mesh(16)
    assert abs(mesh.triangle_areas().sum() - 1.0) < 1e-12


def test_unit_square_boundary_edges_all_robin():
    mesh = build_unit_square_mesh(32)
    assert mesh.boundary_edges.shape[0] == 4 * 32
    assert np.all(mesh.boundary_tags == TAG_ROBIN)
    # independent count: edges whose midpoint touches the boundary
    mid = 0.5 * (mesh.nodes[mesh.boundary_edges[:, 0]] + mesh.nodes[mesh.boundary_edges[:, 1]])
    on_bdry = (
        (np.abs(mid[:, 0]) < 1e-12)
        | (np.abs(mid[:, 0] - 1) < 1e-12)
        | (np.abs(mid[:, 1]) < 1e-12)
        | (np.abs(mid[:, 1] - 1) < 1e-12)
    )
    assert on_bdry.all()


def test_refinement_halves_max_edge():
    coarse = build_unit_square_mesh(8)
    fine = build_unit_square_mesh(16)
    assert fine.max_edge_length() == pytest.approx(coarse.max_edge_length() / 2)


def test_invalid_refinement():
    with pytest.raises(GeometryError):
        build_unit_square_mesh(0)


def test_transformer_tags(transformer):
    mesh = transformer
    neumann = mesh.boundary_edges[mesh.boundary_tags == TAG_NEUMANN]
    assert np.all(mesh.nodes[neumann.ravel(), 0] == 0.0)
    measured = mesh.boundary_edges[mesh.boundary_measured]
    assert np.all(np.abs(mesh.nodes[measured.ravel(), 0] - 0.025) < 1e-15)
    # measured edges are Robin edges (subset of the non-symmetry boundary)
    assert np.all(mesh.boundary_tags[mesh.boundary_measured] == TAG_ROBIN)


def test_transformer_area_partition(transformer):
    mesh = transformer
    areas = mesh.triangle_areas()
    total = areas.sum()
    assert abs(total - 0.025 * 0.060) < 1e-12 * 0.025 * 0.060
    coil_area = areas[mesh.tri_labels == 1].sum()
    cx0, cx1, cy0, cy1 = mesh.coil_rect
    assert coil_area == pytest.approx((cx1 - cx0) * (cy1 - cy0), rel=1e-12)


def test_transformer_interface_pairs_coincide(transformer):
    pairs = transformer.interface_pairs
    assert pairs.shape[0] > 0
    diff = transformer.nodes[pairs[:, 0]] - transformer.nodes[pairs[:, 1]]
    assert np.all(diff == 0.0)


def test_transformer_interface_edges_have_two_pairs(transformer):
    for a1, a2, b1, b2 in transformer.interface_edges:
        assert np.array_equal(transformer.nodes[a1], transformer.nodes[b1])
        assert np.array_equal(transformer.nodes[a2], transformer.nodes[b2])
        assert a1 != b1 and a2 != b2


def test_coil_touching_boundary_rejected():
    with pytest.raises(GeometryError):
        DomainSpec(coil_rect=(0.0, 0.016, -0.02, 0.02))


def test_locate_centroid_and_vertex():
    mesh = build_unit_square_mesh(6)
    tri = 17
    pts = mesh.nodes[mesh.triangles[tri]]
    idx, lam = mesh.locate(pts.mean(axis=0))
    assert idx == tri
    assert np.allclose(lam, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)
    idx, lam = locate_point(mesh, pts[1])
    unit = np.zeros(3)
    unit[np.argmax(np.abs(lam))] = 1.0
    assert np.allclose(sorted(lam), [0, 0, 1], atol=1e-12)


def test_locate_matches_brute_force():
    mesh = build_unit_square_mesh(9)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.001, 0.999, size=(1000, 2))
    p0 = mesh.nodes[mesh.triangles[:, 0]]
    d1 = mesh.nodes[mesh.triangles[:, 1]] - p0
    d2 = mesh.nodes[mesh.triangles[:, 2]] - p0
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    for p in pts:
        idx, lam = mesh.locate(p)
        # brute-force scan: lowest-index triangle containing p
        rel = p - p0
        a = (rel[:, 0] * d2[:, 1] - rel[:, 1] * d2[:, 0]) / det
        b = (d1[:, 0] * rel[:, 1] - d1[:, 1] * rel[:, 0]) / det
        inside = (a >= -1e-9) & (b >= -1e-9) & (a + b <= 1 + 1e-9)
        assert idx == np.flatnonzero(inside)[0]
        # affine reconstruction
        rec = lam @ mesh.nodes[mesh.triangles[idx]]
        assert np.linalg.norm(rec - p) < 1e-12 * mesh.diameter()


def test_locate_outside_raises():
    mesh = build_unit_square_mesh(4)
    with pytest.raises(LocationError):
        mesh.locate([1.5, 0.5])


def test_mesh_text_roundtrip(tmp_path, transformer):
    path = tmp_path / "mesh.txt"
    transformer.save_text(path)
    loaded = Mesh.load_text(path)
    assert np.array_equal(loaded.nodes, transformer.nodes)
    assert np.array_equal(loaded.triangles, transformer.triangles)
    assert np.array_equal(loaded.tri_labels, transformer.tri_labels)
    assert np.array_equal(loaded.boundary_tags, transformer.boundary_tags)
    assert np.array_equal(loaded.interface_edges, transformer.interface_edges)
    assert loaded.coil_rect == transformer.coil_rect
    assert loaded.analytic_area == transformer.analytic_area
