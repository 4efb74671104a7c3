"""Extraction tests: surface audits, aggregation, sibling/hull merging."""
import json

import networkx as nx
import numpy as np
import pytest

from compod.arrangement import build_arrangement
from compod.errors import EmptySurfaceWarning, NonManifoldClusterWarning
from compod.extraction import (
    ConvexDecomposition,
    SurfaceFacet,
    SurfaceMesh,
    aggregate_facets,
    export_decomposition,
    extract_surface,
    load_decomposition_json,
    merge_siblings,
    merged_adjacency,
    simplify_cells,
)
from compod.geometry import ConvexCell, polygon_area_3d
from compod.labelling import INSIDE, OUTSIDE, label_cells_normal

from conftest import make_box_union_fixture


@pytest.fixture(scope="module")
def cube_pipeline(cube_cloud, cube_primitives):
    tree, graph = build_arrangement(cube_primitives, cube_cloud)
    labels = label_cells_normal(tree, graph, cube_primitives, cube_cloud)
    return tree, graph, labels


def union_pipeline(seed, n_boxes=3):
    cloud, prims = make_box_union_fixture(seed=seed, n_boxes=n_boxes)
    tree, graph = build_arrangement(prims, cloud)
    labels = label_cells_normal(tree, graph, prims, cloud)
    return tree, graph, labels


def squares_mesh(tiles, source=0):
    """SurfaceMesh of CCW unit squares (i, j) in the z = 0 plane."""
    pool = {}
    verts = []

    def vid(x, y):
        if (x, y) not in pool:
            pool[(x, y)] = len(verts)
            verts.append((float(x), float(y), 0.0))
        return pool[(x, y)]

    plane = np.array([0.0, 0.0, 1.0, 0.0])
    facets = []
    for i, j in tiles:
        loop = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1))
        facets.append(SurfaceFacet(loop=loop, source=source, plane=plane))
    return SurfaceMesh(vertices=np.asarray(verts, dtype=float), facets=facets)


class TestExtractSurface:
    def test_cube_hand_trace(self, cube_pipeline):
        # the inside region is the unit cube: V=8, E=12, F=6, closed, chi=2
        tree, graph, labels = cube_pipeline
        mesh = extract_surface(tree, graph, labels)
        assert len(mesh.facets) == 6
        used = {i for f in mesh.facets for i in f.loop}
        assert len(used) == 8
        assert len(mesh.vertices) == 8
        assert mesh.is_watertight()
        assert mesh.is_orientation_coherent()
        assert mesh.euler_characteristic() == 2
        for i in range(6):
            assert polygon_area_3d(mesh.facet_points(i)) == pytest.approx(1.0)
        assert mesh.total_area() == pytest.approx(6.0)

    def test_cube_facets_point_outward(self, cube_pipeline):
        tree, graph, labels = cube_pipeline
        mesh = extract_surface(tree, graph, labels)
        center = np.array([0.5, 0.5, 0.5])
        for f in mesh.facets:
            pts = mesh.vertices[list(f.loop)]
            assert float(f.plane[:3] @ (pts.mean(axis=0) - center)) > 0.0

    def test_all_outside_empty_mesh(self, cube_pipeline):
        tree, graph, _ = cube_pipeline
        flat = {lid: OUTSIDE for lid in tree.leaf_ids()}
        with pytest.warns(EmptySurfaceWarning):
            mesh = extract_surface(tree, graph, flat)
        assert mesh.is_empty()
        assert not mesh.is_watertight()

    @pytest.mark.parametrize("seed", [2, 11, 23])
    def test_union_fixture_audits(self, seed):
        # mesh-audit oracle on multi-box scenes
        tree, graph, labels = union_pipeline(seed)
        mesh = extract_surface(tree, graph, labels)
        assert not mesh.is_empty()
        assert mesh.is_watertight()
        assert mesh.is_orientation_coherent()

    def test_cube_sources_cover_all_faces(self, cube_pipeline):
        tree, graph, labels = cube_pipeline
        mesh = extract_surface(tree, graph, labels)
        assert sorted(f.source for f in mesh.facets) == list(range(6))


class TestAggregateFacets:
    def test_two_squares_one_rectangle(self):
        mesh = squares_mesh([(0, 0), (1, 0)])
        out = aggregate_facets(mesh)
        assert len(out.facets) == 1
        pts = out.facet_points(0)
        assert polygon_area_3d(pts) == pytest.approx(2.0)
        # boundary cycle keeps the shared-edge endpoints: 6 vertices
        assert len(out.facets[0].loop) == 6

    def test_ring_becomes_cdt(self):
        tiles = [(i, j) for i in range(3) for j in range(3) if (i, j) != (1, 1)]
        mesh = squares_mesh(tiles)
        out = aggregate_facets(mesh)
        assert all(len(f.loop) == 3 for f in out.facets)
        area = sum(polygon_area_3d(out.facet_points(i))
                   for i in range(len(out.facets)))
        assert area == pytest.approx(8.0, abs=1e-9)
        # triangles stay in plane and keep the outward (+z) orientation
        for i, f in enumerate(out.facets):
            pts = out.facet_points(i)
            assert np.allclose(pts[:, 2], 0.0)
            ab, ac = pts[1] - pts[0], pts[2] - pts[0]
            assert np.cross(ab, ac)[2] > 0.0

    def test_nonmanifold_cluster_untouched(self):
        # 3x3 block minus two diagonally-touching tiles pinches at (2, 2)
        tiles = [(i, j) for i in range(3) for j in range(3)
                 if (i, j) not in ((1, 1), (2, 2))]
        mesh = squares_mesh(tiles)
        with pytest.warns(NonManifoldClusterWarning):
            out = aggregate_facets(mesh)
        assert len(out.facets) == len(tiles)

    def test_different_sources_not_merged(self):
        mesh = squares_mesh([(0, 0), (1, 0)])
        mesh.facets[1] = SurfaceFacet(
            loop=mesh.facets[1].loop, source=1, plane=mesh.facets[1].plane
        )
        out = aggregate_facets(mesh)
        assert len(out.facets) == 2

    def test_cube_surface_untouched(self, cube_pipeline):
        tree, graph, labels = cube_pipeline
        mesh = extract_surface(tree, graph, labels)
        out = aggregate_facets(mesh)
        assert len(out.facets) == 6
        assert out.is_watertight()

    @pytest.mark.parametrize("seed", [2, 11, 23])
    def test_union_fixture_preserves_surface(self, seed):
        tree, graph, labels = union_pipeline(seed)
        mesh = extract_surface(tree, graph, labels)
        out = aggregate_facets(mesh)
        assert out.is_watertight()
        assert out.is_orientation_coherent()
        assert len(out.facets) <= len(mesh.facets)
        assert out.total_area() == pytest.approx(mesh.total_area(), rel=1e-9)
        # covered region per oriented plane is conserved, not just globally
        def area_by_key(m):
            acc = {}
            for i, f in enumerate(m.facets):
                key = (f.source, tuple(np.round(f.plane[:3], 9)))
                acc[key] = acc.get(key, 0.0) + polygon_area_3d(m.facet_points(i))
            return acc

        before, after = area_by_key(mesh), area_by_key(out)
        assert set(before) == set(after)
        for key in before:
            assert after[key] == pytest.approx(before[key], rel=1e-9)


def sibling_oracle(tree, lab, nid):
    """Reference recursion: replace sibling subtrees iff both are uniform."""
    node = tree.node(nid)
    if node.is_leaf:
        return {nid: lab[nid]}
    c0, c1 = node.children
    a = sibling_oracle(tree, lab, c0)
    b = sibling_oracle(tree, lab, c1)
    if set(a) == {c0} and set(b) == {c1} and a[c0] == b[c1]:
        return {nid: a[c0]}
    a.update(b)
    return a


class TestMergeSiblings:
    def test_cube_no_merge_possible(self, cube_pipeline):
        tree, graph, labels = cube_pipeline
        reduced, owner = merge_siblings(tree, labels)
        # outside slabs hang off the path to the inside cell: no uniform pair
        assert len(reduced) == 7
        assert set(owner) == set(tree.leaf_ids())

    def test_all_one_label_collapses_to_root(self, cube_pipeline):
        tree, _, _ = cube_pipeline
        flat = {lid: OUTSIDE for lid in tree.leaf_ids()}
        reduced, owner = merge_siblings(tree, flat)
        assert set(reduced) == {tree.root}
        assert set(owner.values()) == {tree.root}

    @pytest.mark.parametrize("seed", [3, 9, 31])
    def test_matches_recursive_oracle(self, seed):
        tree, graph, _ = union_pipeline(seed, n_boxes=2)
        rng = np.random.default_rng(seed)
        lab = {lid: (INSIDE if rng.uniform() < 0.5 else OUTSIDE)
               for lid in tree.leaf_ids()}
        reduced, owner = merge_siblings(tree, lab)
        assert reduced == sibling_oracle(tree, lab, tree.root)
        assert len(reduced) <= len(tree.leaf_ids())

    @pytest.mark.parametrize("seed", [3, 9])
    def test_union_volume_conserved(self, seed):
        tree, graph, labels = union_pipeline(seed, n_boxes=2)
        reduced, owner = merge_siblings(tree, labels)
        vol_before = sum(tree.node(l).cell.volume() for l in tree.leaf_ids())
        vol_after = sum(tree.node(n).cell.volume() for n in reduced)
        assert vol_after == pytest.approx(vol_before, rel=1e-9)
        # per-label volume is conserved too
        lab = labels.labels
        for side in (INSIDE, OUTSIDE):
            before = sum(tree.node(l).cell.volume()
                         for l in tree.leaf_ids() if lab[l] == side)
            after = sum(tree.node(n).cell.volume()
                        for n, s in reduced.items() if s == side)
            assert after == pytest.approx(before, rel=1e-9)

    def test_reduces_on_multibox(self):
        tree, graph, labels = union_pipeline(seed=7, n_boxes=3)
        reduced, _ = merge_siblings(tree, labels)
        assert len(reduced) < len(tree.leaf_ids())

    def test_merged_adjacency_collapses(self):
        tree, graph, labels = union_pipeline(seed=7, n_boxes=2)
        reduced, owner = merge_siblings(tree, labels)
        g2 = merged_adjacency(graph, owner)
        assert set(g2.nodes) == set(reduced)
        assert all(a != b for a, b in g2.edges)


def box_cell(lower, upper):
    return ConvexCell.from_bounds(lower, upper)


class TestSimplifyCells:
    def test_half_cubes_tau_zero(self):
        cells = {0: box_cell((0, 0, 0), (0.5, 1, 1)),
                 1: box_cell((0.5, 0, 0), (1, 1, 1))}
        graph = nx.Graph([(0, 1)])
        labels = {0: INSIDE, 1: INSIDE}
        decomp = simplify_cells(cells, graph, labels, tau=0.0)
        assert decomp.n_cells == 1
        assert decomp.cells[0].volume() == pytest.approx(1.0, rel=1e-12)
        assert len(decomp.cells[0].facets) == 6
        assert not decomp.overlap
        assert decomp.provenance == [(0, 1)]

    def l_pair(self):
        cells = {0: box_cell((0, 0, 0), (1, 1, 1)),
                 1: box_cell((1, 0.5, 0), (2, 1.5, 1))}
        graph = nx.Graph([(0, 1)])
        labels = {0: INSIDE, 1: INSIDE}
        return cells, graph, labels

    def test_l_pair_tau_zero_no_merge(self):
        cells, graph, labels = self.l_pair()
        decomp = simplify_cells(cells, graph, labels, tau=0.0)
        assert decomp.n_cells == 2
        assert decomp.total_volume() == pytest.approx(2.0)

    def test_l_pair_threshold(self):
        # hull volume is 2.5, so the defect is exactly 0.5
        cells, graph, labels = self.l_pair()
        merged = simplify_cells(cells, graph, labels, tau=0.6)
        assert merged.n_cells == 1
        assert merged.cells[0].volume() == pytest.approx(2.5, rel=1e-9)
        assert merged.overlap
        kept = simplify_cells(cells, graph, labels, tau=0.5)
        assert kept.n_cells == 2  # strict inequality in the criterion

    def test_outside_cells_ignored(self):
        cells = {0: box_cell((0, 0, 0), (1, 1, 1)),
                 1: box_cell((1, 0, 0), (2, 1, 1))}
        graph = nx.Graph([(0, 1)])
        labels = {0: INSIDE, 1: OUTSIDE}
        decomp = simplify_cells(cells, graph, labels, tau=10.0)
        assert decomp.n_cells == 1
        assert decomp.provenance == [(0,)]

    def test_chain_collapses_transitively(self):
        cells = {i: box_cell((i * 0.25, 0, 0), ((i + 1) * 0.25, 1, 1))
                 for i in range(4)}
        graph = nx.Graph([(0, 1), (1, 2), (2, 3)])
        labels = {i: INSIDE for i in range(4)}
        decomp = simplify_cells(cells, graph, labels, tau=0.0)
        assert decomp.n_cells == 1
        assert decomp.cells[0].volume() == pytest.approx(1.0, rel=1e-9)
        assert decomp.provenance == [(0, 1, 2, 3)]

    def test_monotone_tau_on_pipeline(self):
        tree, graph, labels = union_pipeline(seed=7, n_boxes=3)
        cells = {lid: tree.node(lid).cell for lid in tree.leaf_ids()}
        counts = []
        total = sum(c.volume() for lid, c in cells.items()
                    if labels.labels[lid] == INSIDE)
        for tau in (0.0, 1e-4 * total, 1e-2 * total, 0.1 * total, total):
            decomp = simplify_cells(cells, graph, labels, tau,
                                    tol=tree.tol)
            counts.append(decomp.n_cells)
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts

    def test_tau_zero_disjoint_and_conserved(self):
        tree, graph, labels = union_pipeline(seed=7, n_boxes=3)
        cells = {lid: tree.node(lid).cell for lid in tree.leaf_ids()}
        inside_vol = sum(c.volume() for lid, c in cells.items()
                        if labels.labels[lid] == INSIDE)
        decomp = simplify_cells(cells, graph, labels, 0.0, tol=tree.tol)
        assert decomp.total_volume() == pytest.approx(inside_vol, rel=1e-9)
        lo = np.min([c.vertices.min(axis=0) for c in decomp.cells], axis=0)
        hi = np.max([c.vertices.max(axis=0) for c in decomp.cells], axis=0)
        rng = np.random.default_rng(0)
        pts = rng.uniform(lo, hi, size=(20000, 3))
        eps = tree.tol.eps_abs
        strict_hits = np.zeros(len(pts), dtype=np.intp)
        for c in decomp.cells:
            strict_hits += c.contains(pts, -eps).astype(np.intp)
        assert int((strict_hits >= 2).sum()) == 0

    def test_provenance_covers_inside_ids(self):
        tree, graph, labels = union_pipeline(seed=2, n_boxes=2)
        cells = {lid: tree.node(lid).cell for lid in tree.leaf_ids()}
        decomp = simplify_cells(cells, graph, labels, 0.0, tol=tree.tol)
        got = sorted(i for prov in decomp.provenance for i in prov)
        want = sorted(lid for lid in tree.leaf_ids()
                      if labels.labels[lid] == INSIDE)
        assert got == want


class TestExportDecomposition:
    def unit_cube_decomp(self):
        cell = box_cell((0, 0, 0), (1, 1, 1))
        return ConvexDecomposition(
            cells=[cell], overlap=False, tau=0.0, provenance=[(0,)]
        )

    def test_obj_cube(self, tmp_path):
        decomp = self.unit_cube_decomp()
        path = tmp_path / "cube.obj"
        export_decomposition(decomp, path, format="obj")
        text = path.read_text()
        assert text.count("g cell_") == 1
        assert sum(1 for l in text.splitlines() if l.startswith("f ")) == 12
        assert sum(1 for l in text.splitlines() if l.startswith("v ")) == 8

    def test_json_round_trip_bit_exact(self, tmp_path):
        cells = {0: box_cell((0, 0, 0), (1, 1, 1)),
                 1: box_cell((1, 0.5, 0), (2, 1.5, 1))}
        labels = {0: INSIDE, 1: INSIDE}
        decomp = simplify_cells(cells, nx.Graph([(0, 1)]), labels, tau=0.6)
        path = tmp_path / "decomp.json"
        export_decomposition(decomp, path, format="json")
        data = load_decomposition_json(path)
        assert data["counts"]["C_V"] == decomp.n_cells
        assert data["counts"]["F_V"] == decomp.n_facets
        for cell, rec in zip(decomp.cells, data["cells"]):
            assert rec["halfspaces"] == [[float(x) for x in p]
                                         for p in cell.planes]
        # a second export writes the identical byte stream
        path2 = tmp_path / "decomp2.json"
        export_decomposition(decomp, path2, format="json")
        assert path.read_bytes() == path2.read_bytes()

    def test_three_cell_count(self, tmp_path):
        cells = [box_cell((i, 0, 0), (i + 0.8, 1, 1)) for i in range(3)]
        decomp = ConvexDecomposition(
            cells=cells, overlap=False, tau=0.0,
            provenance=[(i,) for i in range(3)],
        )
        path = tmp_path / "three.json"
        export_decomposition(decomp, path, format="json")
        assert load_decomposition_json(path)["counts"]["C_V"] == 3

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            export_decomposition(self.unit_cube_decomp(),
                                 tmp_path / "x.bin", format="bin")


class TestEndToEndVolumes:
    def test_cube_full_pipeline(self, cube_pipeline):
        tree, graph, labels = cube_pipeline
        reduced, owner = merge_siblings(tree, labels)
        cells = {nid: tree.node(nid).cell for nid in reduced}
        g2 = merged_adjacency(graph, owner)
        decomp = simplify_cells(cells, g2, reduced, 0.0, tol=tree.tol)
        assert decomp.n_cells == 1
        assert decomp.cells[0].volume() == pytest.approx(1.0, rel=1e-6)


class TestConcaveFacetTriangulation:
    """Aggregated facets can be concave; fans would spill outside them."""

    def _l_mesh(self):
        verts = np.array([
            [0, 0, 0], [3, 0, 0], [3, 2, 0], [2, 2, 0], [2, 3, 0], [0, 3, 0],
        ], dtype=float)
        facet = SurfaceFacet(
            loop=(0, 1, 2, 3, 4, 5), source=None,
            plane=np.array([0.0, 0.0, 1.0, 0.0]),
        )
        return SurfaceMesh(vertices=verts, facets=[facet])

    def test_triangles_cover_exact_area(self):
        mesh = self._l_mesh()
        tris, owner = mesh.triangulate()
        assert len(tris) == 4
        assert list(owner) == [0, 0, 0, 0]
        total = 0.0
        for t in tris:
            a, b, c = mesh.vertices[list(t)]
            total += 0.5 * np.linalg.norm(np.cross(b - a, c - a))
        assert total == pytest.approx(8.0, rel=1e-12)

    def test_surface_samples_stay_on_facet(self):
        from compod.metrics import sample_surface

        mesh = self._l_mesh()
        samples = sample_surface(mesh, 4000, seed=3)
        pts = samples.points
        assert np.allclose(pts[:, 2], 0.0, atol=1e-12)
        in_notch = (pts[:, 0] > 2.0 + 1e-9) & (pts[:, 1] > 2.0 + 1e-9)
        assert not in_notch.any()

    def test_flipped_plane_same_triangulation(self):
        # triangulation must depend on the loop alone, not the stored
        # plane sign, so remeshing audits see identical sample sets
        mesh = self._l_mesh()
        flipped = SurfaceMesh(
            vertices=mesh.vertices,
            facets=[SurfaceFacet(loop=mesh.facets[0].loop, source=None,
                                 plane=-mesh.facets[0].plane)],
        )
        t1, _ = mesh.triangulate()
        t2, _ = flipped.triangulate()
        assert np.array_equal(np.asarray(t1), np.asarray(t2))
