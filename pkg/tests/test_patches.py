import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import grid_mesh, icosphere, random_rotation
from texseg.errors import (BadGridSize, BadMagic, IncompleteRing, InsufficientNeighborhood,
                           SingularFit)
from texseg.evaluation import SynthSpec, synth_textured_mesh
from texseg.features import Extractor
from texseg.mesh import Mesh, build_adjacency
from texseg.patches import (INTRINSIC, DescriptorKind, FacetGrid, OrderedRings, PatchConfig,
                            build_patch_image, compute_descriptor, extract_ordered_rings,
                            extract_patches, facet_descriptors, grid_channels, interior_mask,
                            k_ring, read_patches, resample_ring, rings_to_grid, standardize,
                            write_patches)


def bfs_levels(mesh, center):
    """Vertex-sharing BFS distance from ``center`` using only facet vertex sets."""
    f = [set(t) for t in mesh.facets.tolist()]
    by_vertex = {}
    for i, t in enumerate(f):
        for v in t:
            by_vertex.setdefault(v, set()).add(i)
    dist = {center: 0}
    frontier = [center]
    while frontier:
        nxt = []
        for a in frontier:
            for v in f[a]:
                for b in by_vertex[v]:
                    if b not in dist:
                        dist[b] = dist[a] + 1
                        nxt.append(b)
        frontier = nxt
    return dist


def check_ring_invariants(mesh, rings):
    dist = bfs_levels(mesh, rings.center)
    fsets = [set(t) for t in mesh.facets.tolist()]
    assert rings.rings[0] == (rings.center,)
    seen = set()
    for r, ring in enumerate(rings.rings):
        assert len(set(ring)) == len(ring)
        assert not seen & set(ring)
        seen |= set(ring)
        assert set(ring) == {g for g, d in dist.items() if d == r}
        if r == 0:
            continue
        for g in ring:
            assert any(fsets[g] & fsets[h] for h in rings.rings[r - 1])
        for a, b in zip(ring, ring[1:] + ring[:1]):
            assert fsets[a] & fsets[b], f"ring {r}: {a} and {b} do not touch"


# rings

def test_zero_rings():
    m = grid_mesh(5)
    r = extract_ordered_rings(m, build_adjacency(m), 10, 0)
    assert r.rings == ((10,),)


def test_first_ring_on_regular_grid():
    m = grid_mesh(9)
    adj = build_adjacency(m)
    c = 2 * (4 * 8 + 4)
    r = extract_ordered_rings(m, adj, c, 1)
    oracle = {g for g in range(m.facet_count)
              if g != c and set(m.facets[g]) & set(m.facets[c])}
    assert set(r.rings[1]) == oracle and len(r.rings[1]) == 12


def test_ring_one_starts_at_lowest_edge_neighbour():
    m = grid_mesh(9)
    adj = build_adjacency(m)
    c = 2 * (4 * 8 + 4)
    r = extract_ordered_rings(m, adj, c, 1)
    assert r.rings[1][0] == min(adj.edge_neighbors[c])


def test_ring_order_is_counterclockwise():
    m = grid_mesh(9)
    adj = build_adjacency(m)
    c = 2 * (4 * 8 + 4)
    ring = extract_ordered_rings(m, adj, c, 1).rings[1]
    cents = m.centroids()
    ang = np.unwrap([math.atan2(*(cents[g] - cents[c])[[1, 0]]) for g in ring])
    assert np.all(np.diff(ang) > 0)


def test_facet_next_to_hole():
    m = grid_mesh(12)
    hole = 2 * (5 * 11 + 5)
    keep = np.ones(m.facet_count, bool)
    keep[hole] = False
    m2 = Mesh(m.vertices, m.facets[keep])
    adj = build_adjacency(m2)
    shared = [g for g in range(m2.facet_count) if len(set(m2.facets[g]) & set(m.facets[hole])) == 2]
    assert shared
    with pytest.raises(IncompleteRing):
        extract_ordered_rings(m2, adj, shared[0], 2)


@pytest.mark.parametrize("center", [0, 17, 401, 1279])
def test_rings_on_icosphere_match_bfs(center):
    m = icosphere(3)
    rings = extract_ordered_rings(m, build_adjacency(m), center, 7)
    check_ring_invariants(m, rings)


def test_rings_on_grid_match_bfs():
    m = grid_mesh(30, lambda x, y: 0.2 * np.sin(x) * np.cos(y))
    adj = build_adjacency(m)
    inner = np.nonzero(interior_mask(m, adj, 8))[0]
    assert len(inner)
    for c in inner[:: max(1, len(inner) // 5)]:
        check_ring_invariants(m, extract_ordered_rings(m, adj, int(c), 8))


def test_interior_mask_matches_ring_completion():
    m = grid_mesh(14)
    adj = build_adjacency(m)
    mask = interior_mask(m, adj, 4)
    for c in range(0, m.facet_count, 7):
        if mask[c]:
            extract_ordered_rings(m, adj, c, 4)
        else:
            with pytest.raises(IncompleteRing):
                extract_ordered_rings(m, adj, c, 4)


def test_ring_order_deterministic():
    m = icosphere(2)
    adj = build_adjacency(m)
    assert extract_ordered_rings(m, adj, 5, 4) == extract_ordered_rings(m, adj, 5, 4)


# grid mapping

def test_resample_hand_example():
    rings = [list(range(1)), list(range(100, 112)), list(range(200, 224))]
    assert resample_ring(rings[1], 3) == [100, 104, 108]
    assert resample_ring(rings[0], 3) == [0, 0, 0]


@given(st.integers(1, 60), st.integers(1, 40))
def test_resample_rule(m, n):
    ring = list(range(m))
    out = resample_ring(ring, n)
    assert out == [(j * m) // n for j in range(n)]
    assert out == sorted(out)


def test_grid_too_small_or_too_few_rings():
    rings = OrderedRings(0, ((0,), tuple(range(1, 13)), tuple(range(13, 37))))
    with pytest.raises(BadGridSize):
        rings_to_grid(rings, 24)
    with pytest.raises(BadGridSize):
        rings_to_grid(rings, 3)
    with pytest.raises(BadGridSize):
        PatchConfig(n=3)


def test_grid_rows_come_from_their_ring():
    m = grid_mesh(24)
    adj = build_adjacency(m)
    c = int(np.nonzero(interior_mask(m, adj, 7))[0][0])
    rings = extract_ordered_rings(m, adj, c, 7)
    grid = rings_to_grid(rings, 8)
    assert grid.cells.shape == (8, 8)
    for r in range(8):
        assert set(grid.cells[r]) <= set(rings.rings[r])
    assert (grid.cells[0] == c).all()


def test_constant_field_maps_to_constant_grid():
    m = grid_mesh(12)
    grid = FacetGrid(n=4, cells=np.arange(16).reshape(4, 4) * 3)
    table = np.full((m.facet_count, 4), 0.75)
    out = grid_channels(m, grid, 0, (DescriptorKind.SV, DescriptorKind.Cur), table)
    assert (out == 0.75).all()


# descriptors

def _plane_ld_sv_cur(mesh, f):
    adj = build_adjacency(mesh)
    nb = k_ring(adj, f, 2)
    return [compute_descriptor(mesh, f, nb, k) for k in ("LD", "SV", "Cur")]


def test_plane_descriptors_zero():
    m = grid_mesh(10)
    for f in (40, 81, 100):
        assert np.abs(_plane_ld_sv_cur(m, f)).max() <= 1e-9


def test_tilted_plane_descriptors_zero(rng):
    m = grid_mesh(10).transformed(random_rotation(rng), [3.0, -2.0, 7.0])
    assert np.abs(_plane_ld_sv_cur(m, 81)).max() <= 1e-9


def test_sphere_mean_curvature():
    m = icosphere(4, radius=2.0)
    adj = build_adjacency(m)
    vals = [compute_descriptor(m, f, k_ring(adj, f, 2), "Cur") for f in range(0, m.facet_count, 97)]
    assert np.all(np.abs(np.array(vals) - 0.5) <= 0.05 * 0.5)


def test_sphere_shape_index_is_cap():
    m = icosphere(3, radius=2.0)
    adj = build_adjacency(m)
    si = compute_descriptor(m, 10, k_ring(adj, 10, 2), "SI")
    assert si > 0.9


def _saddle():
    return grid_mesh(21, lambda x, y: ((x - 10) ** 2 - (y - 10) ** 2) / 100.0)


def test_saddle_shape_index_and_surface_variation():
    m = _saddle()
    adj = build_adjacency(m)
    c = 2 * (10 * 20 + 10)
    nb = k_ring(adj, c, 2)
    si = compute_descriptor(m, c, nb, "SI")
    assert abs(si) <= 0.1
    pts = m.centroids()[sorted(nb | {c})]
    cov = np.cov(pts.T, bias=True)
    lam = np.sort(np.linalg.eigvals(cov).real)
    assert compute_descriptor(m, c, nb, "SV") == pytest.approx(lam[0] / lam.sum(), abs=1e-12)


def test_surface_variation_range(rng):
    m = grid_mesh(12, lambda x, y: rng.normal(size=x.shape))
    table = facet_descriptors(m, build_adjacency(m))
    sv = table[:, 1]
    assert np.all((sv >= 0) & (sv <= 1 / 3 + 1e-12))
    si = table[:, 3]
    assert np.all(np.abs(si) <= 1 + 1e-12)


def test_fit_guards():
    tri = [[[i, 0, 0], [i + 1, 1, 0], [i + 2, -1, 0]] for i in range(6)]
    m = Mesh(np.array(tri, float).reshape(-1, 3), np.arange(18).reshape(6, 3))
    with pytest.raises(InsufficientNeighborhood):
        compute_descriptor(m, 0, [1, 2], "LD")
    with pytest.raises(SingularFit):
        compute_descriptor(m, 0, range(6), "Cur")


def test_azimuth_elevation_on_plane():
    m = grid_mesh(6)
    assert compute_descriptor(m, 7, [], "EL", center=3) == pytest.approx(math.pi / 2)


def _wavy():
    return grid_mesh(16, lambda x, y: 0.8 * np.sin(0.5 * x) * np.cos(0.4 * y))


def test_rigid_motion_invariance(rng):
    m = _wavy()
    base = facet_descriptors(m, build_adjacency(m))
    moved = m.transformed(random_rotation(rng), rng.normal(size=3) * 20)
    other = facet_descriptors(moved, build_adjacency(moved))
    ok = np.isfinite(base).all(axis=1)
    assert ok.sum() > 100
    scale = np.abs(base[ok]).max(axis=0)
    assert (np.abs(other[ok] - base[ok]) <= 1e-6 * np.maximum(np.abs(base[ok]), 1e-3 * scale)).all()


@pytest.mark.parametrize("s", [0.25, 3.0])
def test_scale_covariance(s):
    m = _wavy()
    base = facet_descriptors(m, build_adjacency(m))
    sc = m.transformed(scale=s)
    out = facet_descriptors(sc, build_adjacency(sc))
    ok = np.isfinite(base).all(axis=1)
    expect = base[ok] * np.array([s, 1.0, 1.0 / s, 1.0])
    tol = 1e-6 * np.maximum(np.abs(expect), 1e-3 * np.abs(expect).max(axis=0))
    assert (np.abs(out[ok] - expect) <= tol).all()


# patch images

def test_default_patch_shape():
    mesh, _ = synth_textured_mesh(SynthSpec(side=50))
    adj = build_adjacency(mesh)
    c = int(np.nonzero(interior_mask(mesh, adj, 23))[0][0])
    img = build_patch_image(mesh, adj, c)
    assert img.shape == (3, 24, 24)
    assert img.channel_ids == ("SV", "LD", "Cur")
    assert np.isfinite(img.channels).all()


def test_flat_patch_raw_channels_zero():
    m = grid_mesh(24)
    adj = build_adjacency(m)
    c = int(np.nonzero(interior_mask(m, adj, 7))[0][0])
    img = build_patch_image(m, adj, c, PatchConfig(n=8, standardize=False))
    assert np.abs(img.channels).max() <= 1e-9
    std = build_patch_image(m, adj, c, PatchConfig(n=8))
    assert (std.channels == 0).all()


def test_patch_rigid_motion(rng):
    m = grid_mesh(24, lambda x, y: 0.5 * np.sin(0.7 * x) * np.sin(0.6 * y))
    moved = m.transformed(random_rotation(rng), [1.0, 2.0, 3.0])
    cfg = PatchConfig(n=8, standardize=False)
    a1, a2 = build_adjacency(m), build_adjacency(moved)
    c = int(np.nonzero(interior_mask(m, a1, 7))[0][3])
    x = build_patch_image(m, a1, c, cfg).channels
    y = build_patch_image(moved, a2, c, cfg).channels
    assert np.abs(x - y).max() <= 1e-6


def test_patch_deterministic():
    m = grid_mesh(20, lambda x, y: 0.3 * np.cos(x + y))
    adj = build_adjacency(m)
    c = int(np.nonzero(interior_mask(m, adj, 5))[0][0])
    cfg = PatchConfig(n=6, channel_ids=("SI", "AZ", "EL", "LD"))
    a = build_patch_image(m, adj, c, cfg).channels
    b = build_patch_image(m, adj, c, cfg).channels
    assert a.tobytes() == b.tobytes() and a.shape == (4, 6, 6)


def test_standardize_guard():
    x = np.stack([np.full((4, 4), 3.0), np.arange(16.0).reshape(4, 4)])
    out = standardize(x)
    assert (out[0] == 0).all()
    assert abs(out[1].mean()) < 1e-12 and abs(out[1].std() - 1) < 1e-12


def test_extract_patches_only_interior():
    m = grid_mesh(22, lambda x, y: 0.2 * np.sin(x))
    adj = build_adjacency(m)
    cfg = PatchConfig(n=6)
    centers, imgs = extract_patches(m, adj, cfg)
    assert imgs.shape == (len(centers), 3, 6, 6)
    assert set(centers.tolist()) == set(np.nonzero(interior_mask(m, adj, 5))[0].tolist())


# cache

def test_patch_cache_roundtrip(tmp_path, rng):
    imgs = rng.normal(size=(5, 3, 8, 8))
    centers = np.array([4, 9, 1, 70000, 3])
    write_patches(tmp_path / "p.bin", centers, imgs)
    c2, i2 = read_patches(tmp_path / "p.bin")
    assert c2.tolist() == centers.tolist()
    assert (i2 == imgs.astype(np.float32)).all()
    ex = Extractor(c=3, n=8)
    np.testing.assert_allclose(ex(i2), ex(imgs.astype(np.float32)), rtol=0, atol=0)
    np.testing.assert_allclose(ex(i2), ex(imgs), rtol=1e-5, atol=1e-5)


def test_patch_cache_header(tmp_path):
    p = tmp_path / "p.bin"
    write_patches(p, [0], np.zeros((1, 1, 4, 4)))
    raw = p.read_bytes()
    assert raw[:4] == b"TXSG" and raw[4:6] == (1).to_bytes(2, "little")
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        read_patches(p)


def test_intrinsic_order():
    assert [k.value for k in INTRINSIC] == ["LD", "SV", "Cur", "SI"]
