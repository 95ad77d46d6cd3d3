"""Ordered ring facets, facet grids, geometric descriptors and patch images.

A patch image is built in three steps: the concentric vertex-sharing rings
around a centre facet are extracted and cyclically ordered, each ring is
resampled to ``n`` cells to form an ``n x n`` facet grid (row ``r`` is ring
``r``), and every cell is replaced by the descriptor values of its facet.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .errors import (
    BadGridSize,
    DimensionMismatch,
    IncompleteRing,
    InsufficientNeighborhood,
    SingularFit,
)
from .mesh import Adjacency, Mesh

MIN_NEIGHBORHOOD = 6
TWO_PI = 2.0 * math.pi


class DescriptorKind(str, enum.Enum):
    LD = "LD"    # local depth
    SV = "SV"    # surface variation
    Cur = "Cur"  # mean curvature
    SI = "SI"    # shape index
    AZ = "AZ"    # normal azimuth in the centre frame
    EL = "EL"    # normal elevation in the centre frame

    @classmethod
    def parse(cls, name: str) -> "DescriptorKind":
        for k in cls:
            if k.value.lower() == name.strip().lower():
                return k
        raise ValueError(f"unknown descriptor {name!r}; choose from {[k.value for k in cls]}")


# descriptors that only depend on the facet's own neighbourhood
INTRINSIC = (DescriptorKind.LD, DescriptorKind.SV, DescriptorKind.Cur, DescriptorKind.SI)


@dataclass(frozen=True)
class OrderedRings:
    center: int
    rings: tuple

    @property
    def ring_count(self) -> int:
        return len(self.rings) - 1


@dataclass(frozen=True, eq=False)
class FacetGrid:
    n: int
    cells: np.ndarray  # (n, n) facet ids, -1 where missing


@dataclass(frozen=True, eq=False)
class PatchImage:
    channels: np.ndarray  # (c, n, n)
    channel_ids: tuple
    center: int

    @property
    def shape(self):
        return self.channels.shape


@dataclass(frozen=True)
class PatchConfig:
    n: int = 24
    channel_ids: tuple = (DescriptorKind.SV, DescriptorKind.LD, DescriptorKind.Cur)
    descriptor_radius: int = 2
    standardize: bool = True

    def __post_init__(self):
        if self.n < 4:
            raise BadGridSize(f"grid side must be >= 4, got {self.n}")
        ids = tuple(DescriptorKind.parse(c) if isinstance(c, str) else DescriptorKind(c)
                    for c in self.channel_ids)
        object.__setattr__(self, "channel_ids", ids)
        if self.descriptor_radius < 1:
            raise ValueError("descriptor_radius must be >= 1")


# ---------------------------------------------------------------------------
# rings


def boundary_distance(mesh: Mesh, adj: Adjacency) -> np.ndarray:
    """Vertex-sharing BFS distance of every facet to the nearest facet that
    touches a boundary vertex (0 for those facets; ``iinfo.max`` on closed
    components).

    A centre facet admits ``R`` complete rings iff its distance is ``>= R``.
    """
    big = np.iinfo(np.int64).max
    dist = np.full(mesh.facet_count, big, dtype=np.int64)
    seeds = np.nonzero(adj.boundary_vertices[mesh.facets].any(axis=1))[0]
    dist[seeds] = 0
    frontier = seeds.tolist()
    level = 0
    nbrs = adj.vertex_neighbors
    while frontier:
        level += 1
        nxt = []
        for f in frontier:
            for g in nbrs[f]:
                if dist[g] == big:
                    dist[g] = level
                    nxt.append(g)
        frontier = nxt
    return dist


def interior_mask(mesh: Mesh, adj: Adjacency, ring_count: int) -> np.ndarray:
    """Facets whose ``ring_count`` rings close without touching the boundary."""
    return boundary_distance(mesh, adj) >= ring_count


def _center_frame(mesh: Mesh, center: int):
    """Orthonormal frame (x, y, z) on the centre facet: z is the unit normal,
    x the projected first edge."""
    a, b, c = mesh.vertices[mesh.facets[center]]
    z = np.cross(b - a, c - a)
    nz = np.linalg.norm(z)
    if nz == 0:
        z = np.array([0.0, 0.0, 1.0])
    else:
        z = z / nz
    x = (b - a) - np.dot(b - a, z) * z
    nx = np.linalg.norm(x)
    if nx == 0:
        x = np.array([1.0, 0.0, 0.0]) - z[0] * z
        nx = np.linalg.norm(x)
    x = x / nx
    return x, np.cross(z, x), z


def _order_ring(members, start, angle, edge_nbrs, vert_nbrs):
    """Walk ``members`` cyclically from ``start``.

    Edge-sharing successors are preferred, then vertex-sharing ones; ties
    break on the smallest counterclockwise angular step around the centre.
    """
    order = [start]
    seen = {start}
    cur = start
    total = len(members)
    while len(order) < total:
        cands = [g for g in edge_nbrs[cur] if g in members and g not in seen]
        if not cands:
            cands = [g for g in vert_nbrs[cur] if g in members and g not in seen]
        if not cands:
            cands = [g for g in members if g not in seen]
        a0 = angle[cur]
        nxt = min(cands, key=lambda g: ((angle[g] - a0) % TWO_PI, g))
        order.append(nxt)
        seen.add(nxt)
        cur = nxt
    return tuple(order)


def extract_ordered_rings(mesh: Mesh, adj: Adjacency, center: int, R: int,
                          centroids=None) -> OrderedRings:
    """Concentric vertex-sharing rings ``0..R`` around ``center``.

    Ring ``r`` holds the facets sharing a vertex with ring ``r-1`` that are
    not in an inner ring. Each ring starts at its lowest-index facet that is
    edge-adjacent to the previous ring's start (ring 1: the lowest-index
    edge neighbour of the centre) and proceeds counterclockwise about the
    centre normal.

    Raises
    ------
    IncompleteRing
        If a ring would have to be grown from a facet touching the mesh
        boundary, i.e. it cannot close around the centre.
    """
    if not 0 <= center < mesh.facet_count:
        raise IndexError(f"facet {center} out of range")
    if R < 0:
        raise ValueError("ring count must be >= 0")
    if centroids is None:
        centroids = mesh.centroids()
    bverts = adj.boundary_vertices
    facets = mesh.facets
    ex, ey, _ = _center_frame(mesh, center)
    c0 = centroids[center]

    rings = [(center,)]
    visited = {center}
    prev = [center]
    prev_start = center
    for r in range(1, R + 1):
        if bverts[facets[prev]].any():
            raise IncompleteRing(f"ring {r} around facet {center} reaches the mesh boundary")
        members = set()
        for f in prev:
            members.update(adj.vertex_neighbors[f])
        members -= visited
        if not members:
            raise IncompleteRing(f"ring {r} around facet {center} is empty")
        ids = np.fromiter(sorted(members), dtype=np.int64, count=len(members))
        d = centroids[ids] - c0
        ang = np.arctan2(d @ ey, d @ ex)
        angle = dict(zip(ids.tolist(), ang.tolist()))

        if r == 1:
            start = min(adj.edge_neighbors[center])
        else:
            touching = [g for g in adj.edge_neighbors[prev_start] if g in members]
            if not touching:
                touching = [g for g in adj.vertex_neighbors[prev_start] if g in members]
            if touching:
                start = min(touching)
            else:
                a0 = angle_of(centroids[prev_start] - c0, ex, ey)
                start = min(members, key=lambda g: ((angle[g] - a0) % TWO_PI, g))
        ring = _order_ring(members, start, angle, adj.edge_neighbors, adj.vertex_neighbors)
        rings.append(ring)
        visited |= members
        prev = list(ring)
        prev_start = start
    return OrderedRings(center=center, rings=tuple(rings))


def angle_of(d, ex, ey) -> float:
    return math.atan2(float(d @ ey), float(d @ ex))


def resample_ring(ring, n: int) -> list:
    """Nearest-neighbour cyclic resampling: cell ``j`` takes ring position
    ``floor(j * len(ring) / n)``."""
    m = len(ring)
    if m == 0:
        raise IncompleteRing("cannot resample an empty ring")
    return [ring[(j * m) // n] for j in range(n)]


def rings_to_grid(rings: OrderedRings, n: int) -> FacetGrid:
    """Rasterise the first ``n`` rings into an ``n x n`` facet grid."""
    if n < 4:
        raise BadGridSize(f"grid side must be >= 4, got {n}")
    if len(rings.rings) < n:
        raise BadGridSize(
            f"grid of side {n} needs {n} rings (R={n - 1}), got R={rings.ring_count}"
        )
    cells = np.array([resample_ring(rings.rings[r], n) for r in range(n)], dtype=np.int64)
    return FacetGrid(n=n, cells=cells)


# ---------------------------------------------------------------------------
# descriptors


@dataclass
class LocalFit:
    """Plane and quadric fitted to a facet neighbourhood."""

    local_depth: float
    surface_variation: float
    mean_curvature: float
    shape_index: float
    k1: float = field(default=0.0)
    k2: float = field(default=0.0)


def _fit(points: np.ndarray, origin: np.ndarray, ref_normal: np.ndarray) -> LocalFit:
    k = len(points)
    if k < MIN_NEIGHBORHOOD:
        raise InsufficientNeighborhood(f"{k} points, need >= {MIN_NEIGHBORHOOD}")
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered / k
    lam, vec = np.linalg.eigh(cov)
    if lam[1] <= 1e-12 * max(lam[2], 1e-300) or lam[2] <= 0:
        raise SingularFit(f"neighbourhood covariance has rank < 2 (eigenvalues {lam})")
    lam0 = max(lam[0], 0.0)
    sv = lam0 / (lam0 + lam[1] + lam[2])
    nrm = vec[:, 0]
    if np.dot(nrm, ref_normal) < 0:
        nrm = -nrm
    ld = float(np.dot(origin - mean, nrm))

    e1 = vec[:, 2]
    e2 = np.cross(nrm, e1)
    rel = points - origin
    scale = math.sqrt(lam[2])
    x = rel @ e1 / scale
    y = rel @ e2 / scale
    z = rel @ nrm / scale
    A = np.stack([x * x, x * y, y * y, x, y, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, z, rcond=None)
    a, b, c = coef[0] / scale, coef[1] / scale, coef[2] / scale
    dx, dy = coef[3], coef[4]
    # Monge patch curvature at the origin
    E, F, G = 1.0 + dx * dx, dx * dy, 1.0 + dy * dy
    W = math.sqrt(1.0 + dx * dx + dy * dy)
    L, M, N = 2.0 * a / W, b / W, 2.0 * c / W
    det_i = E * G - F * F
    H = (E * N - 2.0 * F * M + G * L) / (2.0 * det_i)
    K = (L * N - M * M) / det_i
    disc = math.sqrt(max(H * H - K, 0.0))
    # positive curvature means the surface bends away from the normal (convex)
    k1, k2 = -H + disc, -H - disc
    si = (2.0 / math.pi) * math.atan2(k1 + k2, k1 - k2) if (k1 or k2) else 0.0
    return LocalFit(
        local_depth=ld,
        surface_variation=float(sv),
        mean_curvature=float(-H),
        shape_index=float(si),
        k1=float(k1),
        k2=float(k2),
    )


def _neighborhood_normal(mesh, ids, normals, areas):
    w = (normals[ids] * areas[ids, None]).sum(axis=0)
    nw = np.linalg.norm(w)
    return w / nw if nw > 0 else np.array([0.0, 0.0, 1.0])


def compute_descriptor(mesh: Mesh, facet_id: int, neighborhood, kind,
                       center: int | None = None) -> float:
    """One geometric descriptor of ``facet_id``.

    ``neighborhood`` is the facet set whose centroids support the plane and
    quadric fits (the facet itself is always included). AZ and EL are the
    azimuth and elevation of the facet normal in the frame of ``center``
    (defaults to the facet itself).
    """
    kind = DescriptorKind.parse(kind) if isinstance(kind, str) else DescriptorKind(kind)
    if kind in (DescriptorKind.AZ, DescriptorKind.EL):
        frame = _center_frame(mesh, facet_id if center is None else center)
        az, el = _az_el(mesh, np.array([facet_id]), frame)
        return float(az[0] if kind is DescriptorKind.AZ else el[0])
    ids = np.array(sorted(set(int(g) for g in neighborhood) | {int(facet_id)}), dtype=np.int64)
    normals, areas = mesh.normals_areas()
    cents = mesh.centroids()
    ref = normals[facet_id] if areas[facet_id] > 0 else _neighborhood_normal(mesh, ids, normals, areas)
    fit = _fit(cents[ids], cents[facet_id], ref)
    return {
        DescriptorKind.LD: fit.local_depth,
        DescriptorKind.SV: fit.surface_variation,
        DescriptorKind.Cur: fit.mean_curvature,
        DescriptorKind.SI: fit.shape_index,
    }[kind]


def _az_el(mesh, ids, frame):
    normals, _ = mesh.normals_areas()
    ex, ey, ez = frame
    n = normals[ids]
    az = np.arctan2(n @ ey, n @ ex)
    el = np.arcsin(np.clip(n @ ez, -1.0, 1.0))
    return az, el


def k_ring(adj: Adjacency, facet: int, radius: int) -> set:
    """Facets within ``radius`` vertex-sharing steps of ``facet`` (inclusive)."""
    seen = {facet}
    frontier = [facet]
    for _ in range(radius):
        nxt = []
        for f in frontier:
            for g in adj.vertex_neighbors[f]:
                if g not in seen:
                    seen.add(g)
                    nxt.append(g)
        frontier = nxt
    return seen


def facet_descriptors(mesh: Mesh, adj: Adjacency, radius: int = 2, facets=None) -> np.ndarray:
    """Intrinsic descriptors (LD, SV, Cur, SI) of every facet over its
    ``radius``-ring neighbourhood.

    Returns an (F, 4) array ordered as :data:`INTRINSIC`; facets whose fit is
    impossible (too few neighbours, collinear support) are NaN.
    """
    normals, areas = mesh.normals_areas()
    cents = mesh.centroids()
    out = np.full((mesh.facet_count, len(INTRINSIC)), np.nan)
    todo = range(mesh.facet_count) if facets is None else facets
    for f in todo:
        ids = np.fromiter(sorted(k_ring(adj, f, radius)), dtype=np.int64)
        ref = normals[f] if areas[f] > 0 else _neighborhood_normal(mesh, ids, normals, areas)
        try:
            fit = _fit(cents[ids], cents[f], ref)
        except (InsufficientNeighborhood, SingularFit):
            continue
        out[f] = (fit.local_depth, fit.surface_variation, fit.mean_curvature, fit.shape_index)
    return out


# ---------------------------------------------------------------------------
# patch images


def standardize(channels: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per channel; constant channels become 0."""
    mean = channels.mean(axis=(1, 2), keepdims=True)
    std = channels.std(axis=(1, 2), keepdims=True)
    return (channels - mean) / np.where(std > 1e-12, std, 1.0)


def grid_channels(mesh: Mesh, grid: FacetGrid, center: int, channel_ids, table: np.ndarray) -> np.ndarray:
    """Raw (unstandardised) descriptor maps of a facet grid."""
    cells = grid.cells
    out = np.empty((len(channel_ids), grid.n, grid.n))
    frame = None
    for i, kind in enumerate(channel_ids):
        if kind in INTRINSIC:
            out[i] = table[cells, INTRINSIC.index(kind)]
        else:
            if frame is None:
                frame = _center_frame(mesh, center)
                az, el = _az_el(mesh, cells.reshape(-1), frame)
            out[i] = (az if kind is DescriptorKind.AZ else el).reshape(grid.n, grid.n)
    return out


def build_patch_image(mesh: Mesh, adj: Adjacency, center: int, cfg: PatchConfig = PatchConfig(),
                      table: np.ndarray | None = None, centroids=None) -> PatchImage:
    """Surface patch image around ``center``.

    ``table`` is an optional precomputed :func:`facet_descriptors` array;
    without it the descriptors of the grid facets are computed on demand.

    Raises
    ------
    IncompleteRing
        If the centre is too close to the boundary for ``cfg.n`` rings.
    """
    rings = extract_ordered_rings(mesh, adj, center, cfg.n - 1, centroids=centroids)
    grid = rings_to_grid(rings, cfg.n)
    if table is None:
        need = np.unique(grid.cells)
        table = facet_descriptors(mesh, adj, cfg.descriptor_radius, facets=need.tolist())
    raw = grid_channels(mesh, grid, center, cfg.channel_ids, table)
    if not np.isfinite(raw).all():
        raise InsufficientNeighborhood(f"descriptor fit failed inside the patch of facet {center}")
    img = standardize(raw) if cfg.standardize else raw
    return PatchImage(channels=img, channel_ids=tuple(k.value for k in cfg.channel_ids), center=center)


def extract_patches(mesh: Mesh, adj: Adjacency, cfg: PatchConfig = PatchConfig(), progress=None):
    """Patch images for every facet with complete rings.

    Returns ``(centers, images)`` where ``images`` has shape (N, c, n, n).
    Facets near the boundary (or with failed descriptor fits) are skipped.
    """
    inner = np.nonzero(interior_mask(mesh, adj, cfg.n - 1))[0]
    table = facet_descriptors(mesh, adj, cfg.descriptor_radius)
    cents = mesh.centroids()
    centers, images = [], []
    for i, f in enumerate(inner.tolist()):
        try:
            img = build_patch_image(mesh, adj, f, cfg, table=table, centroids=cents)
        except (IncompleteRing, InsufficientNeighborhood):
            continue
        centers.append(f)
        images.append(img.channels)
        if progress is not None:
            progress(i + 1, len(inner))
    c = len(cfg.channel_ids)
    imgs = np.stack(images) if images else np.zeros((0, c, cfg.n, cfg.n))
    return np.array(centers, dtype=np.int64), imgs


# ---------------------------------------------------------------------------
# patch cache


def write_patches(path, centers, images) -> None:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[2] != images.shape[3]:
        raise DimensionMismatch(f"expected (N, c, n, n) images, got {images.shape}")
    centers = np.asarray(centers)
    if len(centers) != len(images):
        raise DimensionMismatch(f"{len(centers)} centers for {len(images)} patches")
    num, c, n, _ = images.shape
    with open(path, "wb") as fh:
        fh.write(binfmt.header(binfmt.PATCH_VERSION))
        fh.write(struct.pack("<IHH", num, c, n))
        payload = images.astype("<f4").reshape(num, -1)
        for cid, row in zip(centers.tolist(), payload):
            fh.write(struct.pack("<I", cid))
            fh.write(row.tobytes())


def read_patches(path):
    r = binfmt.open_reader(path, binfmt.PATCH_VERSION)
    num, c, n = r.unpack("IHH")
    centers = np.empty(num, dtype=np.int64)
    images = np.empty((num, c, n, n), dtype=np.float32)
    for i in range(num):
        (centers[i],) = r.unpack("I")
        images[i] = r.f32(c * n * n).reshape(c, n, n)
    return centers, images
