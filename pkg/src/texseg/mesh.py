"""Triangle mesh container, OBJ/PLY readers and writers, facet adjacency.

Meshes are stored as two numpy arrays (float64 vertices, int64 facets) and
treated as immutable once constructed. Adjacency is derived separately by
:func:`build_adjacency` because the ring extraction code needs several
views of it (edge neighbours, vertex stars, boundary vertices).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateFacet,
    EmptyMesh,
    InvalidIndex,
    LengthMismatch,
    NonManifold,
    ParseError,
)

DEGENERATE_AREA = 1e-12

TEXTURE_RGB = (0, 0, 255)
NON_TEXTURE_RGB = (255, 255, 0)
EXCLUDED_RGB = (128, 128, 128)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Validated triangle mesh.

    Parameters
    ----------
    vertices : (V, 3) float64 array
    facets : (F, 3) int64 array of 0-based vertex indices
    """

    vertices: np.ndarray
    facets: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        f = np.array(self.facets, dtype=np.int64, copy=True).reshape(-1, 3)
        if len(f) == 0 or len(v) == 0:
            raise EmptyMesh("mesh has no facets" if len(v) else "mesh has no vertices")
        if f.min() < 0 or f.max() >= len(v):
            bad = int(np.nonzero((f < 0) | (f >= len(v)))[0][0])
            raise InvalidIndex(
                f"facet {bad} references vertex outside [0, {len(v)}): {f[bad].tolist()}"
            )
        rep = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if rep.any():
            bad = int(np.nonzero(rep)[0][0])
            raise DegenerateFacet(f"facet {bad} repeats a vertex: {f[bad].tolist()}")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "facets", f)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def facet_count(self) -> int:
        return len(self.facets)

    def corners(self) -> np.ndarray:
        """(F, 3, 3) array of facet corner coordinates."""
        return self.vertices[self.facets]

    def centroids(self) -> np.ndarray:
        return self.corners().mean(axis=1)

    def normals_areas(self):
        """Unit normals and areas of all facets.

        Degenerate facets get a zero normal; use :meth:`degenerate_mask` to
        find them.
        """
        c = self.corners()
        cross = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        norm = np.linalg.norm(cross, axis=1)
        area = 0.5 * norm
        safe = np.where(norm > 0, norm, 1.0)
        normals = np.where((norm > 0)[:, None], cross / safe[:, None], 0.0)
        return normals, area

    def degenerate_mask(self) -> np.ndarray:
        return self.normals_areas()[1] < DEGENERATE_AREA

    def transformed(self, rotation=None, translation=None, scale=1.0) -> "Mesh":
        v = np.asarray(self.vertices) * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return Mesh(v, self.facets)


def facet_geometry(mesh: Mesh, facet_id: int):
    """Return ``(centroid, unit_normal, area)`` of one facet.

    The normal follows the vertex winding (right-hand rule).
    """
    if not 0 <= facet_id < mesh.facet_count:
        raise IndexError(f"facet {facet_id} out of range [0, {mesh.facet_count})")
    a, b, c = mesh.vertices[mesh.facets[facet_id]]
    cross = np.cross(b - a, c - a)
    norm = float(np.linalg.norm(cross))
    area = 0.5 * norm
    if area < DEGENERATE_AREA:
        raise DegenerateFacet(f"facet {facet_id} has area {area:.3g}")
    return (a + b + c) / 3.0, cross / norm, area


# ---------------------------------------------------------------------------
# adjacency


@dataclass(frozen=True, eq=False)
class Adjacency:
    """Facet neighbourhood structure of a manifold triangle mesh.

    ``edge_neighbors[f]`` lists facets sharing an edge with ``f``, ordered by
    the edge slot (v0v1, v1v2, v2v0) of ``f``. ``vertex_neighbors[f]`` is the
    set of facets sharing at least one vertex with ``f`` (``f`` excluded).
    """

    edge_neighbors: tuple
    vertex_neighbors: tuple
    boundary_flags: np.ndarray
    vertex_facets: tuple = field(repr=False)
    boundary_vertices: np.ndarray = field(repr=False)

    @property
    def facet_count(self) -> int:
        return len(self.edge_neighbors)


def _edge_table(facets: np.ndarray):
    """Unique undirected edges and, per facet slot, the edge id."""
    e = np.stack(
        [facets[:, [0, 1]], facets[:, [1, 2]], facets[:, [2, 0]]], axis=1
    ).reshape(-1, 2)
    e = np.sort(e, axis=1)
    uniq, inverse, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    return uniq, inverse.reshape(-1), counts


def build_adjacency(mesh: Mesh) -> Adjacency:
    """Edge/vertex adjacency of ``mesh``.

    Raises
    ------
    NonManifold
        If any edge is shared by three or more facets.
    """
    facets = mesh.facets
    nf = len(facets)
    uniq, inverse, counts = _edge_table(facets)
    if counts.max() > 2:
        eid = int(np.argmax(counts > 2))
        owners = np.nonzero(inverse == eid)[0] // 3
        raise NonManifold(uniq[eid].tolist(), owners.tolist())

    slot_facet = np.repeat(np.arange(nf), 3)
    order = np.argsort(inverse, kind="stable")
    sorted_eids = inverse[order]
    # each shared edge appears as two consecutive slots after sorting
    pair = np.nonzero(sorted_eids[1:] == sorted_eids[:-1])[0]
    slot_a, slot_b = order[pair], order[pair + 1]
    other = np.full(3 * nf, -1, dtype=np.int64)
    other[slot_a] = slot_facet[slot_b]
    other[slot_b] = slot_facet[slot_a]
    other = other.reshape(nf, 3)
    edge_neighbors = tuple(tuple(int(x) for x in row if x >= 0) for row in other)
    boundary_flags = (other < 0).any(axis=1)
    boundary_flags.flags.writeable = False

    boundary_edges = uniq[counts == 1]
    boundary_vertices = np.zeros(mesh.vertex_count, dtype=bool)
    boundary_vertices[boundary_edges.reshape(-1)] = True
    boundary_vertices.flags.writeable = False

    flat = facets.reshape(-1)
    vorder = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[vorder], np.arange(mesh.vertex_count + 1))
    owner = vorder // 3
    vertex_facets = tuple(
        tuple(int(x) for x in owner[starts[v]:starts[v + 1]])
        for v in range(mesh.vertex_count)
    )
    vertex_neighbors = []
    for fid, (a, b, c) in enumerate(facets.tolist()):
        s = set(vertex_facets[a])
        s.update(vertex_facets[b])
        s.update(vertex_facets[c])
        s.discard(fid)
        vertex_neighbors.append(frozenset(s))
    return Adjacency(
        edge_neighbors=edge_neighbors,
        vertex_neighbors=tuple(vertex_neighbors),
        boundary_flags=boundary_flags,
        vertex_facets=vertex_facets,
        boundary_vertices=boundary_vertices,
    )


def drop_nonmanifold(mesh: Mesh):
    """Remove facets that make an edge non-manifold.

    For every edge shared by more than two facets, all but the two
    lowest-index facets are dropped. Returns the cleaned mesh and the
    original ids of the kept facets.
    """
    uniq, inverse, counts = _edge_table(mesh.facets)
    drop = np.zeros(mesh.facet_count, dtype=bool)
    for eid in np.nonzero(counts > 2)[0]:
        owners = np.sort(np.nonzero(inverse == eid)[0] // 3)
        drop[owners[2:]] = True
    kept = np.nonzero(~drop)[0]
    return Mesh(mesh.vertices, mesh.facets[kept]), kept


# ---------------------------------------------------------------------------
# readers


def load_mesh(path, format: str = "auto") -> Mesh:
    """Read an OBJ or PLY triangle mesh.

    Quads are fan-split into two triangles; larger polygons are rejected.
    Materials, normals and texture coordinates are ignored.
    """
    path = Path(path)
    if format == "auto":
        ext = path.suffix.lower()
        if ext == ".obj":
            format = "obj"
        elif ext == ".ply":
            format = "ply"
        else:
            with open(path, "rb") as fh:
                head = fh.read(4)
            format = "ply" if head.startswith(b"ply") else "obj"
    if format == "obj":
        return _load_obj(path)
    if format == "ply":
        return _load_ply(path)
    raise ValueError(f"unknown mesh format {format!r}")


def _fan(poly, lineno, path):
    if len(poly) == 3:
        return [poly]
    if len(poly) == 4:
        return [[poly[0], poly[1], poly[2]], [poly[0], poly[2], poly[3]]]
    raise ParseError(f"{len(poly)}-gon faces are not supported", lineno, path)


def _load_obj(path: Path) -> Mesh:
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex needs three coordinates", lineno, path)
                try:
                    verts.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError:
                    raise ParseError(f"bad vertex coordinate in {line!r}", lineno, path)
            elif tag == "f":
                if len(parts) < 4:
                    raise ParseError("face needs at least three vertices", lineno, path)
                poly = []
                nv = len(verts)
                for tok in parts[1:]:
                    head = tok.split("/", 1)[0]
                    try:
                        idx = int(head)
                    except ValueError:
                        raise ParseError(f"bad face index {tok!r}", lineno, path)
                    if idx > 0:
                        i = idx - 1
                    elif idx < 0:
                        i = nv + idx
                    else:
                        raise InvalidIndex("face index 0 is not valid in OBJ", lineno, path)
                    if not 0 <= i < nv:
                        raise InvalidIndex(
                            f"face references vertex {idx} but only {nv} defined", lineno, path
                        )
                    poly.append(i)
                faces.extend(_fan(poly, lineno, path))
            # vt, vn, usemtl, mtllib, o, g, s, l and friends are ignored
    if not verts:
        raise EmptyMesh(f"{path}: no vertices")
    if not faces:
        raise EmptyMesh(f"{path}: no faces")
    return Mesh(np.array(verts), np.array(faces))


_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _ply_type(name, lineno, path):
    try:
        return _PLY_TYPES[name]
    except KeyError:
        raise ParseError(f"unknown PLY type {name!r}", lineno, path)


def _load_ply(path: Path) -> Mesh:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"ply"):
        raise ParseError("missing 'ply' magic", 1, path)
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header", None, path)
    nl = data.find(b"\n", end)
    body = data[nl + 1:] if nl >= 0 else b""
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements = []  # [name, count, [(prop, kind, dtype, count_dtype)]]
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {fmt!r}", lineno, path)
        elif parts[0] == "element":
            if len(parts) != 3:
                raise ParseError("malformed element line", lineno, path)
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise ParseError("property before element", lineno, path)
            if parts[1] == "list":
                if len(parts) != 5:
                    raise ParseError("malformed list property", lineno, path)
                elements[-1][2].append(
                    (parts[4], "list", _ply_type(parts[3], lineno, path),
                     _ply_type(parts[2], lineno, path))
                )
            else:
                if len(parts) != 3:
                    raise ParseError("malformed property", lineno, path)
                elements[-1][2].append((parts[2], "scalar", _ply_type(parts[1], lineno, path), None))
        else:
            raise ParseError(f"unexpected header keyword {parts[0]!r}", lineno, path)
    if fmt is None:
        raise ParseError("missing format line", None, path)
    header_len = len(header_lines) + 1
    if fmt == "ascii":
        values = _read_ply_ascii(body, elements, header_len, path)
    else:
        values = _read_ply_binary(body, elements, path)

    if "vertex" not in values:
        raise EmptyMesh(f"{path}: no vertex element")
    vx = values["vertex"]
    try:
        verts = np.stack([vx["x"], vx["y"], vx["z"]], axis=1).astype(np.float64)
    except KeyError:
        raise ParseError("vertex element lacks x/y/z", None, path)
    polys = values.get("face", {}).get("vertex_indices")
    if polys is None:
        polys = values.get("face", {}).get("vertex_index")
    if polys is None or len(polys) == 0:
        raise EmptyMesh(f"{path}: no faces")
    faces = []
    nv = len(verts)
    for i, poly in enumerate(polys):
        poly = [int(x) for x in poly]
        for x in poly:
            if not 0 <= x < nv:
                raise InvalidIndex(f"face {i} references vertex {x} but only {nv} defined", None, path)
        faces.extend(_fan(poly, None, path))
    return Mesh(verts, np.array(faces, dtype=np.int64))


def _read_ply_ascii(body, elements, header_len, path):
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    out = {}
    for name, count, props in elements:
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            lineno = header_len + pos + 1
            if pos >= len(lines):
                raise ParseError(f"unexpected end of file in element {name!r}", lineno, path)
            toks = lines[pos].split()
            pos += 1
            k = 0
            try:
                for pname, kind, dt, _cnt in props:
                    if kind == "list":
                        n = int(toks[k])
                        k += 1
                        cols[pname].append([float(t) if dt[0] == "f" else int(t) for t in toks[k:k + n]])
                        if len(cols[pname][-1]) != n:
                            raise IndexError
                        k += n
                    else:
                        cols[pname].append(float(toks[k]))
                        k += 1
            except (ValueError, IndexError):
                raise ParseError(f"malformed {name} record", lineno, path)
        out[name] = {
            k: (np.array(v) if _props_kind(props, k) == "scalar" else v) for k, v in cols.items()
        }
    return out


def _props_kind(props, name):
    for p in props:
        if p[0] == name:
            return p[1]
    return None


def _read_ply_binary(body, elements, path):
    out = {}
    off = 0
    for name, count, props in elements:
        if all(p[1] == "scalar" for p in props):
            dt = np.dtype([(p[0], "<" + p[2]) for p in props])
            need = dt.itemsize * count
            if off + need > len(body):
                raise ParseError(f"truncated binary element {name!r}", None, path)
            arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
            off += need
            out[name] = {p[0]: arr[p[0]] for p in props}
            continue
        cols = {p[0]: [] for p in props}
        for _ in range(count):
            for pname, kind, dt, cnt in props:
                if kind == "list":
                    csize = np.dtype(cnt).itemsize
                    if off + csize > len(body):
                        raise ParseError(f"truncated binary element {name!r}", None, path)
                    n = int(np.frombuffer(body, dtype="<" + cnt, count=1, offset=off)[0])
                    off += csize
                    isize = np.dtype(dt).itemsize
                    if off + n * isize > len(body):
                        raise ParseError(f"truncated binary element {name!r}", None, path)
                    cols[pname].append(np.frombuffer(body, dtype="<" + dt, count=n, offset=off).tolist())
                    off += n * isize
                else:
                    size = np.dtype(dt).itemsize
                    if off + size > len(body):
                        raise ParseError(f"truncated binary element {name!r}", None, path)
                    cols[pname].append(np.frombuffer(body, dtype="<" + dt, count=1, offset=off)[0])
                    off += size
        out[name] = cols
    return out


# ---------------------------------------------------------------------------
# writers


def write_obj(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.facets + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def write_ply(mesh: Mesh, path, binary: bool = False, face_colors=None) -> None:
    """Write ``mesh`` as PLY with double-precision vertices.

    ``face_colors`` is an optional (F, 3) uint8 array emitted as
    ``red green blue`` face properties.
    """
    nf = mesh.facet_count
    if face_colors is not None:
        face_colors = np.asarray(face_colors, dtype=np.uint8).reshape(-1, 3)
        if len(face_colors) != nf:
            raise LengthMismatch(f"{len(face_colors)} colors for {nf} facets")
    head = [
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {mesh.vertex_count}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {nf}",
        "property list uchar int vertex_indices",
    ]
    if face_colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head.append("end_header")
    header = ("\n".join(head) + "\n").encode("ascii")
    if binary:
        fdt = [("n", "u1"), ("idx", "<i4", (3,))]
        if face_colors is not None:
            fdt.append(("rgb", "u1", (3,)))
        frec = np.zeros(nf, dtype=fdt)
        frec["n"] = 3
        frec["idx"] = mesh.facets
        if face_colors is not None:
            frec["rgb"] = face_colors
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            fh.write(frec.tobytes())
        return
    with open(path, "wb") as fh:
        fh.write(header)
        lines = [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
        if face_colors is None:
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.facets.tolist()]
        else:
            lines += [
                f"3 {a} {b} {c} {r} {g} {bl}"
                for (a, b, c), (r, g, bl) in zip(mesh.facets.tolist(), face_colors.tolist())
            ]
        fh.write(("\n".join(lines) + "\n").encode("ascii"))


def label_colors(labels) -> np.ndarray:
    labels = np.asarray(labels)
    colors = np.empty((len(labels), 3), dtype=np.uint8)
    colors[:] = EXCLUDED_RGB
    colors[labels == 1] = TEXTURE_RGB
    colors[labels == 0] = NON_TEXTURE_RGB
    return colors


def write_labeled_ply(mesh: Mesh, labels, path) -> None:
    """ASCII PLY with per-face colours: texture blue, non-texture yellow, excluded grey."""
    labels = np.asarray(getattr(labels, "labels", labels))
    if len(labels) != mesh.facet_count:
        raise LengthMismatch(f"{len(labels)} labels for {mesh.facet_count} facets")
    write_ply(mesh, os.fspath(path), binary=False, face_colors=label_colors(labels))
