"""Triangle meshes: OFF/PLY I/O, lumped vertex areas, color export, and
quadric-error-metric edge-contraction simplification."""

import heapq
import logging
import struct
from pathlib import Path

import numpy as np

from .errors import MeshError

logger = logging.getLogger(__name__)

# Triangles below this area (relative to the mesh scale) are treated as
# degenerate when cleaning up after edge contractions.
_REL_AREA_EPS = 1e-12


def _face_areas(vertices, faces):
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


class TriMesh:
    """Immutable triangle mesh with barycentric (lumped) vertex areas.

    Attributes
    ----------
    vertices : (n, 3) float64
    faces : (m, 3) int64, counter-clockwise orientation
    vertex_areas : (n,) float64
        One third of the summed incident triangle areas. These are the
        diagonal entries of the lumped mass matrix.
    """

    __slots__ = ("vertices", "faces", "vertex_areas", "face_areas")

    def __init__(self, vertices, faces):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        f = np.ascontiguousarray(faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (m, 3), got {f.shape}")
        if v.shape[0] == 0 or f.shape[0] == 0:
            raise MeshError("empty mesh")
        if f.min() < 0 or f.max() >= v.shape[0]:
            raise MeshError("face index out of range")
        if ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
            raise MeshError("degenerate face (repeated vertex index)")
        areas = _face_areas(v, f)
        if (areas <= 0.0).any():
            raise MeshError("zero-area face")
        va = np.zeros(v.shape[0])
        np.add.at(va, f.ravel(), np.repeat(areas / 3.0, 3))
        for arr in (v, f, areas, va):
            arr.setflags(write=False)
        self.vertices = v
        self.faces = f
        self.face_areas = areas
        self.vertex_areas = va

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def total_area(self):
        return float(self.face_areas.sum())

    def bbox_diagonal(self):
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def edges(self):
        """Unique undirected edges as a (e, 2) array with e[i, 0] < e[i, 1]."""
        f = self.faces
        pairs = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        pairs.sort(axis=1)
        return np.unique(pairs, axis=0)

    def vertex_normals(self):
        """Area-weighted vertex normals (unit length; zero if degenerate)."""
        v, f = self.vertices, self.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        vn = np.zeros_like(v)
        np.add.at(vn, f[:, 0], fn)
        np.add.at(vn, f[:, 1], fn)
        np.add.at(vn, f[:, 2], fn)
        norms = np.linalg.norm(vn, axis=1)
        ok = norms > 0
        vn[ok] /= norms[ok, None]
        return vn

    def permuted(self, perm):
        """Relabeled copy: new vertex i is old vertex perm[i]."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        return TriMesh(self.vertices[perm], inv[self.faces])


def _drop_unreferenced(vertices, faces):
    """Remove vertices not used by any face; returns (v, f, old_index_of_new)."""
    used = np.unique(faces.ravel())
    remap = np.full(vertices.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return vertices[used], remap[faces], used


# ---------------------------------------------------------------------------
# File I/O


def load_mesh(path):
    """Load a triangle mesh from an OFF or PLY (ascii / binary LE) file.

    Unreferenced vertices are removed and zero-area faces dropped with a
    warning. Raises MeshError on parse failure or non-triangle faces.
    """
    mesh, _ = load_mesh_with_colors(path)
    return mesh


def load_mesh_with_colors(path):
    """Like load_mesh but also returns per-vertex colors in [0, 1] (or None)."""
    path = Path(path)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head[:3] in (b"OFF", b"off"):
        v, f = _read_off(path)
        colors = None
    elif head[:3] == b"ply":
        v, f, colors = _read_ply(path)
    else:
        raise MeshError(f"unrecognized mesh format in {path}")
    if f.shape[0] == 0 or v.shape[0] == 0:
        raise MeshError(f"empty mesh: {path}")
    areas = _face_areas(v, f)
    bad = areas <= 0.0
    repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    drop = bad | repeated
    if drop.any():
        logger.warning("%s: dropping %d degenerate face(s)", path, int(drop.sum()))
        f = f[~drop]
        if f.shape[0] == 0:
            raise MeshError(f"all faces degenerate: {path}")
    v, f, used = _drop_unreferenced(v, f)
    if colors is not None:
        colors = colors[used]
    return TriMesh(v, f), colors


def _read_off(path):
    with open(path, "r") as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.extend(line.split())
    if not tokens or tokens[0].upper() != "OFF":
        raise MeshError(f"not an OFF file: {path}")
    tokens = tokens[1:]
    try:
        nv, nf = int(tokens[0]), int(tokens[1])
        pos = 3  # skip edge count
        coords = np.array(tokens[pos:pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
        pos += 3 * nv
        faces = np.empty((nf, 3), dtype=np.int64)
        for i in range(nf):
            cnt = int(tokens[pos])
            if cnt != 3:
                raise MeshError(f"non-triangle face ({cnt} vertices) in {path}")
            faces[i] = [int(t) for t in tokens[pos + 1:pos + 4]]
            pos += 1 + cnt
    except MeshError:
        raise
    except (ValueError, IndexError) as exc:
        raise MeshError(f"malformed OFF file {path}: {exc}") from exc
    return coords, faces


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path):
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise MeshError(f"not a PLY file: {path}")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype) or ('list', count_t, item_t, name)])
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"unterminated PLY header in {path}")
            parts = line.decode("ascii", "replace").strip().split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise MeshError(f"property before element in {path}")
                if parts[1] == "list":
                    elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
                else:
                    elements[-1][2].append((parts[2], parts[1]))
            elif parts[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise MeshError(f"unsupported PLY format '{fmt}' in {path}")
        if fmt == "ascii":
            data = fh.read().decode("ascii", "replace").split()
            return _parse_ply_elements_ascii(data, elements, path)
        return _parse_ply_elements_binary(fh, elements, path)


def _collect_vertex_arrays(names, columns, path):
    try:
        v = np.column_stack([columns[names.index(c)] for c in ("x", "y", "z")])
    except ValueError as exc:
        raise MeshError(f"PLY vertex element missing x/y/z in {path}") from exc
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        rgb = np.column_stack([columns[names.index(c)] for c in ("red", "green", "blue")])
        colors = rgb.astype(np.float64) / 255.0
    return v.astype(np.float64), colors


def _parse_ply_elements_ascii(tokens, elements, path):
    pos = 0
    v = f = colors = None
    for name, count, props in elements:
        if name == "vertex":
            width = len(props)
            names = [p[0] for p in props]
            if "list" in names:
                raise MeshError(f"list property on vertices unsupported in {path}")
            block = np.array(tokens[pos:pos + width * count], dtype=np.float64)
            pos += width * count
            block = block.reshape(count, width)
            v, colors = _collect_vertex_arrays(names, list(block.T), path)
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshError(f"unsupported face properties in {path}")
            f = np.empty((count, 3), dtype=np.int64)
            for i in range(count):
                cnt = int(tokens[pos])
                if cnt != 3:
                    raise MeshError(f"non-triangle face ({cnt} vertices) in {path}")
                f[i] = [int(t) for t in tokens[pos + 1:pos + 4]]
                pos += 1 + cnt
        else:  # skip unknown fixed-width element
            pos += len(props) * count
    if v is None or f is None:
        raise MeshError(f"PLY missing vertex or face element in {path}")
    return v, f, colors


def _parse_ply_elements_binary(fh, elements, path):
    v = f = colors = None
    for name, count, props in elements:
        if name == "vertex":
            names = [p[0] for p in props]
            if "list" in names:
                raise MeshError(f"list property on vertices unsupported in {path}")
            dtype = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
            raw = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
            cols = [raw[p[0]] for p in props]
            v, colors = _collect_vertex_arrays(names, cols, path)
        elif name == "face":
            if len(props) != 1 or props[0][0] != "list":
                raise MeshError(f"unsupported face properties in {path}")
            _, cnt_t, item_t, _ = props[0]
            cnt_dt = np.dtype("<" + _PLY_TYPES[cnt_t])
            item_dt = np.dtype("<" + _PLY_TYPES[item_t])
            f = np.empty((count, 3), dtype=np.int64)
            for i in range(count):
                cnt = int(np.frombuffer(fh.read(cnt_dt.itemsize), dtype=cnt_dt)[0])
                if cnt != 3:
                    raise MeshError(f"non-triangle face ({cnt} vertices) in {path}")
                idx = np.frombuffer(fh.read(item_dt.itemsize * 3), dtype=item_dt)
                f[i] = idx
        else:
            # unknown element: only skippable when fixed width
            if any(p[0] == "list" for p in props):
                raise MeshError(f"cannot skip list element '{name}' in {path}")
            width = sum(np.dtype(_PLY_TYPES[p[1]]).itemsize for p in props)
            fh.seek(width * count, 1)
    if v is None or f is None:
        raise MeshError(f"PLY missing vertex or face element in {path}")
    return v, f, colors


def save_mesh(mesh, path, binary=False):
    """Write a PLY file (ascii by default, binary little-endian otherwise)."""
    _write_ply(mesh, None, path, binary)


def save_mesh_with_colors(mesh, colors, path, binary=False):
    """Write a PLY file with per-vertex uchar RGB from colors in [0, 1]."""
    colors = np.asarray(colors, dtype=np.float64)
    if colors.shape != (mesh.n_vertices, 3):
        raise MeshError(
            f"colors must have shape ({mesh.n_vertices}, 3), got {colors.shape}")
    if colors.min() < 0.0 or colors.max() > 1.0:
        raise MeshError("colors must lie in [0, 1]")
    _write_ply(mesh, colors, path, binary)


def _write_ply(mesh, colors, path, binary):
    v = mesh.vertices.astype(np.float32)
    f = mesh.faces
    rgb = None if colors is None else np.rint(colors * 255.0).astype(np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(v)}",
              "property float x", "property float y", "property float z"]
    if rgb is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {len(f)}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            if rgb is None:
                fh.write(v.astype("<f4").tobytes())
            else:
                row = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
                buf = np.empty(len(v), dtype=row)
                buf["xyz"] = v
                buf["rgb"] = rgb
                fh.write(buf.tobytes())
            frow = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
            fbuf = np.empty(len(f), dtype=frow)
            fbuf["n"] = 3
            fbuf["idx"] = f
            fh.write(fbuf.tobytes())
        else:
            for i in range(len(v)):
                line = f"{v[i, 0]:.9g} {v[i, 1]:.9g} {v[i, 2]:.9g}"
                if rgb is not None:
                    line += f" {rgb[i, 0]} {rgb[i, 1]} {rgb[i, 2]}"
                fh.write((line + "\n").encode("ascii"))
            for i in range(len(f)):
                fh.write(f"3 {f[i, 0]} {f[i, 1]} {f[i, 2]}\n".encode("ascii"))


# ---------------------------------------------------------------------------
# Quadric-error-metric simplification


def _plane_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm == 0.0:
        return np.zeros((4, 4))
    area = 0.5 * norm
    n = n / norm
    d = -np.dot(n, p0)
    p = np.array([n[0], n[1], n[2], d])
    return area * np.outer(p, p)


def _contraction_target(quadric, pa, pb):
    """Optimal contraction position and its cost; falls back to the best of
    midpoint / endpoints when the quadric is singular."""
    A = quadric[:3, :3]
    b = -quadric[:3, 3]

    def cost_at(pos):
        h = np.array([pos[0], pos[1], pos[2], 1.0])
        return max(float(h @ quadric @ h), 0.0)

    try:
        # reject nearly singular systems to keep placement stable
        if abs(np.linalg.det(A)) > 1e-10 * max(np.trace(A) ** 3 / 27.0, 1e-300):
            pos = np.linalg.solve(A, b)
            return pos, cost_at(pos)
    except np.linalg.LinAlgError:
        pass
    candidates = [0.5 * (pa + pb), pa, pb]
    costs = [cost_at(c) for c in candidates]
    i = int(np.argmin(costs))
    return candidates[i], costs[i]


class _SimplifyState:
    """Mutable working copy used during greedy edge contraction."""

    def __init__(self, mesh):
        self.pos = mesh.vertices.copy()
        n = mesh.n_vertices
        self.parent = np.arange(n, dtype=np.int64)  # union-find
        self.alive = np.ones(n, dtype=bool)
        self.version = np.zeros(n, dtype=np.int64)
        self.faces = {i: tuple(f) for i, f in enumerate(mesh.faces.tolist())}
        self.vert_faces = [set() for _ in range(n)]
        for fid, f in self.faces.items():
            for vv in f:
                self.vert_faces[vv].add(fid)
        self.quadrics = np.zeros((n, 4, 4))
        v = mesh.vertices
        for f in mesh.faces:
            q = _plane_quadric(v[f[0]], v[f[1]], v[f[2]])
            for vv in f:
                self.quadrics[vv] += q

    def find(self, i):
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def neighbors(self, a):
        out = set()
        for fid in self.vert_faces[a]:
            out.update(self.faces[fid])
        out.discard(a)
        return out

    def faces_with_edge(self, a, b):
        return [fid for fid in self.vert_faces[a] if b in self.faces[fid]]

    def link_condition_ok(self, a, b):
        """Common neighbors of a, b must be exactly the vertices opposite the
        edge; prevents contractions that would pinch the surface."""
        shared_faces = self.faces_with_edge(a, b)
        if not (1 <= len(shared_faces) <= 2):
            return False
        opposite = set()
        for fid in shared_faces:
            for vv in self.faces[fid]:
                if vv != a and vv != b:
                    opposite.add(vv)
        common = self.neighbors(a) & self.neighbors(b)
        return common == opposite

    def contract(self, a, b):
        """Merge b into a (a = min index kept), returning vertices whose
        incident edges need re-queuing."""
        keep, gone = (a, b) if a < b else (b, a)
        pos, _ = _contraction_target(
            self.quadrics[keep] + self.quadrics[gone], self.pos[keep], self.pos[gone])
        self.pos[keep] = pos
        self.quadrics[keep] += self.quadrics[gone]
        self.parent[gone] = keep
        self.alive[gone] = False
        for fid in list(self.vert_faces[gone]):
            f = self.faces[fid]
            nf = tuple(keep if vv == gone else vv for vv in f)
            if len(set(nf)) < 3:  # degenerate: delete immediately
                for vv in f:
                    self.vert_faces[vv].discard(fid)
                del self.faces[fid]
            else:
                self.faces[fid] = nf
                self.vert_faces[gone].discard(fid)
                self.vert_faces[keep].add(fid)
        self.vert_faces[gone] = set()
        touched = self.neighbors(keep) | {keep}
        for vv in touched:
            self.version[vv] += 1
        return keep, touched


def simplify(mesh, target_n):
    """Greedy QEM edge contraction down to at most target_n vertices.

    Returns (simplified_mesh, vertex_map) where vertex_map[i] is the index in
    the simplified mesh of the surviving representative of original vertex i.
    Ties in contraction cost are broken by the lexicographically smallest
    (min index, max index) edge, which makes the result deterministic.
    """
    if target_n < 3:
        raise MeshError("target_n must be at least 3")
    n = mesh.n_vertices
    if n <= target_n:
        return mesh, np.arange(n, dtype=np.int64)

    st = _SimplifyState(mesh)
    heap = []

    def push_edge(a, b):
        a2, b2 = (a, b) if a < b else (b, a)
        q = st.quadrics[a2] + st.quadrics[b2]
        _, cost = _contraction_target(q, st.pos[a2], st.pos[b2])
        heapq.heappush(heap, (cost, a2, b2, st.version[a2], st.version[b2]))

    for a, b in mesh.edges():
        push_edge(int(a), int(b))

    n_alive = n
    while n_alive > target_n:
        while heap:
            cost, a, b, va, vb = heapq.heappop(heap)
            if not (st.alive[a] and st.alive[b]):
                continue
            if st.version[a] != va or st.version[b] != vb:
                continue
            if not st.link_condition_ok(a, b):
                continue
            if len(st.faces) - len(st.faces_with_edge(a, b)) < 1:
                # contraction would destroy the last face(s)
                continue
            keep, touched = st.contract(a, b)
            n_alive -= 1
            seen = set()
            for u in touched:
                for w in st.neighbors(u):
                    key = (u, w) if u < w else (w, u)
                    if key not in seen:
                        seen.add(key)
                        push_edge(*key)
            break
        else:
            raise MeshError(
                f"cannot simplify below {n_alive} vertices without destroying all faces")

    # rebuild arrays; drop faces that became geometrically degenerate
    if not st.faces:
        raise MeshError("simplification destroyed all faces")
    faces = np.array([st.faces[k] for k in sorted(st.faces)], dtype=np.int64)
    areas = _face_areas(st.pos, faces)
    scale = max(st.pos.max() - st.pos.min(), 1.0)
    good = areas > _REL_AREA_EPS * scale * scale
    if not good.all():
        logger.warning("simplify: dropping %d near-degenerate face(s)", int((~good).sum()))
        faces = faces[good]
    if faces.shape[0] == 0:
        raise MeshError("simplification destroyed all faces")

    referenced = np.zeros(n, dtype=bool)
    referenced[faces.ravel()] = True
    # an alive vertex can lose all its faces in rare collapses; absorb it
    # into its nearest referenced vertex so vertex_map stays total
    for i in np.flatnonzero(st.alive & ~referenced):
        d = np.linalg.norm(st.pos[referenced] - st.pos[i], axis=1)
        st.parent[i] = np.flatnonzero(referenced)[int(np.argmin(d))]

    new_index = np.full(n, -1, dtype=np.int64)
    ref_ids = np.flatnonzero(referenced)
    new_index[ref_ids] = np.arange(ref_ids.size)
    out = TriMesh(st.pos[ref_ids], new_index[faces])
    vertex_map = np.array([new_index[st.find(i)] for i in range(n)], dtype=np.int64)
    return out, vertex_map


def representatives(vertex_map, n_simplified):
    """Inverse of a simplify vertex_map: for each simplified vertex, the
    lowest original index that maps to it (its surviving representative)."""
    rep = np.full(n_simplified, -1, dtype=np.int64)
    for orig in range(len(vertex_map) - 1, -1, -1):
        rep[vertex_map[orig]] = orig
    if (rep < 0).any():
        raise MeshError("vertex_map does not cover all simplified vertices")
    return rep
