"""Single-source geodesic distances by fast marching and dense pairwise
distance matrices.

The front propagation follows the classic triangulated-domain scheme: a
min-heap ordered wavefront with the two-support update solved inside each
acute triangle corner. Obtuse corners are split at build time by unfolding
the adjacent triangle strip into the plane until a mesh vertex lands inside
the obtuse wedge; the resulting virtual supports make every runtime update
acute. One-support (edge graph) updates run everywhere as a fallback, so
distances never exceed graph distances.
"""

import logging
import struct

import numpy as np
from numba import njit

from .errors import DataError

logger = logging.getLogger(__name__)

_DIST_MAGIC = b"ISODST01"

# bound on unfolding work per obtuse corner; beyond it the corner keeps only
# its one-support updates
_MAX_UNFOLD_STEPS = 64


# ---------------------------------------------------------------------------
# Update-plan construction (pure geometry, one pass per mesh)


def _edge_graph_csr(mesh):
    e = mesh.edges()
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    ln = np.concatenate([lengths, lengths])
    order = np.argsort(src, kind="stable")
    src, dst, ln = src[order], dst[order], ln[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, src + 1, 1)
    np.cumsum(ptr, out=ptr)
    return ptr, dst.astype(np.int64), ln


def _edge_triangle_map(faces):
    """Map (lo, hi) vertex pair -> list of (face index, opposite vertex)."""
    out = {}
    for t in range(faces.shape[0]):
        i, j, k = faces[t]
        for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
            key = (a, b) if a < b else (b, a)
            out.setdefault(key, []).append((t, c))
    return out


def _place_unfolded(p, q, from_pos, r1, r2):
    """2D position of a vertex at true distances r1, r2 from p, q, on the
    side of segment pq away from from_pos. Returns None when degenerate."""
    dq = q - p
    L = np.hypot(dq[0], dq[1])
    if L <= 1e-300:
        return None
    ex = dq / L
    x = (r1 * r1 - r2 * r2 + L * L) / (2.0 * L)
    y2 = r1 * r1 - x * x
    if y2 <= 0.0:
        return None
    y = np.sqrt(y2)
    perp = np.array([-ex[1], ex[0]])
    rel = from_pos - p
    side = dq[0] * rel[1] - dq[1] * rel[0]
    w = p + x * ex + (-y if side > 0 else y) * perp
    return w


class _UpdatePlan:
    """Flattened per-mesh update rules consumed by the marching kernel."""

    def __init__(self, mesh):
        v, f = mesh.vertices, mesh.faces
        self.n = mesh.n_vertices
        self.nbr_ptr, self.nbr_idx, self.nbr_len = _edge_graph_csr(mesh)
        edge_tris = _edge_triangle_map(f)

        ent = []  # rows (c, p, q, lp, lq, cos)

        def emit(c, p_id, p_pos, q_id, q_pos):
            lp = np.hypot(p_pos[0], p_pos[1])
            lq = np.hypot(q_pos[0], q_pos[1])
            if lp <= 0.0 or lq <= 0.0:
                return
            cosw = np.dot(p_pos, q_pos) / (lp * lq)
            if cosw > 1.0 - 1e-12:
                return  # zero-angle wedge carries no extra information
            ent.append((c, p_id, q_id, lp, lq, cosw))

        def handle_wedge(c, s1, s1p, s2, s2p, w1, w1p, w2, w2p, from_tri,
                         from_pos, budget):
            """Recursively split the wedge (s1, s2) at origin-c until acute.

            (w1, w2) is the mesh edge the wedge currently looks through;
            from_tri/from_pos identify the triangle on the origin side of
            that edge. budget is a mutable one-element work counter.
            """
            l1 = np.hypot(s1p[0], s1p[1])
            l2 = np.hypot(s2p[0], s2p[1])
            if l1 <= 0.0 or l2 <= 0.0:
                return
            if np.dot(s1p, s2p) >= 0.0:
                emit(c, s1, s1p, s2, s2p)
                return
            budget[0] -= 1
            if budget[0] <= 0:
                return
            key = (w1, w2) if w1 < w2 else (w2, w1)
            nxt = [tw for tw in edge_tris.get(key, ()) if tw[0] != from_tri]
            if not nxt:
                return  # boundary: only one-support updates remain here
            tri2, w = nxt[0]
            wp = _place_unfolded(w1p, w2p, from_pos, np.linalg.norm(v[w] - v[w1]),
                                 np.linalg.norm(v[w] - v[w2]))
            if wp is None:
                return
            c1 = s1p[0] * wp[1] - s1p[1] * wp[0]
            c2 = wp[0] * s2p[1] - wp[1] * s2p[0]
            if c1 > 0.0 and c2 > 0.0:
                handle_wedge(c, s1, s1p, w, wp, w1, w1p, w, wp, tri2, w2p, budget)
                handle_wedge(c, w, wp, s2, s2p, w, wp, w2, w2p, tri2, w1p, budget)
            elif c1 <= 0.0:
                handle_wedge(c, s1, s1p, s2, s2p, w, wp, w2, w2p, tri2, w1p, budget)
            else:
                handle_wedge(c, s1, s1p, s2, s2p, w1, w1p, w, wp, tri2, w2p, budget)

        for t in range(f.shape[0]):
            i0, i1, i2 = f[t]
            for c, a, b in ((i0, i1, i2), (i1, i2, i0), (i2, i0, i1)):
                ea = v[a] - v[c]
                eb = v[b] - v[c]
                la = np.linalg.norm(ea)
                lb = np.linalg.norm(eb)
                cosw = np.dot(ea, eb) / (la * lb)
                if cosw >= 0.0:
                    if cosw <= 1.0 - 1e-12:
                        ent.append((c, a, b, la, lb, cosw))
                else:
                    sinw = np.sqrt(max(1.0 - cosw * cosw, 0.0))
                    ap = np.array([la, 0.0])
                    bp = np.array([lb * cosw, lb * sinw])
                    handle_wedge(c, a, ap, b, bp, a, ap, b, bp, t,
                                 np.zeros(2), [_MAX_UNFOLD_STEPS])

        if ent:
            rows = np.array([(r[0], r[1], r[2]) for r in ent], dtype=np.int64)
            geo = np.array([(r[3], r[4], r[5]) for r in ent], dtype=np.float64)
        else:
            rows = np.zeros((0, 3), dtype=np.int64)
            geo = np.zeros((0, 3), dtype=np.float64)
        self.upd_c = np.ascontiguousarray(rows[:, 0])
        self.upd_p = np.ascontiguousarray(rows[:, 1])
        self.upd_q = np.ascontiguousarray(rows[:, 2])
        self.upd_lp = np.ascontiguousarray(geo[:, 0])
        self.upd_lq = np.ascontiguousarray(geo[:, 1])
        self.upd_cos = np.ascontiguousarray(geo[:, 2])
        # wake-up lists: entry ids indexed by either support vertex
        m = rows.shape[0]
        owners = np.concatenate([self.upd_p, self.upd_q])
        eids = np.concatenate([np.arange(m), np.arange(m)])
        order = np.argsort(owners, kind="stable")
        owners, eids = owners[order], eids[order]
        ptr = np.zeros(self.n + 1, dtype=np.int64)
        np.add.at(ptr, owners + 1, 1)
        np.cumsum(ptr, out=ptr)
        self.ent_ptr = ptr
        self.ent_idx = eids.astype(np.int64)


@njit(cache=True)
def _heap_push(hd, hv, hs, key, val):
    hd[hs] = key
    hv[hs] = val
    i = hs
    while i > 0:
        p = (i - 1) // 2
        if hd[p] > hd[i] or (hd[p] == hd[i] and hv[p] > hv[i]):
            hd[p], hd[i] = hd[i], hd[p]
            hv[p], hv[i] = hv[i], hv[p]
            i = p
        else:
            break
    return hs + 1


@njit(cache=True)
def _fmm_kernel(source, n, nbr_ptr, nbr_idx, nbr_len,
                ent_ptr, ent_idx, upd_c, upd_p, upd_q, upd_lp, upd_lq, upd_cos):
    d = np.full(n, np.inf)
    state = np.zeros(n, dtype=np.uint8)  # 0 far/trial, 2 accepted
    cap = 2 * nbr_idx.shape[0] + 2 * ent_idx.shape[0] + n + 16
    hd = np.empty(cap, dtype=np.float64)
    hv = np.empty(cap, dtype=np.int64)
    hs = 0
    d[source] = 0.0
    hs = _heap_push(hd, hv, hs, 0.0, source)
    order = np.empty(n, dtype=np.int64)
    no = 0
    while hs > 0:
        dist = hd[0]
        x = hv[0]
        hs -= 1
        hd[0] = hd[hs]
        hv[0] = hv[hs]
        i = 0
        while True:
            l = 2 * i + 1
            r = l + 1
            m = i
            if l < hs and (hd[l] < hd[m] or (hd[l] == hd[m] and hv[l] < hv[m])):
                m = l
            if r < hs and (hd[r] < hd[m] or (hd[r] == hd[m] and hv[r] < hv[m])):
                m = r
            if m == i:
                break
            hd[i], hd[m] = hd[m], hd[i]
            hv[i], hv[m] = hv[m], hv[i]
            i = m
        if state[x] == 2 or dist > d[x]:
            continue
        state[x] = 2
        order[no] = x
        no += 1
        for a in range(nbr_ptr[x], nbr_ptr[x + 1]):
            j = nbr_idx[a]
            if state[j] == 2:
                continue
            nd = d[x] + nbr_len[a]
            if nd < d[j]:
                d[j] = nd
                hs = _heap_push(hd, hv, hs, nd, j)
        for a in range(ent_ptr[x], ent_ptr[x + 1]):
            e = ent_idx[a]
            c = upd_c[e]
            if state[c] == 2:
                continue
            p = upd_p[e]
            q = upd_q[e]
            if state[p] != 2 or state[q] != 2:
                continue
            # orient so support A carries the smaller value; b = |cA|, a = |cB|
            if d[p] <= d[q]:
                ua, ub, lb, la = d[p], d[q], upd_lp[e], upd_lq[e]
            else:
                ua, ub, lb, la = d[q], d[p], upd_lq[e], upd_lp[e]
            cth = upd_cos[e]
            u = ub - ua
            aa = la * la + lb * lb - 2.0 * la * lb * cth
            nd = ua + lb if ua + lb < ub + la else ub + la
            if aa > 0.0:
                bb = 2.0 * lb * u * (la * cth - lb)
                cc = lb * lb * (u * u - la * la * (1.0 - cth * cth))
                disc = bb * bb - 4.0 * aa * cc
                if disc >= 0.0:
                    t = (-bb + np.sqrt(disc)) / (2.0 * aa)
                    # in-triangle conditions, written multiplication-only so
                    # a right angle (cth = 0) stays exact
                    if (u < t and la * cth * t < lb * (t - u)
                            and lb * (t - u) * cth < la * t):
                        cand = ua + t
                        if cand < nd:
                            nd = cand
            if nd < d[c]:
                d[c] = nd
                hs = _heap_push(hd, hv, hs, nd, c)
    return d, order[:no]


def fast_marching(mesh, source, return_order=False, _plan=None):
    """Geodesic distances from one source vertex to all vertices.

    Unreachable vertices get +inf. With return_order=True also returns the
    acceptance order of the front (distances are non-decreasing along it).
    """
    n = mesh.n_vertices
    source = int(source)
    if not (0 <= source < n):
        raise DataError(f"source index {source} out of range for {n} vertices")
    plan = _plan if _plan is not None else _UpdatePlan(mesh)
    d, order = _fmm_kernel(
        source, n, plan.nbr_ptr, plan.nbr_idx, plan.nbr_len,
        plan.ent_ptr, plan.ent_idx, plan.upd_c, plan.upd_p, plan.upd_q,
        plan.upd_lp, plan.upd_lq, plan.upd_cos)
    if return_order:
        return d, order
    return d


class GeodesicMatrix:
    """Dense symmetric pairwise geodesic distances, stored as float32."""

    __slots__ = ("d",)

    def __init__(self, d):
        d = np.ascontiguousarray(d, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DataError(f"distance matrix must be square, got {d.shape}")
        d.setflags(write=False)
        self.d = d

    @property
    def n(self):
        return self.d.shape[0]

    @property
    def diameter(self):
        return float(self.d.max())

    def save(self, path):
        """Binary layout: magic, n as int64 LE, row-major float32 LE."""
        with open(path, "wb") as fh:
            fh.write(_DIST_MAGIC)
            fh.write(struct.pack("<q", self.n))
            fh.write(self.d.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(_DIST_MAGIC))
            if magic != _DIST_MAGIC:
                raise DataError(f"not a distance cache file: {path}")
            (n,) = struct.unpack("<q", fh.read(8))
            d = np.frombuffer(fh.read(4 * n * n), dtype="<f4")
            if d.size != n * n:
                raise DataError(f"truncated distance cache: {path}")
        return cls(d.reshape(n, n))


def distance_matrix(mesh, max_n=20000):
    """All-pairs geodesic distances, symmetrized as (D + D^T) / 2.

    Disconnected pairs get the finite sentinel 10 x bounding-box diagonal
    (logged); refusing meshes beyond max_n guards dense storage.
    """
    n = mesh.n_vertices
    if n > max_n:
        raise DataError(f"mesh has {n} vertices, dense matrix guard is {max_n}")
    plan = _UpdatePlan(mesh)
    D = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        D[i] = fast_marching(mesh, i, _plan=plan)
    inf_mask = ~np.isfinite(D)
    if inf_mask.any():
        sentinel = 10.0 * mesh.bbox_diagonal()
        logger.warning(
            "mesh is disconnected: %d unreachable pairs set to %.6g",
            int(inf_mask.sum()), sentinel)
        D[inf_mask] = sentinel
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return GeodesicMatrix(D)
