"""SHOT local descriptors: the fixed per-vertex input field of the network.

Per vertex: an EVD local reference frame over the Euclidean ball of the
given radius (covariance weighted by (R - d), signs fixed by majority vote
of neighbor displacements, ties toward positive), then a signature of
normal-angle-cosine histograms over 32 spatial sectors (8 azimuth x 2
elevation x 2 radial) with quadrilinear soft binning and a global L2
normalization. bins=10 gives the usual 32 * 11 = 352 dimensions.
"""

import logging
import struct

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

logger = logging.getLogger(__name__)

_DESC_MAGIC = b"ISOSHT01"


class DescriptorField:
    """Per-vertex descriptors, stored as float32 rows."""

    __slots__ = ("values",)

    def __init__(self, values):
        values = np.ascontiguousarray(values, dtype=np.float32)
        if values.ndim != 2:
            raise DataError(f"descriptors must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise DataError("descriptors contain non-finite entries")
        values.setflags(write=False)
        self.values = values

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    def save(self, path):
        """Binary layout: magic, n, d as int64 LE, row-major float32 LE."""
        with open(path, "wb") as fh:
            fh.write(_DESC_MAGIC)
            fh.write(struct.pack("<qq", self.n, self.d))
            fh.write(self.values.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(_DESC_MAGIC))
            if magic != _DESC_MAGIC:
                raise DataError(f"not a descriptor cache file: {path}")
            n, d = struct.unpack("<qq", fh.read(16))
            vals = np.frombuffer(fh.read(4 * n * d), dtype="<f4")
            if vals.size != n * d:
                raise DataError(f"truncated descriptor cache: {path}")
        return cls(vals.reshape(n, d))


def default_radius(D):
    """Support radius: 5% of the maximal pairwise geodesic distance."""
    diameter = D.diameter
    if diameter <= 0.0:
        raise DataError("degenerate diameter: distance matrix has no extent")
    return 0.05 * diameter


def _majority_flip(dots):
    """Flip sign so the majority of displacement dots is non-negative.

    Zero dots vote positive, so an exact tie keeps the current sign.
    """
    pos = int((dots >= 0.0).sum())
    neg = dots.size - pos
    return (neg > pos), abs(pos - neg)


def local_reference_frames(mesh, radius, neighbor_lists=None):
    """(frames, quality) for every vertex.

    frames[i] has rows (x, y, z) of the local frame; quality[i] is False for
    degenerate vertices (too few neighbors, rank-deficient covariance needing
    the normal-anchored fallback, or undecided sign votes), whose descriptors
    are less stable under rigid motion.
    """
    v = mesh.vertices
    n = mesh.n_vertices
    normals = mesh.vertex_normals()
    if neighbor_lists is None:
        neighbor_lists = cKDTree(v).query_ball_point(v, radius)
    frames = np.zeros((n, 3, 3))
    quality = np.zeros(n, dtype=bool)
    usable = np.zeros(n, dtype=bool)
    for i in range(n):
        idx = [j for j in neighbor_lists[i] if j != i]
        if len(idx) < 3:
            continue
        rel = v[idx] - v[i]
        dist = np.linalg.norm(rel, axis=1)
        w = radius - dist
        wsum = w.sum()
        if wsum <= 0.0:
            continue
        M = np.einsum("i,ij,ik->jk", w, rel, rel) / wsum
        evals, evecs = np.linalg.eigh(M)
        lam1, lam2 = evals[2], evals[1]
        if lam1 <= 1e-14 * radius * radius:
            continue
        good = True
        if (lam1 - lam2) <= 1e-6 * lam1:
            # in-plane isotropic scatter: anchor z to the surface normal and
            # take the dominant direction orthogonal to it
            z = normals[i]
            if np.linalg.norm(z) == 0.0:
                continue
            proj = rel - np.outer(rel @ z, z)
            M2 = np.einsum("i,ij,ik->jk", w, proj, proj) / wsum
            e2, v2 = np.linalg.eigh(M2)
            if e2[2] - e2[1] <= 1e-6 * max(e2[2], 1e-300):
                continue
            x = v2[:, 2]
            good = False
        else:
            x = evecs[:, 2]
            z = evecs[:, 0]
        flip, margin_x = _majority_flip(rel @ x)
        if flip:
            x = -x
        flip, margin_z = _majority_flip(rel @ z)
        if flip:
            z = -z
        frames[i, 0] = x
        frames[i, 2] = z
        frames[i, 1] = np.cross(z, x)
        usable[i] = True
        quality[i] = good and margin_x > 0 and margin_z > 0
    return frames, quality, usable


def shot_descriptors(mesh, radius, bins=10):
    """SHOT field of width 32 * (bins + 1).

    Degenerate vertices (no usable frame) get an all-zero row; their count
    is logged as a warning.
    """
    if radius <= 0.0:
        raise DataError(f"radius must be positive, got {radius}")
    if bins < 1:
        raise DataError(f"bins must be at least 1, got {bins}")
    v = mesh.vertices
    n = mesh.n_vertices
    normals = mesh.vertex_normals()
    neighbor_lists = cKDTree(v).query_ball_point(v, radius)
    frames, _, usable = local_reference_frames(mesh, radius, neighbor_lists)
    width = 32 * (bins + 1)
    out = np.zeros((n, width))
    half = radius / 2.0
    for i in range(n):
        if not usable[i]:
            continue
        idx = np.array([j for j in neighbor_lists[i] if j != i], dtype=np.int64)
        rel = v[idx] - v[i]
        dist = np.linalg.norm(rel, axis=1)
        keep = dist > 0.0
        idx, rel, dist = idx[keep], rel[keep], dist[keep]
        if idx.size == 0:
            continue
        local = rel @ frames[i].T
        # four soft coordinates; azimuth wraps, the rest clamp at the ends
        az = (np.arctan2(local[:, 1], local[:, 0]) + np.pi) / (2 * np.pi) * 8.0 - 0.5
        ja = np.floor(az)
        fa = az - ja
        a_cells = (np.stack([ja, ja + 1]).astype(np.int64)) % 8
        a_wts = np.stack([1.0 - fa, fa])

        el = (1.0 + local[:, 2] / dist) - 0.5  # [-0.5, 1.5], centers 0.5/1.5
        je = np.floor(el)
        fe = el - je
        e_cells = np.clip(np.stack([je, je + 1]), 0, 1).astype(np.int64)
        e_wts = np.stack([1.0 - fe, fe])

        ra = dist / half - 0.5
        jr = np.floor(ra)
        fr = ra - jr
        r_cells = np.clip(np.stack([jr, jr + 1]), 0, 1).astype(np.int64)
        r_wts = np.stack([1.0 - fr, fr])

        sh = (1.0 + normals[idx] @ frames[i, 2]) / 2.0 * bins
        js = np.floor(sh)
        fs = sh - js
        s_cells = np.clip(np.stack([js, js + 1]), 0, bins).astype(np.int64)
        s_wts = np.stack([1.0 - fs, fs])

        row = out[i]
        for ca, wa in zip(a_cells, a_wts):
            for ce, we in zip(e_cells, e_wts):
                for cr, wr in zip(r_cells, r_wts):
                    base = ((ca * 2 + ce) * 2 + cr) * (bins + 1)
                    for cs, ws in zip(s_cells, s_wts):
                        np.add.at(row, base + cs, wa * we * wr * ws)
        norm = np.linalg.norm(row)
        if norm > 0.0:
            row /= norm
    n_degenerate = int((~usable).sum())
    if n_degenerate:
        logger.warning("%d vertex/vertices with degenerate SHOT neighborhood "
                       "(zero descriptor)", n_degenerate)
    return DescriptorField(out)
