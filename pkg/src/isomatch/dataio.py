"""Preprocessing orchestration and on-disk caching.

A ShapeBundle holds everything the pipeline needs for one shape: the
(possibly remeshed) mesh, spectral basis, geodesic matrix, descriptors, and
the original-to-remeshed vertex map. Bundles are cached under a content hash
of the source file plus all preprocessing parameters, one directory per
hash, written atomically (temp file then rename).

Ground truth uses shared template indexing: a gt file maps a shape's
original vertices to template ids, either as the shorthand `identity n` or
explicit `src tgt` lines. On load it is composed through the remeshing
vertex map, so shapes remeshed independently stay comparable.
"""

import collections
import hashlib
import json
import logging
import os

import numpy as np

from .errors import DataError, IsomatchError
from .geodesic import GeodesicMatrix, distance_matrix
from .mesh import TriMesh, load_mesh, representatives, simplify
from .refine import PointMap
from .shot import DescriptorField, shot_descriptors
from .spectral import SpectralBasis, compute_basis

logger = logging.getLogger(__name__)

# bumped whenever any cached binary layout changes
_CACHE_VERSION = 1

# computed-stage counters; cache hits leave them untouched
STAGE_COUNTERS = collections.Counter()


class PreprocessParams:
    __slots__ = ("target_n", "k", "shot_bins", "shot_radius_fraction")

    def __init__(self, target_n=None, k=120, shot_bins=10,
                 shot_radius_fraction=0.05):
        if target_n is not None and target_n < 3:
            raise DataError("target_n must be at least 3")
        if k < 1:
            raise DataError("k must be at least 1")
        if shot_bins < 1:
            raise DataError("shot_bins must be at least 1")
        if shot_radius_fraction <= 0:
            raise DataError("shot_radius_fraction must be positive")
        self.target_n = target_n
        self.k = int(k)
        self.shot_bins = int(shot_bins)
        self.shot_radius_fraction = float(shot_radius_fraction)

    def describe(self):
        return (f"v{_CACHE_VERSION} target_n={self.target_n} k={self.k} "
                f"bins={self.shot_bins} radius={self.shot_radius_fraction!r}")


class ShapeBundle:
    """All per-shape quantities, indexed consistently by remeshed vertex."""

    __slots__ = ("mesh", "basis", "distances", "shot", "vertex_map",
                 "source_path", "content_hash", "gt", "tmpl_to_vertex")

    def __init__(self, mesh, basis, distances, shot, vertex_map, source_path,
                 content_hash, gt=None, tmpl_to_vertex=None):
        n = mesh.n_vertices
        if basis.n != n or distances.n != n or shot.n != n:
            raise DataError(
                f"bundle components disagree on size: mesh {n}, basis "
                f"{basis.n}, distances {distances.n}, shot {shot.n}")
        vertex_map = np.ascontiguousarray(vertex_map, dtype=np.int64)
        if vertex_map.min() < 0 or vertex_map.max() >= n:
            raise DataError("vertex_map points outside the remeshed mesh")
        self.mesh = mesh
        self.basis = basis
        self.distances = distances
        self.shot = shot
        self.vertex_map = vertex_map
        self.source_path = source_path
        self.content_hash = content_hash
        self.gt = gt
        self.tmpl_to_vertex = tmpl_to_vertex

    @property
    def n(self):
        return self.mesh.n_vertices


def content_hash(mesh_path, params):
    if not os.path.isfile(mesh_path):
        raise DataError(f"no such mesh file: {mesh_path}")
    h = hashlib.sha256()
    with open(mesh_path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    h.update(params.describe().encode())
    return h.hexdigest()


def _atomic_write(path, writer):
    tmp = path + ".tmp"
    writer(tmp)
    os.replace(tmp, path)


def _save_bundle(bundle, cache_dir):
    out = os.path.join(cache_dir, bundle.content_hash)
    os.makedirs(out, exist_ok=True)
    def write_geom(p):
        with open(p, "wb") as fh:  # explicit handle keeps the temp name
            np.savez(fh, vertices=bundle.mesh.vertices,
                     faces=bundle.mesh.faces, vertex_map=bundle.vertex_map)

    _atomic_write(os.path.join(out, "geom.npz"), write_geom)
    _atomic_write(os.path.join(out, "basis.bin"),
                  lambda p: bundle.basis.save(p))
    _atomic_write(os.path.join(out, "dist.bin"),
                  lambda p: bundle.distances.save(p))
    _atomic_write(os.path.join(out, "shot.bin"),
                  lambda p: bundle.shot.save(p))
    meta = {"source_path": os.path.abspath(bundle.source_path),
            "content_hash": bundle.content_hash,
            "n": bundle.n}

    def write_meta(p):
        with open(p, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    # meta goes last: its presence marks the entry complete
    _atomic_write(os.path.join(out, "meta.json"), write_meta)


def _load_bundle(cache_dir, hash_, source_path):
    entry = os.path.join(cache_dir, hash_)
    if not os.path.exists(os.path.join(entry, "meta.json")):
        return None
    try:
        geom = np.load(os.path.join(entry, "geom.npz"))
        mesh = TriMesh(geom["vertices"], geom["faces"])
        return ShapeBundle(
            mesh,
            SpectralBasis.load(os.path.join(entry, "basis.bin")),
            GeodesicMatrix.load(os.path.join(entry, "dist.bin")),
            DescriptorField.load(os.path.join(entry, "shot.bin")),
            geom["vertex_map"], source_path, hash_)
    except (OSError, DataError, KeyError) as exc:
        logger.warning("discarding unreadable cache entry %s: %s", entry, exc)
        return None


def _stage(name, fn):
    STAGE_COUNTERS[name] += 1
    try:
        return fn()
    except IsomatchError as exc:
        raise type(exc)(f"preprocess stage '{name}': {exc}") from exc
    except Exception as exc:
        raise DataError(f"preprocess stage '{name}': {exc}") from exc


def preprocess(mesh_path, params=None, cache_dir=None):
    """simplify -> spectral basis -> geodesic matrix -> descriptors.

    The SHOT radius is params.shot_radius_fraction of the geodesic diameter.
    With cache_dir set, a completed bundle is served from disk and no stage
    recomputes.
    """
    params = params or PreprocessParams()
    hash_ = content_hash(mesh_path, params)
    if cache_dir is not None:
        cached = _load_bundle(cache_dir, hash_, mesh_path)
        if cached is not None:
            return cached
    mesh = _stage("load", lambda: load_mesh(mesh_path))
    if params.target_n is not None and params.target_n < mesh.n_vertices:
        mesh, vertex_map = _stage(
            "simplify", lambda: simplify(mesh, params.target_n))
    else:
        vertex_map = np.arange(mesh.n_vertices)
    basis = _stage("basis", lambda: compute_basis(mesh, params.k))
    distances = _stage("distances", lambda: distance_matrix(mesh))
    radius = params.shot_radius_fraction * distances.diameter
    if radius <= 0:
        raise DataError("degenerate geodesic diameter, cannot size "
                        "descriptor neighborhoods")
    shot = _stage("shot", lambda: shot_descriptors(
        mesh, radius, bins=params.shot_bins))
    bundle = ShapeBundle(mesh, basis, distances, shot, vertex_map,
                         mesh_path, hash_)
    if cache_dir is not None:
        _save_bundle(bundle, cache_dir)
    return bundle


def load_ground_truth(path, n_x=None, n_y=None):
    """Original-resolution ground truth as a PointMap.

    `identity n` declares the identity on n vertices. Otherwise each line is
    `src tgt`; sources not listed stay unmatched. Provided sizes are
    enforced, otherwise inferred from the largest index seen.
    """
    with open(path) as fh:
        lines = fh.readlines()
    body = [(no, ln.split()) for no, ln in enumerate(lines, start=1)
            if ln.strip() and not ln.lstrip().startswith("#")]
    if not body:
        raise DataError(f"{path}: empty ground-truth file")
    first_no, first = body[0]
    if first[0] == "identity":
        if len(first) != 2 or len(body) != 1:
            raise DataError(f"{path}:{first_no}: malformed identity line")
        try:
            n = int(first[1])
        except ValueError:
            raise DataError(f"{path}:{first_no}: malformed identity line")
        if n < 1:
            raise DataError(f"{path}:{first_no}: identity needs n >= 1")
        return PointMap(np.arange(n), n)
    pairs = []
    for no, parts in body:
        if len(parts) != 2:
            raise DataError(f"{path}:{no}: expected 'src tgt'")
        try:
            src, tgt = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"{path}:{no}: non-integer index")
        if src < 0 or tgt < 0:
            raise DataError(f"{path}:{no}: negative index")
        if n_x is not None and src >= n_x:
            raise DataError(f"{path}:{no}: source index {src} >= {n_x}")
        if n_y is not None and tgt >= n_y:
            raise DataError(f"{path}:{no}: target index {tgt} >= {n_y}")
        pairs.append((src, tgt))
    size_x = n_x if n_x is not None else max(s for s, _ in pairs) + 1
    size_y = n_y if n_y is not None else max(t for _, t in pairs) + 1
    map_ = np.full(size_x, -1, dtype=np.int64)
    for src, tgt in pairs:
        map_[src] = tgt
    return PointMap(map_, size_y)


def attach_ground_truth(bundle, gt):
    """Compose original-resolution ground truth through the remeshing map.

    Sets bundle.gt (template label of each remeshed vertex, via its lowest
    surviving representative) and bundle.tmpl_to_vertex (remeshed vertex
    absorbing each template id, -1 where the template is unmatched).
    """
    if gt.n_x != bundle.vertex_map.size:
        raise DataError(
            f"ground truth covers {gt.n_x} vertices, source mesh has "
            f"{bundle.vertex_map.size}")
    reps = representatives(bundle.vertex_map, bundle.n)
    bundle.gt = gt.map[reps]
    tmpl_to_vertex = np.full(gt.n_y, -1, dtype=np.int64)
    for orig in range(gt.n_x - 1, -1, -1):
        t = gt.map[orig]
        if t >= 0:
            tmpl_to_vertex[t] = bundle.vertex_map[orig]
    bundle.tmpl_to_vertex = tmpl_to_vertex
    return bundle


def read_manifest(path):
    """Lines of `mesh_path [gt_path]`, resolved relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}")
    for no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) > 2:
            raise DataError(f"{path}:{no}: expected 'mesh_path [gt_path]'")
        mesh_path = os.path.join(base, parts[0])
        gt_path = os.path.join(base, parts[1]) if len(parts) == 2 else None
        entries.append((mesh_path, gt_path))
    if not entries:
        raise DataError(f"{path}: empty manifest")
    return entries


def load_dataset(manifest_path, params=None, cache_dir=None):
    """Preprocess every manifest entry and attach ground truth."""
    bundles = []
    for mesh_path, gt_path in read_manifest(manifest_path):
        bundle = preprocess(mesh_path, params, cache_dir)
        if gt_path is not None:
            gt = load_ground_truth(gt_path, n_x=bundle.vertex_map.size)
            attach_ground_truth(bundle, gt)
        bundles.append(bundle)
    return bundles
