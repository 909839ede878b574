"""Post-processing: point-map extraction from a soft correspondence,
bijective refinement through iterated linear assignment on heat-kernel
scores, and robust upscaling of a low-resolution map to full resolution.

Correspondence file format: a `# corrmap v1 n_X n_Y` header line, then one
`src tgt` pair of 0-based indices per matched source vertex.
"""

import logging

import numpy as np
import scipy.optimize

from .errors import DataError, NumericsError
from .mesh import representatives

logger = logging.getLogger(__name__)

PMF_ITERS = 10
IRLS_ITERS = 20


class PointMap:
    """Vertex-to-vertex map. map[i] is the target index of source vertex i,
    or -1 where unmatched. The bijective flag asserts a full permutation."""

    __slots__ = ("map", "n_y", "bijective")

    def __init__(self, map_, n_y, bijective=False):
        map_ = np.ascontiguousarray(map_, dtype=np.int64)
        if map_.ndim != 1:
            raise DataError(f"point map must be 1-D, got shape {map_.shape}")
        if n_y < 1:
            raise DataError("target size must be positive")
        if map_.size and (map_.min() < -1 or map_.max() >= n_y):
            raise DataError("point map index out of range")
        if bijective:
            if map_.size != n_y or np.unique(map_).size != n_y or \
                    (map_ < 0).any():
                raise DataError("bijective flag requires a permutation")
        map_.setflags(write=False)
        self.map = map_
        self.n_y = int(n_y)
        self.bijective = bool(bijective)

    @property
    def n_x(self):
        return self.map.size

    @property
    def matched(self):
        return np.flatnonzero(self.map >= 0)


def extract_map(soft):
    """Argmax over each column of P; ties go to the lowest index."""
    return PointMap(np.argmax(soft.p, axis=0), soft.p.shape[0])


def save_corr(path, pmap):
    with open(path, "w") as fh:
        fh.write(f"# corrmap v1 {pmap.n_x} {pmap.n_y}\n")
        for src in pmap.matched:
            fh.write(f"{src} {pmap.map[src]}\n")


def load_corr(path):
    with open(path) as fh:
        header = fh.readline().split()
        if header[:3] != ["#", "corrmap", "v1"] or len(header) != 5:
            raise DataError(f"not a corrmap file: {path}")
        try:
            n_x, n_y = int(header[3]), int(header[4])
        except ValueError:
            raise DataError(f"bad corrmap header in {path}")
        map_ = np.full(n_x, -1, dtype=np.int64)
        for lineno, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'src tgt'")
            try:
                src, tgt = int(parts[0]), int(parts[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer index")
            if not 0 <= src < n_x or not 0 <= tgt < n_y:
                raise DataError(f"{path}:{lineno}: index out of range")
            map_[src] = tgt
    return PointMap(map_, n_y)


def lap_solve(score):
    """Permutation maximizing sum_i score[i, perm[i]], exactly."""
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise DataError(f"assignment scores must be square, got {score.shape}")
    if not np.isfinite(score).all():
        raise DataError("assignment scores must be finite")
    rows, cols = scipy.optimize.linear_sum_assignment(score, maximize=True)
    perm = np.empty(score.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def heat_kernel(basis, t):
    """K = Phi diag(exp(-lambda t)) Phi^T diag(areas)."""
    decay = np.exp(-basis.eigenvalues * t)
    return ((basis.phi * decay) @ basis.phi.T) * basis.mass[None, :]


def _time_schedule(basis_x, basis_y, iterations, t_start, t_end, diameter):
    if t_start is None or t_end is None:
        if diameter is not None:
            start, end = diameter ** 2 / 10.0, diameter ** 2 / 1000.0
        else:
            # 1/lambda_1 is a squared-diameter-scale diffusion time
            lam = []
            for b in (basis_x, basis_y):
                pos = b.eigenvalues[b.eigenvalues > 1e-12]
                lam.append(pos[0] if pos.size else 1.0)
            start = 2.0 / (lam[0] + lam[1])
            end = start / 100.0
        t_start = t_start if t_start is not None else start
        t_end = t_end if t_end is not None else end
    if t_start <= 0 or t_end <= 0:
        raise DataError("diffusion times must be positive")
    return np.geomspace(t_start, t_end, iterations)


def _farthest_point_sample(points, m, start=0):
    n = points.shape[0]
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    best = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        best = np.minimum(best, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def _nearest_rows(query, pool):
    """Index into pool of the nearest row for each query row."""
    d2 = (np.sum(query ** 2, axis=1)[:, None]
          + np.sum(pool ** 2, axis=1)[None, :]
          - 2.0 * query @ pool.T)
    return np.argmin(d2, axis=1)


def pmf_refine(initial, basis_x, basis_y, iterations=PMF_ITERS, t_start=None,
               t_end=None, diameter=None):
    """Iterated linear assignment on heat-kernel score matrices.

    Each step maximizes <Pi, K_X Pi_prev K_Y^T> exactly, so the objective is
    non-decreasing at fixed diffusion time; t shrinks geometrically from a
    squared-diameter scale down two decades, sharpening the kernels. Output
    is a permutation whenever the two shapes have equal size; otherwise the
    larger side is farthest-point subsampled and the result re-extended by
    nearest spectral embedding (not bijective).
    """
    if initial.n_x != basis_x.n or initial.n_y != basis_y.n:
        raise DataError("initial map does not match the bases")
    if (initial.map < 0).any():
        raise DataError("refinement needs a total initial map")
    if iterations == 0:
        return initial
    n_x, n_y = basis_x.n, basis_y.n
    if n_x == n_y:
        sel_x = np.arange(n_x)
        sel_y = np.arange(n_y)
        sub_map = initial.map
    elif n_x < n_y:
        sel_x = np.arange(n_x)
        sel_y = _farthest_point_sample(basis_y.phi, n_x)
        # snap initial targets onto the kept subset
        sub_map = _nearest_rows(basis_y.phi[initial.map], basis_y.phi[sel_y])
    else:
        sel_x = _farthest_point_sample(basis_x.phi, n_y)
        sel_y = np.arange(n_y)
        sub_map = initial.map[sel_x]
    kx = basis_x.phi[sel_x]
    ky = basis_y.phi[sel_y]
    mass_x = basis_x.mass[sel_x]
    mass_y = basis_y.mass[sel_y]
    perm = np.asarray(sub_map, dtype=np.int64)
    # an argmax-extracted start may repeat targets; such a map is infeasible
    # for the assignment polytope, so its score does not bound the first
    # LAP optimum from below
    feasible = np.unique(perm).size == perm.size
    for t in _time_schedule(basis_x, basis_y, iterations, t_start, t_end,
                            diameter):
        K_x = ((kx * np.exp(-basis_x.eigenvalues * t)) @ kx.T) * mass_x[None, :]
        K_y = ((ky * np.exp(-basis_y.eigenvalues * t)) @ ky.T) * mass_y[None, :]
        score = K_x @ K_y[:, perm].T
        new_perm = lap_solve(score)
        idx = np.arange(perm.size)
        before = float(score[idx, perm].sum())
        after = float(score[idx, new_perm].sum())
        if feasible and after < before - 1e-8 * max(1.0, abs(before)):
            raise NumericsError("assignment decreased the PMF objective")
        perm = new_perm
        feasible = True
    if n_x == n_y:
        return PointMap(perm, n_y, bijective=True)
    if n_x < n_y:
        return PointMap(sel_y[perm], n_y)
    full = np.empty(n_x, dtype=np.int64)
    full[sel_x] = sel_y[perm]
    rest = np.setdiff1d(np.arange(n_x), sel_x, assume_unique=False)
    if rest.size:
        anchor = _nearest_rows(basis_x.phi[rest], basis_x.phi[sel_x])
        full[rest] = full[sel_x[anchor]]
    return PointMap(full, n_y)


def upscale(low_map, vertex_map_x, vertex_map_y, basis_x, basis_y,
            irls_iters=IRLS_ITERS, delta=None):
    """Full-resolution functional map from low-resolution matches.

    Constraint columns are spectral coefficients of delta functions at
    matched full-resolution points (rows of the full bases). The fit
    minimizes the sum of column norms of C F - G (an L2,1 objective) by
    iteratively reweighted least squares, which caps the influence of any
    single bad match.
    """
    matched = low_map.matched
    if matched.size == 0:
        raise DataError("empty constraint set")
    reps_x = np.arange(basis_x.n) if vertex_map_x is None else \
        representatives(vertex_map_x, low_map.n_x)
    reps_y = np.arange(basis_y.n) if vertex_map_y is None else \
        representatives(vertex_map_y, low_map.n_y)
    f_up = basis_x.phi[reps_x[matched]].T                 # k_X x m
    g_up = basis_y.phi[reps_y[low_map.map[matched]]].T    # k_Y x m
    if delta is None:
        delta = 1e-6 * np.linalg.norm(g_up)
    if delta <= 0:
        raise DataError("delta must be positive")
    k = basis_x.k
    weights = np.ones(matched.size)
    C = None
    prev_obj = np.inf
    for _ in range(irls_iters):
        fw = f_up * weights[None, :]
        S = fw @ f_up.T
        S += (1e-10 * np.trace(S) / k + 1e-300) * np.eye(k)
        C = np.linalg.solve(S, fw @ g_up.T).T
        res = C @ f_up - g_up
        col = np.linalg.norm(res, axis=0)
        # Huber value majorized by the current weights
        obj = float(np.sum(np.where(col >= delta, col,
                                    (col ** 2 + delta ** 2) / (2 * delta))))
        if np.isfinite(prev_obj):
            if obj > prev_obj + 1e-8 * max(1.0, prev_obj):
                raise NumericsError("reweighted fit increased its objective")
            if prev_obj - obj <= 1e-10 * max(1.0, prev_obj):
                return C
        prev_obj = obj
        weights = 1.0 / np.maximum(col, delta)
    logger.warning("upscale: IRLS did not converge in %d iterations",
                   irls_iters)
    return C
