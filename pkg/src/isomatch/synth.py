"""Procedurally generated shapes for tests and demos: icospheres, planar
grids, and an asymmetric closed figure with near-isometric bend/twist poses.

Pose generators keep vertex ids fixed, so ground truth between two poses of
the same figure is the identity map.
"""

import numpy as np

from .mesh import TriMesh


def icosphere(subdivisions=2, radius=1.0):
    """Subdivided icosahedron projected onto a sphere.

    Vertex count is 10 * 4**subdivisions + 2.
    """
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return TriMesh(v * radius, f)


def _subdivide(v, f):
    """Loop-style 1-to-4 topological subdivision with midpoint vertices."""
    edges = np.vstack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges.sort(axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    mid_id = len(v) + inverse.reshape(3, -1)  # rows: edge 01, 12, 20 per face
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    m01, m12, m20 = mid_id[0], mid_id[1], mid_id[2]
    nf = np.vstack([
        np.column_stack([a, m01, m20]),
        np.column_stack([b, m12, m01]),
        np.column_stack([c, m20, m12]),
        np.column_stack([m01, m12, m20]),
    ])
    return np.vstack([v, mid]), nf


def grid_mesh(nx=50, ny=50, lx=1.0, ly=1.0):
    """Planar rectangular grid in the z=0 plane with alternating diagonals.

    Vertex (ix, iy) has index iy * nx + ix and position
    (ix * lx / (nx-1), iy * ly / (ny-1), 0). Alternating the diagonal
    direction per cell avoids a directional bias in geodesic tests.
    """
    if nx < 2 or ny < 2:
        raise ValueError("grid needs at least 2 vertices per side")
    xs = np.linspace(0.0, lx, nx)
    ys = np.linspace(0.0, ly, ny)
    gx, gy = np.meshgrid(xs, ys)  # shape (ny, nx)
    v = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(nx * ny)])
    faces = []
    for iy in range(ny - 1):
        for ix in range(nx - 1):
            p00 = iy * nx + ix
            p10 = p00 + 1
            p01 = p00 + nx
            p11 = p01 + 1
            if (ix + iy) % 2 == 0:
                faces.append([p00, p10, p11])
                faces.append([p00, p11, p01])
            else:
                faces.append([p00, p10, p01])
                faces.append([p10, p11, p01])
    return TriMesh(v, np.array(faces, dtype=np.int64))


def bumpy_figure(subdivisions=3):
    """Asymmetric star-shaped closed surface built from an icosphere.

    The radius is modulated by a handful of fixed low-frequency terms chosen
    to kill every rotational and mirror symmetry, then the shape is stretched
    along z. Intrinsic geometry is rich enough that geodesic distance
    matrices distinguish all vertices.
    """
    base = icosphere(subdivisions, radius=1.0)
    u = base.vertices
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    theta = np.arctan2(y, x)
    r = (1.0
         + 0.22 * np.sin(2.0 * theta + 1.1) * (1.0 - z ** 2)
         + 0.16 * np.cos(theta - 0.7) * z
         + 0.11 * np.sin(3.0 * theta + 0.3) * (z ** 2 - 0.4)
         + 0.08 * np.cos(2.3 * z + 0.9))
    v = u * r[:, None]
    v[:, 2] *= 1.45
    return TriMesh(v, base.faces)


def posed_figure(mesh, bend=0.0, twist=0.0, rigid_seed=None):
    """Near-isometric pose of a figure: twist about z, bend about y, then an
    optional random rigid motion.

    bend is the curvature of the deformed axis (0 keeps it straight); twist
    is radians of rotation per unit height. Both leave vertex ids unchanged.
    """
    v = mesh.vertices.copy()
    if twist != 0.0:
        ang = twist * v[:, 2]
        c, s = np.cos(ang), np.sin(ang)
        x, y = v[:, 0].copy(), v[:, 1].copy()
        v[:, 0] = c * x - s * y
        v[:, 1] = s * x + c * y
    if bend != 0.0:
        rho = 1.0 / bend
        ang = bend * v[:, 2]
        x, z = v[:, 0].copy(), None
        v[:, 0] = rho - (rho - x) * np.cos(ang)
        v[:, 2] = (rho - x) * np.sin(ang)
    if rigid_seed is not None:
        rng = np.random.default_rng(rigid_seed)
        R = random_rotation(rng)
        v = v @ R.T + rng.uniform(-1.0, 1.0, 3)
    return TriMesh(v, mesh.faces)


def random_rotation(rng):
    """Uniform random rotation matrix (QR of a Gaussian, det fixed to +1)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
