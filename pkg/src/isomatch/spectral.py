"""Cotangent Laplace-Beltrami discretization and truncated eigenbases.

The stiffness matrix W uses the classic cotangent weights
w_ij = -(cot a_ij + cot b_ij) / 2 (one cotangent on boundary edges) with
w_ii = -sum_j w_ij, and the mass matrix is the lumped (diagonal) one built
from vertex areas. Bases solve the generalized problem W phi = lambda A phi
and are A-orthonormal with ascending eigenvalues.
"""

import struct

import numpy as np
import scipy.linalg
import scipy.sparse as sparse
import scipy.sparse.linalg as sla

from .errors import DataError, NumericsError

# cot values clamped to survive near-degenerate triangles
_COT_CLAMP = 1e4

_BASIS_MAGIC = b"ISOBAS01"


def cotan_laplacian(mesh):
    """Cotangent stiffness matrix and lumped mass vector.

    Returns (W, mass) with W an n x n sparse CSR symmetric PSD matrix whose
    rows sum to zero, and mass the vertex areas.
    """
    v, f = mesh.vertices, mesh.faces
    n = mesh.n_vertices
    rows, cols, vals = [], [], []
    # angle at corner c faces the edge (a, b)
    for c, a, b in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        u = v[f[:, a]] - v[f[:, c]]
        w = v[f[:, b]] - v[f[:, c]]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        cot = np.einsum("ij,ij->i", u, w) / np.maximum(cross, 1e-300)
        cot = np.clip(cot, -_COT_CLAMP, _COT_CLAMP)
        half = -0.5 * cot
        rows.extend([f[:, a], f[:, b]])
        cols.extend([f[:, b], f[:, a]])
        vals.extend([half, half])
    W = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    W = W - sparse.diags(np.asarray(W.sum(axis=1)).ravel())
    return W.tocsr(), mesh.vertex_areas.copy()


class SpectralBasis:
    """Truncated A-orthonormal Laplace-Beltrami eigenbasis.

    Attributes
    ----------
    phi : (n, k) float64, eigenfunctions in columns
    eigenvalues : (k,) float64, ascending, eigenvalues[0] ~ 0 on a
        connected closed mesh
    mass : (n,) float64, lumped vertex areas
    """

    __slots__ = ("phi", "eigenvalues", "mass")

    def __init__(self, phi, eigenvalues, mass):
        phi = np.ascontiguousarray(phi, dtype=np.float64)
        eigenvalues = np.ascontiguousarray(eigenvalues, dtype=np.float64)
        mass = np.ascontiguousarray(mass, dtype=np.float64)
        if phi.shape != (mass.size, eigenvalues.size):
            raise DataError(
                f"basis shape mismatch: phi {phi.shape}, k={eigenvalues.size}, "
                f"n={mass.size}")
        for arr in (phi, eigenvalues, mass):
            arr.setflags(write=False)
        self.phi = phi
        self.eigenvalues = eigenvalues
        self.mass = mass

    @property
    def n(self):
        return self.phi.shape[0]

    @property
    def k(self):
        return self.phi.shape[1]

    def save(self, path):
        """Binary layout: magic, n, k as int64 LE, then row-major phi,
        eigenvalues, mass as float64 LE."""
        with open(path, "wb") as fh:
            fh.write(_BASIS_MAGIC)
            fh.write(struct.pack("<qq", self.n, self.k))
            fh.write(self.phi.astype("<f8").tobytes())
            fh.write(self.eigenvalues.astype("<f8").tobytes())
            fh.write(self.mass.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(_BASIS_MAGIC))
            if magic != _BASIS_MAGIC:
                raise DataError(f"not a basis cache file: {path}")
            n, k = struct.unpack("<qq", fh.read(16))
            phi = np.frombuffer(fh.read(8 * n * k), dtype="<f8").reshape(n, k)
            ev = np.frombuffer(fh.read(8 * k), dtype="<f8")
            mass = np.frombuffer(fh.read(8 * n), dtype="<f8")
            if mass.size != n:
                raise DataError(f"truncated basis cache: {path}")
        return cls(phi, ev, mass)


def _canonicalize_signs(phi):
    """Flip each column so its largest-magnitude entry is positive.

    np.argmax resolves magnitude ties by lowest index, which makes the
    canonicalization deterministic.
    """
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def eig_basis(stiffness, mass, k):
    """k smallest generalized eigenpairs of W phi = lambda A phi.

    Shift-invert Lanczos on the sparse problem; dense solve for small n
    (n <= 600) or k close to n. Eigenvectors are A-orthonormalized and
    sign-canonicalized; eigenvalues clipped at zero from below.
    """
    n = mass.size
    if not (1 <= k <= n):
        raise DataError(f"need 1 <= k <= n, got k={k}, n={n}")
    A = sparse.diags(mass)
    if n <= 600 or k > n - 2:
        Wd = stiffness.toarray() if sparse.issparse(stiffness) else np.asarray(stiffness)
        # symmetrize to guard against round-off asymmetry
        Wd = 0.5 * (Wd + Wd.T)
        vals, vecs = scipy.linalg.eigh(Wd, np.diag(mass))
        vals, vecs = vals[:k], vecs[:, :k]
    else:
        # fixed start vector keeps the Lanczos iteration off the global RNG,
        # so identical meshes give bitwise-identical bases across processes
        v0 = np.random.default_rng(0).standard_normal(n)
        try:
            vals, vecs = sla.eigsh(stiffness, k=k, M=A, sigma=-0.01,
                                   which="LM", v0=v0)
        except Exception as exc:
            raise NumericsError(f"eigensolver failed: {exc}") from exc
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    resid = stiffness @ vecs - (mass[:, None] * vecs) * vals
    scale = np.linalg.norm(mass[:, None] * vecs, axis=0)
    rel = np.linalg.norm(resid, axis=0) / np.maximum(scale, 1e-300)
    if (rel > 1e-6).any():
        raise NumericsError(
            f"eigensolver residuals too large: max {rel.max():.3e} "
            f"(worst index {int(np.argmax(rel))})")
    # exact A-orthonormalization; eigsh output is close but we tighten it
    vecs /= np.sqrt(np.einsum("ij,i,ij->j", vecs, mass, vecs))
    vals = np.maximum(vals, 0.0)
    return SpectralBasis(_canonicalize_signs(vecs), vals, mass)


def compute_basis(mesh, k):
    W, mass = cotan_laplacian(mesh)
    return eig_basis(W, mass, k)


def project(basis, field):
    """Spectral coefficients of a vertex function: phi^T A field."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape[0] != basis.n:
        raise DataError(f"field has {field.shape[0]} rows, mesh has {basis.n}")
    return basis.phi.T @ (basis.mass[:, None] * field if field.ndim == 2
                          else basis.mass * field)


def reconstruct(basis, coeffs):
    """Synthesis: phi @ coeffs."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape[0] != basis.k:
        raise DataError(f"coeffs have {coeffs.shape[0]} rows, basis has k={basis.k}")
    return basis.phi @ coeffs
