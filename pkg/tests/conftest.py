"""Shared fixtures and helpers: lightweight shape bundles and parameter
flattening for finite-difference checks."""

from types import SimpleNamespace

import numpy as np

from isomatch.geodesic import distance_matrix
from isomatch.shot import DescriptorField
from isomatch.spectral import compute_basis


def make_bundle(mesh, k, d=None, seed=0, desc=None):
    """Bundle with the attributes the pipeline consumes (basis, distances,
    shot). Descriptors default to a seeded Gaussian field, which keeps the
    coefficient matrices full-rank regardless of mesh quality."""
    if desc is None:
        rng = np.random.default_rng(seed)
        desc = rng.standard_normal((mesh.n_vertices, d))
    return SimpleNamespace(
        mesh=mesh,
        basis=compute_basis(mesh, k),
        distances=distance_matrix(mesh),
        shot=DescriptorField(desc),
    )


def param_vector(params):
    parts = [w.ravel() for w in params.weights]
    parts += [b.ravel() for b in params.biases]
    return np.concatenate(parts)


def grad_vector(grads):
    grad_w, grad_b = grads
    parts = [g.ravel() for g in grad_w] + [g.ravel() for g in grad_b]
    return np.concatenate(parts)


def shift_params(params, vec, scale):
    """New NetParams moved by scale * vec along the flattened direction."""
    out = params.astype(params.dtype)
    pos = 0
    for w in out.weights:
        w += scale * vec[pos:pos + w.size].reshape(w.shape)
        pos += w.size
    for b in out.biases:
        b += scale * vec[pos:pos + b.size].reshape(b.shape)
        pos += b.size
    assert pos == vec.size
    return out
