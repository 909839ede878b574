"""Exception types shared across the package."""


class IsomatchError(Exception):
    """Base class for all package errors."""


class MeshError(IsomatchError):
    """Invalid mesh data: parse failures, degenerate faces, bad indices."""


class DataError(IsomatchError):
    """Invalid input data outside the mesh itself: manifests, ground truth,
    caches, mismatched shapes between pipeline stages."""


class NumericsError(IsomatchError):
    """Numerical failure: eigensolver non-convergence, singular systems,
    non-finite losses or gradients."""
