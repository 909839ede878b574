"""Differentiable core: functional-map solve, soft correspondence, and the
supervised / unsupervised geodesic-distortion losses, with exact hand-written
gradients end to end.

Conventions. Descriptor coefficient matrices are k x c (one column per
descriptor channel). The functional map C is k_Y x k_X and satisfies
C F_hat ~ G_hat in the ridge-regularized least-squares sense. The soft
correspondence P is n_Y x n_X with unit-L2 columns, so Q = P o P is
column-stochastic: column i of Q is a probability distribution over target
vertices for source vertex i.
"""

import numpy as np
import scipy.linalg

from .errors import DataError, NumericsError
from . import net as netmod
from .spectral import project

# adaptive ridge: ridge = RIDGE_SCALE * trace(F_hat F_hat^T) / k
RIDGE_SCALE = 1e-3


class SoftCorrespondence:
    """Column-normalized soft map P and its element-wise square Q."""

    __slots__ = ("p", "q")

    def __init__(self, p):
        p = np.asarray(p)
        if p.ndim != 2:
            raise DataError(f"soft map must be 2-D, got shape {p.shape}")
        if (p < 0).any():
            raise DataError("soft map entries must be non-negative")
        norms = np.linalg.norm(p.astype(np.float64), axis=0)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise DataError("soft map columns must have unit L2 norm")
        self.p = p
        self.q = p * p

    @property
    def shape(self):
        return self.p.shape


def adaptive_ridge(f_hat, scale=RIDGE_SCALE):
    k = f_hat.shape[0]
    return scale * float(np.sum(f_hat * f_hat)) / k


def solve_fm(f_hat, g_hat, ridge, with_cache=False):
    """C = argmin ||C F_hat - G_hat||_F^2 + ridge ||C||_F^2.

    Solved through the normal equations C = G F^T (F F^T + ridge I)^{-1}
    with a Cholesky factorization of the SPD system.
    """
    f_hat = np.asarray(f_hat)
    g_hat = np.asarray(g_hat)
    if f_hat.ndim != 2 or g_hat.ndim != 2 or f_hat.shape[1] != g_hat.shape[1]:
        raise DataError(
            f"coefficient shapes incompatible: {f_hat.shape} vs {g_hat.shape}")
    if ridge < 0:
        raise DataError("ridge must be non-negative")
    k = f_hat.shape[0]
    S = f_hat @ f_hat.T + ridge * np.eye(k, dtype=f_hat.dtype)
    try:
        factor = scipy.linalg.cho_factor(S)
    except scipy.linalg.LinAlgError as exc:
        raise NumericsError(
            "normal equations singular; pass ridge > 0 to regularize") from exc
    C = scipy.linalg.cho_solve(factor, f_hat @ g_hat.T).T
    if with_cache:
        return C, (f_hat, g_hat, C, factor)
    return C


def solve_fm_backward(cache, grad_c):
    """Adjoint of solve_fm: gradients w.r.t. f_hat, g_hat, and the ridge.

    With S = F F^T + ridge I and R = grad_c S^{-1}:
      grad_G = R F
      grad_F = R^T (G - C F) - C^T (R F)
      grad_ridge = -sum(R o C)
    """
    if cache is None:
        raise DataError("missing solve_fm cache")
    f_hat, g_hat, C, factor = cache
    R = scipy.linalg.cho_solve(factor, np.asarray(grad_c).T).T
    RF = R @ f_hat
    grad_g = RF
    grad_f = R.T @ (g_hat - C @ f_hat) - C.T @ RF
    grad_ridge = -float(np.sum(R * C))
    return grad_f, grad_g, grad_ridge


def soft_corr(C, basis_x, basis_y, with_cache=False):
    """P = column-L2-normalized |Psi C Phi^T A|, Q = P o P.

    The area weights A sit on the X side only, normalizing the delta-function
    coefficients of source vertices.
    """
    C = np.asarray(C)
    if C.shape != (basis_y.k, basis_x.k):
        raise DataError(
            f"C has shape {C.shape}, bases give ({basis_y.k}, {basis_x.k})")
    phi_a = basis_x.mass[:, None] * basis_x.phi  # n_X x k_X
    Z = (basis_y.phi @ C) @ phi_a.T
    norms = np.linalg.norm(Z, axis=0)
    if (norms == 0).any():
        raise NumericsError("degenerate soft map column (all-zero)")
    P = np.abs(Z) / norms
    soft = SoftCorrespondence(P)
    if with_cache:
        return soft, (Z, P, norms, basis_x, basis_y)
    return soft


def soft_corr_backward(cache, grad_p):
    """Adjoint of soft_corr onto C.

    Per column: normalize-backward then the absolute-value subgradient
    (0 at exact zeros), then the bilinear map back to C.
    """
    if cache is None:
        raise DataError("missing soft_corr cache")
    Z, P, norms, basis_x, basis_y = cache
    grad_p = np.asarray(grad_p)
    inner = np.sum(P * grad_p, axis=0)
    grad_abs = (grad_p - P * inner) / norms
    grad_z = grad_abs * np.sign(Z)
    phi_a = basis_x.mass[:, None] * basis_x.phi
    return (basis_y.phi.T @ grad_z) @ phi_a


def unsup_loss(soft, d_x, d_y):
    """Geodesic distortion without labels:
    loss = ||D_X - Q^T D_Y Q||_F^2 / n_X^2, with gradient on P.

    Accumulation runs in 64-bit regardless of the soft map's dtype; the
    intermediate T = Q^T D_Y is reused for the gradient (D_Y Q = T^T).
    """
    Q = soft.q.astype(np.float64, copy=False)
    DX = _dist_array(d_x, Q.shape[1])
    DY = _dist_array(d_y, Q.shape[0])
    n_x = Q.shape[1]
    T = Q.T @ DY
    E = DX - T @ Q
    loss = float(np.sum(E * E)) / (n_x * n_x)
    grad_q = (-2.0 / (n_x * n_x)) * (T.T @ (E + E.T))
    grad_p = grad_q * (2.0 * soft.p.astype(np.float64, copy=False))
    return loss, grad_p


def sup_loss(soft, d_y, gt):
    """Labeled loss: ||P o (D_Y Pi*)||_F^2 / n_X, gradient on P.

    gt[i] is the ground-truth target index of source vertex i; column i of
    D_Y Pi* is then D_Y[:, gt[i]]. Used for monitoring in unsupervised runs.
    """
    P = soft.p.astype(np.float64, copy=False)
    n_y, n_x = P.shape
    gt = np.asarray(gt, dtype=np.int64)
    if gt.shape != (n_x,):
        raise DataError(f"ground truth has shape {gt.shape}, expected ({n_x},)")
    if gt.min() < 0 or gt.max() >= n_y:
        raise DataError("ground-truth index out of range")
    DY = _dist_array(d_y, n_y)
    Dg2 = DY[:, gt] ** 2
    loss = float(np.sum(P * P * Dg2)) / n_x
    grad_p = (2.0 / n_x) * P * Dg2
    return loss, grad_p


def _dist_array(d, expect_n):
    arr = d.d if hasattr(d, "d") else np.asarray(d)
    if arr.shape != (expect_n, expect_n):
        raise DataError(
            f"distance matrix shape {arr.shape} does not match n={expect_n}")
    return arr.astype(np.float64, copy=False)


class PipelineState:
    """Forward activations of one pair, kept for the backward pass."""

    __slots__ = ("bundle_x", "bundle_y", "cache_x", "cache_y", "f_hat",
                 "g_hat", "ridge", "ridge_scale", "cache_fm", "cache_corr",
                 "C", "soft")

    def __init__(self, **kw):
        for name in self.__slots__:
            setattr(self, name, kw[name])


def pipeline_forward(params, bundle_x, bundle_y, ridge_scale=RIDGE_SCALE):
    """Siamese forward: shared net on both SHOT fields, full-resolution
    spectral projection, FM solve with the adaptive ridge, soft map."""
    sx = bundle_x.shot.values.astype(params.dtype)
    sy = bundle_y.shot.values.astype(params.dtype)
    F, cache_x = netmod.forward(params, sx, with_cache=True)
    G, cache_y = netmod.forward(params, sy, with_cache=True)
    f_hat = project(bundle_x.basis, F).astype(params.dtype)
    g_hat = project(bundle_y.basis, G).astype(params.dtype)
    ridge = adaptive_ridge(f_hat, ridge_scale)
    C, cache_fm = solve_fm(f_hat, g_hat, ridge, with_cache=True)
    soft, cache_corr = soft_corr(C, bundle_x.basis, bundle_y.basis,
                                 with_cache=True)
    return PipelineState(
        bundle_x=bundle_x, bundle_y=bundle_y, cache_x=cache_x, cache_y=cache_y,
        f_hat=f_hat, g_hat=g_hat, ridge=ridge, ridge_scale=ridge_scale,
        cache_fm=cache_fm, cache_corr=cache_corr, C=C, soft=soft)


def pipeline_backward(params, state, grad_p):
    """Pull a gradient on P back to shared network parameters."""
    grad_c = soft_corr_backward(state.cache_corr, grad_p)
    grad_f, grad_g, grad_ridge = solve_fm_backward(state.cache_fm, grad_c)
    # the adaptive ridge depends on f_hat; chain its derivative through
    k = state.f_hat.shape[0]
    grad_f = grad_f + grad_ridge * state.ridge_scale * (2.0 / k) * state.f_hat
    bx, by = state.bundle_x, state.bundle_y
    grad_F = bx.basis.mass[:, None] * (bx.basis.phi @ grad_f)
    grad_G = by.basis.mass[:, None] * (by.basis.phi @ grad_g)
    grads = netmod.zero_grads(params)
    gx, _ = netmod.backward(params, state.cache_x, grad_F)
    gy, _ = netmod.backward(params, state.cache_y, grad_G)
    netmod.accumulate_grads(grads, gx)
    netmod.accumulate_grads(grads, gy)
    return grads


def pipeline_loss_and_grads(params, bundle_x, bundle_y, mode="unsupervised",
                            gt=None, ridge_scale=RIDGE_SCALE):
    """Loss and shared-parameter gradients for one ordered pair.

    mode selects the trained loss. When gt is given, the supervised loss is
    evaluated for monitoring regardless of mode and returned as the third
    element (None otherwise).
    """
    if mode not in ("unsupervised", "supervised"):
        raise DataError(f"unknown mode '{mode}'")
    if mode == "supervised" and gt is None:
        raise DataError("supervised mode requires ground truth")
    state = pipeline_forward(params, bundle_x, bundle_y, ridge_scale)
    monitored = None
    if gt is not None:
        monitored, sup_grad = sup_loss(state.soft, bundle_y.distances, gt)
    if mode == "unsupervised":
        loss, grad_p = unsup_loss(state.soft, bundle_x.distances,
                                  bundle_y.distances)
    else:
        loss, grad_p = monitored, sup_grad
    if not np.isfinite(loss):
        raise NumericsError(f"non-finite {mode} loss")
    grads = pipeline_backward(params, state, grad_p.astype(params.dtype))
    return loss, grads, monitored
