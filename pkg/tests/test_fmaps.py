"""Functional-map solve, soft correspondence, losses, and the assembled
differentiable pipeline. Gradients are validated against central finite
differences; hand values are worked out in comments."""

from types import SimpleNamespace

import numpy as np
import pytest

from conftest import grad_vector, make_bundle, param_vector, shift_params
from isomatch import net as netmod
from isomatch.errors import DataError, NumericsError
from isomatch.fmaps import (RIDGE_SCALE, SoftCorrespondence, adaptive_ridge,
                            pipeline_forward, pipeline_loss_and_grads,
                            soft_corr, soft_corr_backward, solve_fm,
                            solve_fm_backward, sup_loss, unsup_loss)
from isomatch.spectral import compute_basis
from isomatch.synth import bumpy_figure, icosphere, posed_figure


# ---------------------------------------------------------------- solve_fm

def test_self_map_is_identity():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((5, 8))
    C = solve_fm(f, f, ridge=0.0)
    np.testing.assert_allclose(C, np.eye(5), atol=1e-8)


def test_diagonal_hand_case():
    # S = diag(1, 4), G F^T = diag(2, 4), so C = diag(2, 1)
    f = np.array([[1.0, 0.0], [0.0, 2.0]])
    g = np.array([[2.0, 0.0], [0.0, 2.0]])
    C = solve_fm(f, g, ridge=0.0)
    np.testing.assert_allclose(C, np.diag([2.0, 1.0]), atol=1e-14)


def test_huge_ridge_shrinks_to_zero():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((4, 6))
    g = rng.standard_normal((4, 6))
    C = solve_fm(f, g, ridge=1e12)
    assert np.abs(C).max() < 1e-9


def test_singular_without_ridge_raises():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((4, 6))
    f[2] = 0.0  # zero row makes F F^T exactly singular
    g = rng.standard_normal((4, 6))
    with pytest.raises(NumericsError, match="ridge"):
        solve_fm(f, g, ridge=0.0)
    C = solve_fm(f, g, ridge=1e-6)  # regularized solve goes through
    assert np.isfinite(C).all()


def test_shape_and_ridge_validation():
    rng = np.random.default_rng(3)
    with pytest.raises(DataError):
        solve_fm(rng.standard_normal((4, 6)), rng.standard_normal((4, 5)), 0.1)
    with pytest.raises(DataError):
        solve_fm(rng.standard_normal((4, 6)), rng.standard_normal((4, 6)), -1.0)


def test_solve_fm_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((4, 6))
    g = rng.standard_normal((4, 6))
    ridge = 1e-3
    probe = rng.standard_normal((4, 4))

    def loss(f_, g_, r_):
        return float(np.sum(probe * solve_fm(f_, g_, r_)))

    _, cache = solve_fm(f, g, ridge, with_cache=True)
    grad_f, grad_g, grad_r = solve_fm_backward(cache, probe)
    h = 1e-6
    for idx in [(0, 0), (1, 3), (3, 5), (2, 2)]:
        for mat, grad in ((f, grad_f), (g, grad_g)):
            fp = f.copy(), g.copy()
            which = 0 if mat is f else 1
            fp[which][idx] += h
            up = loss(fp[0], fp[1], ridge)
            fp = f.copy(), g.copy()
            fp[which][idx] -= h
            dn = loss(fp[0], fp[1], ridge)
            fd = (up - dn) / (2 * h)
            assert abs(fd - grad[idx]) <= 1e-5 * max(1.0, abs(fd))
    fd_r = (loss(f, g, ridge + h) - loss(f, g, ridge - h)) / (2 * h)
    assert abs(fd_r - grad_r) <= 1e-5 * max(1.0, abs(fd_r))


def test_zero_grad_c_gives_zero_grads():
    rng = np.random.default_rng(5)
    _, cache = solve_fm(rng.standard_normal((3, 5)),
                        rng.standard_normal((3, 5)), 1e-2, with_cache=True)
    gf, gg, gr = solve_fm_backward(cache, np.zeros((3, 3)))
    assert not gf.any() and not gg.any() and gr == 0.0


def test_zero_residual_instance_has_vanishing_total_derivative():
    # G = M F exactly, ridge = 0: the solve recovers C = M with zero
    # residual, and the least-squares objective is stationary in every
    # input direction (envelope property). The assembled total gradient
    # of ||C F - G||^2 through the solve must vanish.
    rng = np.random.default_rng(6)
    f = rng.standard_normal((4, 7))
    m = rng.standard_normal((4, 4))
    g = m @ f
    C, cache = solve_fm(f, g, ridge=0.0, with_cache=True)
    res = C @ f - g
    assert np.abs(res).max() < 1e-10
    grad_c = 2.0 * res @ f.T
    gf, gg, _ = solve_fm_backward(cache, grad_c)
    total_f = gf + 2.0 * C.T @ res   # chain term plus direct term
    total_g = gg - 2.0 * res
    for _ in range(5):
        df = rng.standard_normal(f.shape)
        dg = rng.standard_normal(g.shape)
        deriv = float(np.sum(total_f * df) + np.sum(total_g * dg))
        assert abs(deriv) <= 1e-8


# --------------------------------------------------------------- soft_corr

@pytest.fixture(scope="module")
def small_sphere():
    return icosphere(0)


@pytest.fixture(scope="module")
def sphere_basis(small_sphere):
    return compute_basis(small_sphere, 5)


def test_full_basis_identity_c_gives_identity_p(small_sphere):
    basis = compute_basis(small_sphere, small_sphere.n_vertices)
    soft = soft_corr(np.eye(basis.k), basis, basis)
    np.testing.assert_allclose(soft.p, np.eye(basis.n), atol=1e-6)


def test_q_columns_are_stochastic(sphere_basis):
    rng = np.random.default_rng(7)
    soft = soft_corr(rng.standard_normal((5, 5)), sphere_basis, sphere_basis)
    np.testing.assert_allclose(soft.q.sum(axis=0), 1.0, atol=1e-12)
    assert (soft.p >= 0).all()


def test_rank_one_map_gives_uniform_columns(small_sphere):
    # k = 1 keeps only the constant eigenfunction, so every normalized
    # column equals 1/sqrt(n_Y)
    basis1 = compute_basis(small_sphere, 1)
    soft = soft_corr(np.array([[1.0]]), basis1, basis1)
    n = small_sphere.n_vertices
    np.testing.assert_allclose(soft.p, np.full((n, n), 1.0 / np.sqrt(n)),
                               atol=1e-12)


def test_zero_map_raises_degenerate_column(sphere_basis):
    with pytest.raises(NumericsError, match="degenerate"):
        soft_corr(np.zeros((5, 5)), sphere_basis, sphere_basis)


def test_c_shape_mismatch(sphere_basis):
    with pytest.raises(DataError):
        soft_corr(np.eye(4), sphere_basis, sphere_basis)


def test_soft_corr_gradient_matches_finite_differences(sphere_basis):
    rng = np.random.default_rng(8)
    C = rng.standard_normal((5, 5))
    soft, cache = soft_corr(C, sphere_basis, sphere_basis, with_cache=True)
    Z = cache[0]
    assert np.abs(Z).min() > 1e-5  # away from the |.| kink
    probe = rng.standard_normal(soft.p.shape)
    grad_c = soft_corr_backward(cache, probe)
    h = 1e-6
    for idx in [(0, 0), (2, 3), (4, 1), (1, 4), (3, 3)]:
        cp = C.copy()
        cp[idx] += h
        up = float(np.sum(probe * soft_corr(cp, sphere_basis,
                                            sphere_basis).p))
        cp = C.copy()
        cp[idx] -= h
        dn = float(np.sum(probe * soft_corr(cp, sphere_basis,
                                            sphere_basis).p))
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad_c[idx]) <= 1e-5 * max(1.0, abs(fd))


def test_gradient_orthogonal_to_radial_direction(sphere_basis):
    # P is invariant to positive rescaling of C, so any gradient pulled
    # back to C has no component along C itself
    rng = np.random.default_rng(9)
    C = rng.standard_normal((5, 5))
    _, cache = soft_corr(C, sphere_basis, sphere_basis, with_cache=True)
    grad_c = soft_corr_backward(cache, rng.standard_normal((12, 12)))
    radial = float(np.sum(grad_c * C))
    scale = np.linalg.norm(grad_c) * np.linalg.norm(C)
    assert abs(radial) <= 1e-8 * max(scale, 1e-30)


def test_soft_correspondence_validation():
    with pytest.raises(DataError, match="non-negative"):
        SoftCorrespondence(np.array([[-1.0], [0.0]]))
    with pytest.raises(DataError, match="unit"):
        SoftCorrespondence(np.array([[0.5], [0.5]]))
    SoftCorrespondence(np.eye(3))  # hard permutation is valid


# ------------------------------------------------------------------ losses

def _stub(p):
    return SimpleNamespace(p=p, q=p * p)


def test_unsup_loss_zero_on_exact_permutation():
    mesh = icosphere(1)
    from isomatch.geodesic import distance_matrix
    D = np.asarray(distance_matrix(mesh).d)
    n = mesh.n_vertices
    rng = np.random.default_rng(10)
    perm = rng.permutation(n)
    DY = D[np.ix_(perm, perm)]  # Y vertex a is a copy of X vertex perm[a]
    P = np.zeros((n, n))
    P[np.arange(n), perm] = 1.0  # X vertex perm[a] maps to Y vertex a
    loss, grad = unsup_loss(SoftCorrespondence(P), D, DY)
    assert loss == 0.0
    assert not grad.any()


def test_unsup_loss_hand_value():
    # uniform Q on the two-point space with d(1, 2) = 1:
    # Q^T D Q = [[1/2, 1/2], [1/2, 1/2]], E has four entries of 1/2,
    # loss = 4 * 1/4 / 4 = 1/4
    D = np.array([[0.0, 1.0], [1.0, 0.0]])
    P = np.full((2, 2), np.sqrt(0.5))
    loss, _ = unsup_loss(SoftCorrespondence(P), D, D)
    assert abs(loss - 0.25) < 1e-15


def _random_metric(rng, n):
    D = rng.uniform(0.5, 2.0, (n, n))
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def test_unsup_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    DX = _random_metric(rng, 6)
    DY = _random_metric(rng, 7)
    P = rng.uniform(0.1, 1.0, (7, 6))
    P /= np.linalg.norm(P, axis=0)
    _, grad = unsup_loss(_stub(P), DX, DY)
    h = 1e-6
    for idx in [(0, 0), (3, 2), (6, 5), (2, 4), (5, 1)]:
        pp = P.copy()
        pp[idx] += h
        up = unsup_loss(_stub(pp), DX, DY)[0]
        pp = P.copy()
        pp[idx] -= h
        dn = unsup_loss(_stub(pp), DX, DY)[0]
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-5 * max(1.0, abs(fd))


def test_sup_loss_hand_value_and_brute_force():
    D = np.array([[0.0, 1.0], [1.0, 0.0]])
    P = np.full((2, 2), np.sqrt(0.5))
    gt = np.array([0, 1])
    loss, _ = sup_loss(SoftCorrespondence(P), D, gt)
    # sum of P^2 over the two off-diagonal unit distances, divided by n_X
    assert abs(loss - 0.5) < 1e-15

    rng = np.random.default_rng(12)
    DY = _random_metric(rng, 7)
    P = rng.uniform(0.1, 1.0, (7, 6))
    P /= np.linalg.norm(P, axis=0)
    gt = rng.integers(0, 7, size=6)
    loss, _ = sup_loss(_stub(P), DY, gt)
    brute = sum(P[j, i] ** 2 * DY[j, gt[i]] ** 2
                for i in range(6) for j in range(7)) / 6
    assert abs(loss - brute) <= 1e-12 * max(1.0, brute)


def test_sup_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    DY = _random_metric(rng, 7)
    P = rng.uniform(0.1, 1.0, (7, 6))
    P /= np.linalg.norm(P, axis=0)
    gt = rng.integers(0, 7, size=6)
    _, grad = sup_loss(_stub(P), DY, gt)
    h = 1e-6
    for idx in [(0, 0), (4, 3), (6, 5)]:
        pp = P.copy()
        pp[idx] += h
        up = sup_loss(_stub(pp), DY, gt)[0]
        pp = P.copy()
        pp[idx] -= h
        dn = sup_loss(_stub(pp), DY, gt)[0]
        fd = (up - dn) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-5 * max(1.0, abs(fd))


def test_sup_loss_rejects_bad_ground_truth():
    P = np.eye(3)
    D = np.zeros((3, 3))
    with pytest.raises(DataError, match="range"):
        sup_loss(SoftCorrespondence(P), D, np.array([0, 1, 3]))
    with pytest.raises(DataError, match="shape"):
        sup_loss(SoftCorrespondence(P), D, np.array([0, 1]))


def test_unsup_loss_distance_shape_mismatch():
    P = np.eye(3)
    with pytest.raises(DataError, match="distance"):
        unsup_loss(SoftCorrespondence(P), np.zeros((4, 4)), np.zeros((3, 3)))


# ---------------------------------------------------------------- pipeline

def test_adaptive_ridge_value():
    f = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert abs(adaptive_ridge(f) - RIDGE_SCALE * 30.0 / 2) < 1e-15


def test_identity_net_full_basis_recovers_identity():
    # zeroed weights make each block the identity, and with ridge 0 the
    # self-pair solve gives C = I, P = I, and a vanishing loss
    mesh = icosphere(0)
    bundle = make_bundle(mesh, k=mesh.n_vertices, d=16, seed=14)
    params = netmod.init_params(width=16, depth=2, seed=14)
    for w in params.weights:
        w *= 0.0
    state = pipeline_forward(params, bundle, bundle, ridge_scale=0.0)
    np.testing.assert_allclose(state.C, np.eye(mesh.n_vertices), atol=1e-8)
    np.testing.assert_allclose(state.soft.p, np.eye(mesh.n_vertices),
                               atol=1e-6)
    loss, _ = unsup_loss(state.soft, bundle.distances, bundle.distances)
    assert loss <= 1e-10


def test_self_pair_loss_not_above_mismatched_pair():
    mesh = bumpy_figure(2)
    other = posed_figure(mesh, bend=0.5, twist=0.6)
    bx = make_bundle(mesh, k=20, d=16, seed=15)
    by = make_bundle(other, k=20, d=16, seed=16)
    params = netmod.init_params(width=16, depth=3, seed=17)
    loss_same, _, _ = pipeline_loss_and_grads(params, bx, bx)
    loss_diff, _, _ = pipeline_loss_and_grads(params, bx, by)
    assert loss_same <= loss_diff


def test_pipeline_mode_validation():
    mesh = icosphere(0)
    bundle = make_bundle(mesh, k=4, d=5, seed=18)
    params = netmod.init_params(width=5, depth=2, seed=18)
    with pytest.raises(DataError, match="ground truth"):
        pipeline_loss_and_grads(params, bundle, bundle, mode="supervised")
    with pytest.raises(DataError, match="mode"):
        pipeline_loss_and_grads(params, bundle, bundle, mode="banana")


def test_pipeline_monitored_supervised_loss():
    mesh = icosphere(0)
    bundle = make_bundle(mesh, k=4, d=5, seed=19)
    params = netmod.init_params(width=5, depth=2, seed=19)
    gt = np.arange(mesh.n_vertices)
    loss_u, _, mon = pipeline_loss_and_grads(params, bundle, bundle, gt=gt)
    state = pipeline_forward(params, bundle, bundle)
    direct, _ = sup_loss(state.soft, bundle.distances, gt)
    assert mon == pytest.approx(direct, rel=1e-12)
    loss_s, _, mon_s = pipeline_loss_and_grads(params, bundle, bundle,
                                               mode="supervised", gt=gt)
    assert loss_s == mon_s
    assert loss_u != loss_s


@pytest.mark.parametrize("mode", ["unsupervised", "supervised"])
def test_pipeline_gradient_matches_finite_differences(mode):
    mesh = icosphere(0)
    bx = make_bundle(mesh, k=6, d=5, seed=20)
    by = make_bundle(mesh, k=6, d=5, seed=21)
    params = netmod.init_params(width=5, depth=2, seed=22)
    gt = np.arange(mesh.n_vertices) if mode == "supervised" else None
    loss, grads, _ = pipeline_loss_and_grads(params, bx, by, mode=mode, gt=gt)
    gvec = grad_vector(grads)
    theta = param_vector(params)
    rng = np.random.default_rng(23)
    h = 1e-6
    for _ in range(3):
        u = rng.standard_normal(theta.size)
        u /= np.linalg.norm(u)
        up = pipeline_loss_and_grads(shift_params(params, u, h), bx, by,
                                     mode=mode, gt=gt)[0]
        dn = pipeline_loss_and_grads(shift_params(params, u, -h), bx, by,
                                     mode=mode, gt=gt)[0]
        fd = (up - dn) / (2 * h)
        analytic = float(gvec @ u)
        assert abs(fd - analytic) <= 1e-4 * max(1.0, abs(fd))
