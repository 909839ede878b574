"""Map extraction, linear assignment, PMF refinement, and L2,1 upscaling."""

import itertools

import numpy as np
import pytest

from isomatch.errors import DataError
from isomatch.fmaps import SoftCorrespondence, soft_corr
from isomatch.geodesic import distance_matrix
from isomatch.mesh import simplify
from isomatch.refine import (PointMap, extract_map, heat_kernel, lap_solve,
                             load_corr, pmf_refine, save_corr, upscale)
from isomatch.spectral import compute_basis
from isomatch.synth import bumpy_figure, grid_mesh, icosphere


# ---------------------------------------------------------------- PointMap

def test_point_map_validation():
    pm = PointMap([2, 0, 1], 3, bijective=True)
    assert pm.n_x == pm.n_y == 3
    with pytest.raises(DataError, match="range"):
        PointMap([0, 3], 3)
    with pytest.raises(DataError, match="permutation"):
        PointMap([0, 0, 1], 3, bijective=True)
    with pytest.raises(DataError, match="permutation"):
        PointMap([0, 1, -1], 3, bijective=True)
    partial = PointMap([0, -1, 2], 5)
    np.testing.assert_array_equal(partial.matched, [0, 2])


def test_extract_map_rules():
    perm = np.zeros((4, 4))
    order = [2, 0, 3, 1]
    perm[order, np.arange(4)] = 1.0
    np.testing.assert_array_equal(
        extract_map(SoftCorrespondence(perm)).map, order)
    # uniform column ties to index 0; a dominated column picks its winner
    p = np.column_stack([np.full(3, 1 / np.sqrt(3)),
                         np.array([0.1, 0.9, np.sqrt(1 - 0.82)])])
    out = extract_map(SoftCorrespondence(p))
    assert out.map[0] == 0
    assert out.map[1] == 1
    assert not out.bijective


def test_corr_file_round_trip(tmp_path):
    pm = PointMap([4, -1, 0, 2], 5)
    path = str(tmp_path / "map.corr")
    save_corr(path, pm)
    back = load_corr(path)
    np.testing.assert_array_equal(back.map, pm.map)
    assert back.n_y == 5
    first = open(path).readline().strip()
    assert first == "# corrmap v1 4 5"


def test_corr_file_errors(tmp_path):
    bad = tmp_path / "bad.corr"
    bad.write_text("# wrong header\n")
    with pytest.raises(DataError, match="corrmap"):
        load_corr(str(bad))
    bad.write_text("# corrmap v1 3 3\n0 5\n")
    with pytest.raises(DataError, match=":2"):
        load_corr(str(bad))
    bad.write_text("# corrmap v1 3 3\n0 1 2\n")
    with pytest.raises(DataError, match=":2"):
        load_corr(str(bad))
    bad.write_text("# corrmap v1 3 3\n0 x\n")
    with pytest.raises(DataError, match="non-integer"):
        load_corr(str(bad))


# --------------------------------------------------------------- lap_solve

def test_lap_identity_and_hand_case():
    np.testing.assert_array_equal(lap_solve(np.eye(4)), np.arange(4))
    score = np.array([[1.0, 2.0, 3.0], [3.0, 1.0, 2.0], [2.0, 3.0, 1.0]])
    perm = lap_solve(score)
    np.testing.assert_array_equal(perm, [2, 0, 1])
    assert score[np.arange(3), perm].sum() == 9.0


def test_lap_row_constant_invariance():
    rng = np.random.default_rng(0)
    score = rng.standard_normal((5, 5))
    base = lap_solve(score)
    shifted = score.copy()
    shifted[2] += 17.0
    np.testing.assert_array_equal(lap_solve(shifted), base)


def test_lap_matches_brute_force():
    rng = np.random.default_rng(1)
    idx = np.arange(6)
    for _ in range(50):
        score = rng.uniform(-1, 1, (6, 6))
        perm = lap_solve(score)
        best = max(score[idx, p].sum()
                   for p in itertools.permutations(range(6)))
        assert score[idx, perm].sum() == best


def test_lap_input_validation():
    with pytest.raises(DataError, match="finite"):
        lap_solve(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(DataError, match="square"):
        lap_solve(np.zeros((2, 3)))


# ------------------------------------------------------------- heat kernel

def test_heat_kernel_rows_sum_to_one():
    mesh = bumpy_figure(1)
    basis = compute_basis(mesh, 12)
    K = heat_kernel(basis, 0.3)
    # the constant eigenfunction survives any diffusion time
    np.testing.assert_allclose(K.sum(axis=1), 1.0, atol=1e-8)


# ------------------------------------------------------------- pmf_refine

def test_pmf_identity_fixed_point():
    mesh = grid_mesh(5, 10)
    assert mesh.n_vertices == 50
    basis = compute_basis(mesh, 20)
    ident = PointMap(np.arange(50), 50, bijective=True)
    for iters in (1, 3):
        out = pmf_refine(ident, basis, basis, iterations=iters)
        assert out.bijective
        np.testing.assert_array_equal(out.map, np.arange(50))


def test_pmf_output_is_permutation():
    mesh = bumpy_figure(1)
    n = mesh.n_vertices
    basis = compute_basis(mesh, 15)
    rng = np.random.default_rng(2)
    init = PointMap(rng.integers(0, n, size=n), n)
    out = pmf_refine(init, basis, basis, iterations=4)
    assert out.bijective
    assert np.array_equal(np.sort(out.map), np.arange(n))


def test_pmf_accepts_near_optimal_map_with_repeats():
    # an argmax extraction can send several sources to one target; its score
    # is not an assignment lower bound, so the first projection onto
    # permutations may drop the raw objective without being an error
    mesh = bumpy_figure(1)
    n = mesh.n_vertices
    basis = compute_basis(mesh, 15)
    start = np.arange(n)
    start[::7] = 0
    out = pmf_refine(PointMap(start, n), basis, basis, iterations=3)
    assert out.bijective


def test_pmf_zero_iterations_passthrough():
    mesh = icosphere(0)
    basis = compute_basis(mesh, 5)
    init = PointMap(np.arange(12)[::-1], 12, bijective=True)
    out = pmf_refine(init, basis, basis, iterations=0)
    assert out is init


def test_pmf_reduces_error_of_corrupted_map():
    # self-pair with 20% of the identity scrambled: refinement must strictly
    # shrink the mean geodesic error
    mesh = bumpy_figure(2)
    n = mesh.n_vertices
    basis = compute_basis(mesh, 30)
    D = np.asarray(distance_matrix(mesh).d, dtype=np.float64)
    diam = float(D.max())
    rng = np.random.default_rng(3)
    corrupted = np.arange(n)
    bad = rng.choice(n, size=n // 5, replace=False)
    corrupted[bad] = rng.permutation(bad)  # stays a permutation
    init = PointMap(corrupted, n, bijective=True)
    err0 = D[init.map, np.arange(n)].mean()
    assert err0 > 0
    out = pmf_refine(init, basis, basis, diameter=diam)
    err1 = D[out.map, np.arange(n)].mean()
    assert out.bijective
    assert err1 < err0


def test_pmf_unequal_sizes():
    small = icosphere(1)
    big = icosphere(2)
    bs = compute_basis(small, 10)
    bb = compute_basis(big, 10)
    rng = np.random.default_rng(4)

    init = PointMap(rng.integers(0, big.n_vertices, small.n_vertices),
                    big.n_vertices)
    out = pmf_refine(init, bs, bb, iterations=3)
    assert not out.bijective
    assert out.n_x == small.n_vertices and out.n_y == big.n_vertices
    assert (out.map >= 0).all()

    init2 = PointMap(rng.integers(0, small.n_vertices, big.n_vertices),
                     small.n_vertices)
    out2 = pmf_refine(init2, bb, bs, iterations=3)
    assert not out2.bijective
    assert out2.n_x == big.n_vertices and (out2.map < small.n_vertices).all()
    assert (out2.map >= 0).all()


def test_pmf_validation():
    mesh = icosphere(0)
    basis = compute_basis(mesh, 5)
    with pytest.raises(DataError, match="match"):
        pmf_refine(PointMap(np.zeros(5, dtype=int), 12), basis, basis)
    with pytest.raises(DataError, match="total"):
        pmf_refine(PointMap(np.full(12, -1), 12), basis, basis)


# ---------------------------------------------------------------- upscale

def test_upscale_identity_recovers_identity():
    mesh = bumpy_figure(1)
    n = mesh.n_vertices
    basis = compute_basis(mesh, 15)
    ident = PointMap(np.arange(n), n, bijective=True)
    C = upscale(ident, None, None, basis, basis)
    np.testing.assert_allclose(C, np.eye(15), atol=1e-6)
    out = extract_map(soft_corr(C, basis, basis))
    np.testing.assert_array_equal(out.map, np.arange(n))


def test_upscale_through_vertex_maps():
    mesh = icosphere(2)
    low, vmap = simplify(mesh, 60)
    basis = compute_basis(mesh, 15)
    ident = PointMap(np.arange(low.n_vertices), low.n_vertices,
                     bijective=True)
    C = upscale(ident, vmap, vmap, basis, basis)
    np.testing.assert_allclose(C, np.eye(15), atol=1e-5)


def test_upscale_downweights_single_outlier():
    mesh = icosphere(3)
    n = mesh.n_vertices
    basis = compute_basis(mesh, 20)
    sel = np.arange(0, n, 3)  # ~214 matches
    map_full = np.full(n, -1)
    map_full[sel] = sel
    clean = PointMap(map_full, n)
    C_ref = upscale(clean, None, None, basis, basis)

    corrupted = map_full.copy()
    # send one source to the farthest vertex instead of itself
    D = np.asarray(distance_matrix(mesh).d)
    corrupted[sel[7]] = int(np.argmax(D[sel[7]]))
    dirty = PointMap(corrupted, n)
    C_robust = upscale(dirty, None, None, basis, basis)
    C_ls = upscale(dirty, None, None, basis, basis, irls_iters=1)

    drift_robust = np.linalg.norm(C_robust - C_ref)
    drift_ls = np.linalg.norm(C_ls - C_ref)
    assert drift_robust <= 0.1 * drift_ls


def test_upscale_empty_constraint_set():
    mesh = icosphere(0)
    basis = compute_basis(mesh, 4)
    empty = PointMap(np.full(12, -1), 12)
    with pytest.raises(DataError, match="empty constraint set"):
        upscale(empty, None, None, basis, basis)
