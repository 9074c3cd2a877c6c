"""
Tests for the fixed and random baselearners and the correction matrix
"""

import numpy as np
import pytest
import scipy.linalg as linalg
from numpy.testing import assert_allclose

from baselearners import (
    CorrectionMatrix,
    FixedBaselearner,
    FixedBaselearnerSet,
    RandomBaselearner,
    build_correction,
    correction_design_sets,
    fit_fixed,
    fit_random,
    orthonormal_basis,
)
from errors import DegenerateDesignWarning, NumericalError
from longitudinal_data import LongitudinalDataset, assemble_designs


def _learner(x):
    return FixedBaselearner.for_column(np.asarray(x, dtype=float).reshape(-1, 1), 0)


def test_fit_fixed_exact_line():
    x = np.array([0.5, -1.0, 2.0, 3.5, 0.0])
    intercept, slope, fitted, sse = fit_fixed(_learner(x), 2 + 3 * x)
    assert intercept == pytest.approx(2.0)
    assert slope == pytest.approx(3.0)
    assert_allclose(fitted, 2 + 3 * x)
    assert sse == pytest.approx(0.0, abs=1e-20)


def test_fit_fixed_orthogonal_residual():
    u = np.array([1.0, -2.0, 1.0])
    intercept, slope, fitted, sse = fit_fixed(_learner([1.0, 2.0, 3.0]), u)
    assert intercept == pytest.approx(0.0, abs=1e-15)
    assert slope == pytest.approx(0.0, abs=1e-15)
    assert sse == pytest.approx(u @ u)


def test_fit_fixed_hand_example():
    intercept, slope, _, sse = fit_fixed(_learner([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 3.0]))
    assert intercept == pytest.approx(0.0, abs=1e-15)
    assert slope == pytest.approx(1.0)
    assert sse == pytest.approx(0.0, abs=1e-20)


def test_normal_equations_hold():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(30)
    u = rng.standard_normal(30)
    _, _, fitted, _ = fit_fixed(_learner(x), u)
    resid = u - fitted
    assert abs(resid.sum()) < 1e-10 * np.abs(u).sum()
    assert abs(resid @ x) < 1e-10 * np.abs(u).sum() * np.abs(x).max()


def test_constant_covariate_is_degenerate():
    bl = _learner([2.0, 2.0, 2.0])
    assert bl.degenerate
    with pytest.raises(NumericalError, match="constant"):
        bl.fit(np.array([1.0, 2.0, 3.0]))


def test_set_excludes_constant_columns_with_warning():
    X = np.column_stack([np.ones(4), [1.0, 2.0, 3.0, 4.0]])
    with pytest.warns(DegenerateDesignWarning, match="x1"):
        learners = FixedBaselearnerSet(X)
    r, intercept, slope, _ = learners.select(np.array([1.0, 2.0, 3.0, 4.0]))
    assert r == 1
    assert slope == pytest.approx(1.0)


def test_all_degenerate_selects_nothing():
    with pytest.warns(DegenerateDesignWarning):
        learners = FixedBaselearnerSet(np.ones((4, 2)))
    assert not learners.active
    assert learners.select(np.arange(4.0)) is None


def test_select_orthogonal_winner():
    X = np.array([
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, -1.0],
        [1.0, -1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ])
    r, _, slope, _ = FixedBaselearnerSet(X).select(3 * X[:, 2])
    assert r == 2
    assert slope == pytest.approx(3.0)


def test_select_ties_go_to_smallest_index():
    x = np.arange(-5.0, 6.0)
    X = np.column_stack([x ** 2, x, x])
    learners = FixedBaselearnerSet(X)
    sse, _ = learners.sse_all(1.0 + 2 * x)
    assert sse[1] == sse[2] == 0.0
    r, _, _, _ = learners.select(1.0 + 2 * x)
    assert r == 1


def test_selection_never_increases_loss():
    rng = np.random.default_rng(7)
    X = rng.standard_normal((40, 6))
    learners = FixedBaselearnerSet(X)
    for _ in range(20):
        u = rng.standard_normal(40)
        r, _, _, fitted = learners.select(u)
        for nu in (0.1, 0.5, 1.0):
            assert np.sum((u - nu * fitted) ** 2) <= u @ u + 1e-12


def test_fixed_hat_is_projection_on_intercept_and_covariate():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(7)
    bl = _learner(x)
    Xt = np.column_stack([np.ones(7), x])
    expected = Xt @ np.linalg.solve(Xt.T @ Xt, Xt.T)
    assert_allclose(bl.hat_apply(np.eye(7)), expected, atol=1e-12)
    v = rng.standard_normal(7)
    assert_allclose(bl.hat_operator().matvec(v), expected @ v, atol=1e-12)


def _intercept_data(cluster_ids, X=None, z_terms=("intercept",)):
    cluster_ids = np.asarray(cluster_ids)
    if X is None:
        X = np.random.default_rng(0).standard_normal((len(cluster_ids), 1))
    return LongitudinalDataset.from_arrays(cluster_ids, np.zeros(len(cluster_ids)), X, z_terms=z_terms)


def test_correction_without_constant_covariates_is_centering():
    data = _intercept_data(np.repeat(np.arange(4), 3))
    correction = build_correction(data, assemble_designs(data))
    assert_allclose(correction.per_effect_projections[0], np.full((4, 4), 0.25))
    assert_allclose(correction.matrix(), np.eye(4) - 0.25)
    assert_allclose(correction.apply(np.array([1.0, 2.0, 3.0, 6.0])), [-2.0, -1.0, 0.0, 3.0])


def test_correction_removes_cluster_constant_signal():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(5)
    X = np.column_stack([np.repeat(w, 4), rng.standard_normal(20)])
    data = _intercept_data(np.repeat(np.arange(5), 4), X)
    correction = build_correction(data, assemble_designs(data))
    assert_allclose(correction.apply(w), 0.0, atol=1e-12)
    assert_allclose(correction.apply(2.0 - w), 0.0, atol=1e-12)


def test_full_rank_correction_on_two_clusters():
    X = np.array([[1.0], [1.0], [-1.0], [-1.0]])
    data = _intercept_data([0, 0, 1, 1], X)
    correction = build_correction(data, assemble_designs(data))
    assert_allclose(correction.per_effect_projections[0], np.eye(2), atol=1e-12)
    assert_allclose(correction.apply(np.array([0.7, -3.0])), 0.0, atol=1e-12)


def test_duplicate_constant_covariates_absorbed():
    w = np.repeat(np.random.default_rng(5).standard_normal(6), 2)
    X = np.column_stack([w, w, 2 * w])
    data = _intercept_data(np.repeat(np.arange(6), 2), X)
    sets = correction_design_sets(data)
    assert sets[0].shape == (6, 4)
    basis = orthonormal_basis(sets[0])
    assert basis.shape == (6, 2)


def test_slope_sets_follow_interaction_flag():
    rng = np.random.default_rng(6)
    X = np.column_stack([np.repeat(rng.standard_normal(4), 3), rng.standard_normal(12)])
    data = _intercept_data(np.repeat(np.arange(4), 3), X, z_terms=("intercept", 1))
    plain = correction_design_sets(data)
    assert [s.shape[1] for s in plain] == [2, 1]
    extended = correction_design_sets(data, slope_interactions=True)
    assert [s.shape[1] for s in extended] == [2, 2]


def test_projections_symmetric_idempotent(make_data):
    data = make_data(n=9, n_i=4, p=5, constant_cols=(0, 3), z_terms=("intercept", 1))
    correction = build_correction(data, assemble_designs(data), slope_interactions=True)
    for C_s in correction.per_effect_projections:
        assert_allclose(C_s, C_s.T, atol=1e-12)
        assert np.abs(C_s @ C_s - C_s).max() < 1e-8


def test_correction_matrix_matches_permuted_block_form(make_data):
    data = make_data(n=5, n_i=3, p=3, z_terms=("intercept", 1))
    correction = build_correction(data, assemble_designs(data))
    gamma = np.random.default_rng(8).standard_normal(10)
    assert_allclose(correction.matrix() @ gamma, correction.apply(gamma), atol=1e-12)
    B = np.random.default_rng(9).standard_normal((10, 3))
    assert_allclose(correction.apply_columns(B), correction.matrix() @ B, atol=1e-12)


def _two_cluster_learner():
    data = _intercept_data([0, 0, 1, 1])
    bundle = assemble_designs(data)
    return RandomBaselearner(bundle, build_correction(data, bundle))


def test_fit_random_hand_example():
    bl = _two_cluster_learner()
    increment, fitted = fit_random(bl, np.array([1.0, 1.0, -1.0, -1.0]), 1.0, np.eye(1))
    assert_allclose(bl.solve_uncorrected(np.array([1.0, 1.0, -1.0, -1.0])).ravel(), [2 / 3, -2 / 3])
    assert_allclose(increment, [2 / 3, -2 / 3])
    assert_allclose(fitted, [2 / 3, 2 / 3, -2 / 3, -2 / 3])


def test_fit_random_zero_residual():
    increment, fitted = fit_random(_two_cluster_learner(), np.zeros(4), 1.0, np.eye(1))
    assert_allclose(increment, 0.0)
    assert_allclose(fitted, 0.0)


def test_fit_random_infinite_penalty_limit():
    u = np.array([3.0, 1.0, -2.0, -4.0])
    increment, _ = fit_random(_two_cluster_learner(), u, 1e12, np.eye(1))
    assert np.abs(increment).max() < 1e-6 * np.linalg.norm(u)


def test_fit_random_rejects_non_spd_q():
    bl = _two_cluster_learner()
    with pytest.raises(NumericalError, match="ill-conditioned"):
        fit_random(bl, np.ones(4), 1.0, np.array([[-1.0]]))
    with pytest.raises(NumericalError, match="ill-conditioned"):
        fit_random(bl, np.ones(4), 0.0, np.eye(1))


def _dense_hat(data, sigma2, Q, slope_interactions=False):
    bundle = assemble_designs(data)
    correction = build_correction(data, bundle, slope_interactions)
    Z = bundle.Z_block.toarray()
    Qb_inv = linalg.block_diag(*([np.linalg.inv(Q)] * data.n))
    B = np.linalg.solve(Z.T @ Z + sigma2 * Qb_inv, Z.T)
    return bundle, correction, Z @ correction.matrix() @ B


def test_hat_matrix_matches_brute_force(make_data):
    data = make_data(n=6, n_i=4, p=3, z_terms=("intercept", 2))
    Q = np.array([[0.5, 0.1], [0.1, 0.3]])
    bundle, correction, expected = _dense_hat(data, 0.7, Q)
    bl = RandomBaselearner(bundle, correction)
    bl.refresh(0.7, Q)
    assert_allclose(bl.hat_matrix(), expected, atol=1e-10)
    v = np.random.default_rng(0).standard_normal(data.N)
    assert_allclose(bl.hat_operator() @ v, expected @ v, atol=1e-10)


def test_corrected_increments_orthogonal_to_constant_covariates():
    rng = np.random.default_rng(11)
    for trial in range(20):
        n, n_i = rng.integers(3, 9), rng.integers(1, 5)
        N = n * n_i
        X = rng.standard_normal((N, 4))
        X[:, 0] = np.repeat(rng.standard_normal(n), n_i)
        X[:, 1] = np.repeat(rng.integers(0, 2, n).astype(float), n_i)
        z_terms = ("intercept", 2) if trial % 2 else ("intercept",)
        data = LongitudinalDataset.from_arrays(np.repeat(np.arange(n), n_i), rng.standard_normal(N), X, z_terms=z_terms)
        bundle = assemble_designs(data)
        correction = build_correction(data, bundle)
        bl = RandomBaselearner(bundle, correction)
        increment, _ = bl.fit(rng.standard_normal(N), 0.5, np.eye(len(z_terms)))

        G = increment.reshape(n, -1)
        scale = np.linalg.norm(increment)
        for s, X_cs in enumerate(correction.design_sets):
            for c in X_cs.T:
                assert abs(c @ G[:, s]) < 1e-8 * np.linalg.norm(c) * max(scale, 1.0)


def test_uncorrected_core_is_contraction(make_data):
    data = make_data(n=7, n_i=3, p=3, z_terms=("intercept", 1))
    bundle = assemble_designs(data)
    Q = np.array([[1.0, 0.3], [0.3, 0.5]])
    Q_inv = np.linalg.inv(Q)
    for ZtZ_i in bundle.ZtZ:
        eig = np.linalg.eigvals(np.linalg.solve(ZtZ_i + 0.2 * Q_inv, ZtZ_i))
        assert np.all(eig.real >= -1e-12)
        assert np.all(eig.real < 1.0)


def test_correction_is_frozen_dataclass():
    correction = CorrectionMatrix(design_sets=(), bases=(np.ones((2, 1)) / np.sqrt(2),), n=2, q=1)
    with pytest.raises(Exception):
        correction.n = 3
