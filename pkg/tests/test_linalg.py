import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.errors import DidNotConverge, NonFinite, NonSquare, ShapeMismatch
from gradleak.linalg import (
    SparseSystem,
    SystemBuilder,
    hungarian,
    lsmr_solve,
    null_space_basis,
    numerical_rank,
    pinv,
)


def penrose_errors(a, p):
    scale = max(np.linalg.norm(a), 1.0)
    pscale = max(np.linalg.norm(p), 1.0)
    return [
        np.linalg.norm(a @ p @ a - a) / scale,
        np.linalg.norm(p @ a @ p - p) / pscale,
        np.linalg.norm((a @ p).T - a @ p),
        np.linalg.norm((p @ a).T - p @ a),
    ]


def test_pinv_identity_and_zero():
    assert np.allclose(pinv(np.eye(3)), np.eye(3))
    z = pinv(np.zeros((2, 4)))
    assert z.shape == (4, 2) and not z.any()


def test_pinv_left_inverse_full_column_rank():
    a = np.random.default_rng(0).normal(size=(5, 3))
    assert np.linalg.norm(pinv(a) @ a - np.eye(3)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(
    m=st.integers(1, 64),
    n=st.integers(1, 64),
    rank=st.integers(1, 64),
    seed=st.integers(0, 2**31),
)
def test_penrose_identities(m, n, rank, seed):
    rng = np.random.default_rng(seed)
    r = min(rank, m, n)
    a = rng.normal(size=(m, r)) @ rng.normal(size=(r, n))
    assert max(penrose_errors(a, pinv(a))) <= 1e-9


def test_pinv_rejects_nonfinite():
    with pytest.raises(NonFinite):
        pinv(np.array([[1.0, np.nan]]))
    with pytest.raises(NonFinite):
        null_space_basis(np.array([[np.inf, 0.0]]))


def test_null_space_small_cases():
    b = null_space_basis(np.array([[1.0, 0.0]]))
    assert b.shape == (2, 1)
    assert np.allclose(np.abs(b[:, 0]), [0.0, 1.0])
    full = np.random.default_rng(1).normal(size=(4, 4))
    assert null_space_basis(full).shape == (4, 0)


def test_null_space_random_7x12():
    m = np.random.default_rng(2).normal(size=(7, 12))
    b = null_space_basis(m)
    assert b.shape == (12, 5)
    assert np.abs(m @ b).max() <= 1e-10
    assert np.abs(b.T @ b - np.eye(5)).max() <= 1e-10


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 12), n=st.integers(1, 12), r=st.integers(0, 12), seed=st.integers(0, 2**31))
def test_rank_nullity(m, n, r, seed):
    rng = np.random.default_rng(seed)
    r = min(r, m, n)
    a = rng.normal(size=(m, r)) @ rng.normal(size=(r, n)) if r else np.zeros((m, n))
    assert numerical_rank(a) + null_space_basis(a).shape[1] == n


def test_sparse_system_validation():
    with pytest.raises(ShapeMismatch):
        SparseSystem(1, 2, np.array([0]), np.array([5]), np.array([1.0]), np.array([0.0]))
    with pytest.raises(ShapeMismatch):
        SparseSystem(1, 2, np.array([0, 0]), np.array([1, 1]), np.array([1.0, 2.0]), np.array([0.0]))
    with pytest.raises(NonFinite):
        SparseSystem(1, 2, np.array([0]), np.array([1]), np.array([1.0]), np.array([np.nan]))


def test_builder_offsets_rows():
    b = SystemBuilder(3)
    b.add_block(np.array([0, 0]), np.array([0, 1]), np.array([1.0, 2.0]), np.array([3.0]))
    b.add_block(np.array([0]), np.array([2]), np.array([4.0]), np.array([5.0]))
    s = b.build()
    assert s.n_rows == 2
    assert np.array_equal(s.to_dense(), [[1.0, 2.0, 0.0], [0.0, 0.0, 4.0]])
    assert np.array_equal(s.rhs, [3.0, 5.0])


def test_lsmr_identity():
    res = lsmr_solve(SparseSystem.from_dense(np.eye(4), np.arange(1.0, 5.0)))
    assert np.allclose(res.solution, [1, 2, 3, 4], atol=1e-12)
    assert res.residual_norm <= 1e-12


def test_lsmr_planted_overdetermined():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(6, 3))
    x = rng.normal(size=3)
    res = lsmr_solve(SparseSystem.from_dense(a, a @ x))
    assert np.abs(res.solution - x).max() <= 1e-8


def test_lsmr_inconsistent_matches_normal_equations():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(10, 4))
    b = rng.normal(size=10)
    oracle = np.linalg.solve(a.T @ a, a.T @ b)
    res = lsmr_solve(SparseSystem.from_dense(a, b))
    assert abs(res.residual_norm - np.linalg.norm(a @ oracle - b)) <= 1e-8


@pytest.mark.parametrize("seed", range(20))
def test_lsmr_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(50, 501))
    n = int(rng.integers(5, min(m, 200) + 1))
    a = rng.normal(size=(m, n)) * (rng.random((m, n)) < 0.3)
    a[np.arange(n), np.arange(n)] += 1.0
    b = rng.normal(size=m)
    oracle = np.linalg.lstsq(a, b, rcond=None)[0]
    res = lsmr_solve(SparseSystem.from_dense(a, b))
    assert np.linalg.norm(res.solution - oracle) <= 1e-7 * max(np.linalg.norm(oracle), 1.0)


def test_lsmr_iteration_cap_raises_with_best_iterate():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(40, 30)) @ np.diag(np.logspace(0, 6, 30))
    with pytest.raises(DidNotConverge) as info:
        lsmr_solve(SparseSystem.from_dense(a, rng.normal(size=40)), max_iter=1)
    assert info.value.solution.shape == (30,)
    assert info.value.iterations == 1


def test_hungarian_small():
    assert hungarian(np.array([[5.0]])) == [(0, 0)]
    assert hungarian(np.array([[1.0, 2.0], [2.0, 1.0]])) == [(0, 0), (1, 1)]
    with pytest.raises(NonSquare):
        hungarian(np.zeros((2, 3)))


@pytest.mark.parametrize("n", range(1, 8))
def test_hungarian_matches_brute_force(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        cost = rng.random((n, n))
        got = sum(cost[r, c] for r, c in hungarian(cost))
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        assert got == pytest.approx(best, abs=1e-12)
