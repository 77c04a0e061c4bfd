import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradsketch import _ops
from gradsketch.sketch import (
    GradientVector,
    SketchKind,
    SketchSpec,
    benchmark_projection,
    column_hashes,
    dense_materialize,
    derive_column_hash,
    fjlt_materialize,
    fjlt_project,
    fwht,
    gaussian_project,
    materialize,
    pairwise_relative_errors,
    project,
    project_batch,
    rademacher_project,
    random_sparse_inputs,
    sjlt_materialize,
    sjlt_project,
    sjlt_project_batch,
)

from conftest import rel_err


# --- frozen values -----------------------------------------------------------


def test_sjlt_hash_table_frozen():
    spec = SketchSpec(SketchKind.SJLT, 8, 4, 2, seed=3)
    rows, signs = column_hashes(spec, np.arange(8))
    assert rows.tolist() == [[0, 3], [1, 3], [0, 1], [1, 0], [3, 2], [3, 1], [0, 1], [0, 3]]
    assert signs.tolist() == [[-1, -1], [-1, 1], [-1, 1], [-1, 1], [-1, -1], [1, -1], [1, 1], [-1, -1]]


def test_sjlt_projection_frozen_and_hand_checked():
    # worked by hand from the hash table above
    spec = SketchSpec(SketchKind.SJLT, 8, 4, 2, seed=3)
    out = sjlt_project(spec, np.arange(1.0, 9.0))
    np.testing.assert_array_equal(out, [-1.0, -2.0, -5.0, -6.0])


def test_gaussian_and_fjlt_frozen():
    g = np.arange(1.0, 9.0)
    np.testing.assert_allclose(
        gaussian_project(SketchSpec(SketchKind.GAUSSIAN, 8, 3, seed=1), g),
        [-12.76833457, -15.38565618, -1.85755864],
        rtol=1e-8,
    )
    np.testing.assert_allclose(
        fjlt_project(SketchSpec(SketchKind.FJLT, 6, 3, seed=1), g[:6]),
        [-0.35355339, 7.4246212, -1.06066017],
        rtol=1e-8,
    )


def test_fwht_small_cases():
    np.testing.assert_array_equal(fwht(np.array([1.0, 1.0])), [2.0, 0.0])
    np.testing.assert_array_equal(fwht(np.array([1.0, 0, 0, 0])), [1.0, 1, 1, 1])
    np.testing.assert_array_equal(fwht(np.array([1.0, 2, 3, 4])), [10.0, -2, -4, 0])


# --- oracle equivalence ------------------------------------------------------


@pytest.mark.parametrize("s", [1, 2, 4])
def test_sjlt_matches_materialized(rng, s):
    spec = SketchSpec(SketchKind.SJLT, 4096, 256, s, seed=11)
    g = rng.standard_normal(4096)
    S = sjlt_materialize(spec)
    assert rel_err(sjlt_project(spec, g), S @ g) <= 1e-12
    assert np.all(np.diff(S.indptr) == s)


def test_sjlt_sparse_dense_batch_bit_identical(rng):
    spec = SketchSpec(SketchKind.SJLT, 2048, 128, 2, seed=5)
    G = random_sparse_inputs(6, 2048, 0.1, rng)
    batch = sjlt_project_batch(spec, G)
    for i, g in enumerate(G):
        dense = sjlt_project(spec, g)
        sparse = sjlt_project(spec, GradientVector.sparsify(g))
        assert np.array_equal(dense, sparse)
        assert np.array_equal(dense, batch[i])


@pytest.mark.parametrize("kind", [SketchKind.GAUSSIAN, SketchKind.RADEMACHER, SketchKind.FJLT])
def test_dense_kinds_match_materialized(rng, kind):
    spec = SketchSpec(kind, 1000, 64, seed=2, normalize=True)
    g = rng.standard_normal(1000)
    assert rel_err(project(spec, g), materialize(spec) @ g) <= 1e-12


def test_rademacher_entries_are_signs():
    P = dense_materialize(SketchSpec(SketchKind.RADEMACHER, 50, 10, seed=0))
    assert set(np.unique(P)) == {-1.0, 1.0}
    np.testing.assert_allclose(
        rademacher_project(SketchSpec(SketchKind.RADEMACHER, 50, 10, seed=0), np.eye(50)[3]), P[:, 3]
    )


def test_fjlt_scale_conventions():
    # unnormalized rows have unit-norm columns over the padded Hadamard basis
    P = fjlt_materialize(SketchSpec(SketchKind.FJLT, 16, 16, seed=4))
    np.testing.assert_allclose(P.T @ P, np.eye(16), atol=1e-12)


def test_project_batch_matches_single(rng):
    G = rng.standard_normal((5, 300))
    for kind in SketchKind:
        spec = SketchSpec(kind, 300, 32, seed=9)
        batch = project_batch(spec, G)
        for i in range(5):
            assert rel_err(batch[i], project(spec, G[i])) <= 1e-12


def test_derive_column_hash_matches_table():
    spec = SketchSpec(SketchKind.SJLT, 100, 16, 3, seed=7)
    rows, signs = column_hashes(spec, np.arange(100))
    r, s = derive_column_hash(spec, 42)
    assert r.tolist() == rows[42].tolist() and s.tolist() == signs[42].tolist()


# --- properties --------------------------------------------------------------


@given(
    st.integers(1, 300),
    st.integers(1, 64),
    st.integers(1, 4),
    st.integers(0, 2**63),
)
def test_sjlt_columns_have_s_distinct_rows(p, k, s, seed):
    k = min(k, p)
    s = min(s, k)
    rows, signs = column_hashes(SketchSpec(SketchKind.SJLT, p, k, s, seed), np.arange(p))
    assert rows.shape == (p, s)
    assert all(len(set(r)) == s for r in rows.tolist())
    assert rows.min() >= 0 and rows.max() < k
    assert set(np.unique(signs)) <= {-1, 1}


@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_projection_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 64))
    for kind in SketchKind:
        spec = SketchSpec(kind, 64, 16, seed=seed)
        lhs = project(spec, a * x + b * y)
        rhs = a * project(spec, x) + b * project(spec, y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


@given(st.integers(0, 2**32))
def test_projection_is_pure_function_of_seed(seed):
    g = np.linspace(-1, 1, 97)
    for kind in SketchKind:
        spec = SketchSpec(kind, 97, 8, seed=seed)
        assert np.array_equal(project(spec, g), project(spec, g))


@given(st.integers(0, 8).map(lambda e: 2**e))
def test_fwht_involution(n):
    x = np.random.default_rng(n).standard_normal(n)
    np.testing.assert_allclose(fwht(fwht(x.copy())) / n, x, atol=1e-12)


def test_sjlt_ops_scale_with_nnz_not_k(rng):
    g = random_sparse_inputs(1, 4096, 0.25, rng)[0]
    counts = []
    for k in (64, 512):
        with _ops.count_ops() as ops:
            sjlt_project(SketchSpec(SketchKind.SJLT, 4096, k, 2, seed=0), GradientVector.sparsify(g))
        counts.append(ops["sjlt"])
    assert counts == [2 * 1024, 2 * 1024]


def test_dense_ops_are_k_times_p():
    with _ops.count_ops() as ops:
        gaussian_project(SketchSpec(SketchKind.GAUSSIAN, 500, 20, seed=0), np.ones(500))
    assert ops["gaussian"] == 20 * 500


# --- errors and edges --------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        SketchSpec(SketchKind.SJLT, 10, 4, sparsity=5)
    with pytest.raises(ValueError):
        SketchSpec(SketchKind.SJLT, 0, 4)
    with pytest.raises(ValueError):
        SketchSpec(SketchKind.FJLT, 5, 9)
    with pytest.warns(UserWarning):
        SketchSpec(SketchKind.GAUSSIAN, 4, 8)


def test_dim_mismatch_raises():
    with pytest.raises(ValueError, match="dim"):
        sjlt_project(SketchSpec(SketchKind.SJLT, 10, 4), np.ones(11))


def test_zero_and_empty_sparse_inputs():
    spec = SketchSpec(SketchKind.SJLT, 10, 4)
    assert np.array_equal(sjlt_project(spec, np.zeros(10)), np.zeros(4))
    empty = GradientVector.sparse(np.array([], dtype=np.int64), np.array([]), 10)
    assert np.array_equal(sjlt_project(spec, empty), np.zeros(4))


def test_gradient_vector_validation():
    with pytest.raises(ValueError):
        GradientVector.sparse([3, 1], [1.0, 2.0], 5)
    with pytest.raises(ValueError):
        GradientVector.sparse([0, 5], [1.0, 2.0], 5)
    g = GradientVector.sparsify(np.array([0.0, 2.0, 0.0, -1.0]))
    assert g.nnz == 2 and g.to_dense().tolist() == [0.0, 2.0, 0.0, -1.0]


def test_pairwise_relative_errors_identity(rng):
    X = rng.standard_normal((5, 10))
    assert np.all(pairwise_relative_errors(X, X) == 0)


def test_benchmark_projection_row(rng):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = benchmark_projection(SketchSpec(SketchKind.SJLT, 512, 64, seed=0), 0.5, trials=1, n_vectors=4)
    assert res.op_count == 256 and res.kind == "sjlt"
    assert 0 <= res.median_relative_error < 1
