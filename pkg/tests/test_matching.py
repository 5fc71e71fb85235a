import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import min_weight_full_bipartite_matching

from latticelab.errors import ConfigurationError
from latticelab.matching import sparse_assignment


def _dense_csr(cost):
    n, m = cost.shape
    return np.arange(n + 1) * m, np.tile(np.arange(m), n), cost.reshape(-1)


@pytest.mark.parametrize("seed", range(40))
def test_dense_matches_scipy(seed):
    gen = np.random.default_rng(seed)
    n, m = gen.integers(1, 12), gen.integers(12, 20)
    cost = gen.integers(0, 5, size=(n, m)).astype(float)  # many ties
    match, failed = sparse_assignment(*_dense_csr(cost), m)
    r, c = linear_sum_assignment(cost)
    assert failed == 0
    assert len(set(match)) == n
    assert cost[np.arange(n), match].sum() == pytest.approx(cost[r, c].sum())


@pytest.mark.parametrize("seed", range(40))
def test_sparse_matches_scipy_or_reports_infeasible(seed):
    gen = np.random.default_rng(100 + seed)
    n, m = 15, 18
    mask = gen.random((n, m)) < 0.25
    cost = gen.random((n, m)) + 0.1
    ptr = np.concatenate([[0], np.cumsum(mask.sum(axis=1))])
    idx = np.concatenate([np.flatnonzero(row) for row in mask])
    val = cost[mask]
    match, failed = sparse_assignment(ptr, idx, val, m)
    try:
        r, c = min_weight_full_bipartite_matching(csr_matrix(np.where(mask, cost, 0.0)))
    except ValueError:
        assert failed > 0
        return
    assert failed == 0
    assert np.all(mask[np.arange(n), match])
    assert cost[np.arange(n), match].sum() == pytest.approx(cost[r, c].sum())


def test_empty_row_is_unmatched():
    match, failed = sparse_assignment(np.array([0, 1, 1]), np.array([0]), np.array([1.0]), 2)
    assert failed == 1 and match[0] == 0 and match[1] == -1


def test_rejects_bad_csr():
    with pytest.raises(ConfigurationError):
        sparse_assignment(np.array([0, 2]), np.array([0]), np.array([1.0]), 1)
    with pytest.raises(ConfigurationError):
        sparse_assignment(np.array([0, 1]), np.array([3]), np.array([1.0]), 2)
