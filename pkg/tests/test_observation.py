"""Observation maps, delay-coordinate neighbors, kernel smoothing."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omec.errors import (
    DimensionMismatchError,
    InsufficientDataError,
    InvalidArgumentError,
)
from omec.observation import (
    ComponentwiseObservation,
    CorrectedObservationFunction,
    DelayIndex,
    IdentityObservation,
    LinearObservation,
    LocalizedDelayIndex,
    localized_smooth,
    neighbor_weights,
    read_correction_csv,
    smooth_residuals,
    write_correction_csv,
)


def brute_force_neighbors(vectors, qpos, n):
    """Reference ordering: distance, then the queried vector itself, then time."""
    d = np.linalg.norm(vectors - vectors[qpos], axis=1)
    not_self = (np.arange(len(vectors)) != qpos).astype(int)
    order = np.lexsort((np.arange(len(vectors)), not_self, d))
    return order[:n], d[order[:n]]


# ---------------------------------------------------------------- functions


def test_identity_returns_copy():
    f = IdentityObservation(3)
    x = np.ones((2, 3))
    y = f(x)
    y[0, 0] = 5.0
    assert x[0, 0] == 1.0
    assert f.describe() == "identity"


def test_componentwise_values():
    f = ComponentwiseObservation([("sin", None), ("shift", -6.0), ("cos", None)])
    x = np.array([[0.5, 2.0, -1.0]])
    assert np.allclose(f(x), [[np.sin(0.5), -4.0, np.cos(-1.0)]])
    assert f.describe() == "sin,shift:-6,cos"
    with pytest.raises(InvalidArgumentError):
        ComponentwiseObservation([("tanh", None)])


def test_linear_observation():
    c = np.array([[1.0, 2.0], [0.0, 1.0], [3.0, 0.0]])
    f = LinearObservation(c)
    x = np.array([1.0, -1.0])
    assert np.allclose(f(x), c @ x)
    assert f.dim_in == 2 and f.dim_out == 3


def test_corrected_function_binds_step():
    base = IdentityObservation(2)
    table = np.arange(10.0).reshape(5, 2)
    f = CorrectedObservationFunction(base, table)
    x = np.zeros((3, 2))
    assert np.allclose(f.at_step(2)(x), table[2])
    with pytest.raises(InvalidArgumentError):
        f.at_step(5)
    with pytest.raises(InvalidArgumentError):
        f(x)  # unbound
    with pytest.raises(DimensionMismatchError):
        CorrectedObservationFunction(base, np.zeros((5, 3)))


def test_observation_dim_check():
    with pytest.raises(DimensionMismatchError):
        IdentityObservation(3)(np.zeros((4, 2)))


# ------------------------------------------------------------------- index


def test_delay_vector_layout():
    # vector at step k stacks y_k, y_{k-1}, ..., y_{k-d}
    vals = np.arange(12.0).reshape(6, 2)
    idx = DelayIndex(vals, delays=2)
    assert idx.valid_range == (2, 5)
    assert np.array_equal(idx.vectors[0], [4, 5, 2, 3, 0, 1])
    assert np.array_equal(idx.vectors[3], [10, 11, 8, 9, 6, 7])


def test_knn_matches_brute_force():
    rng = np.random.default_rng(11)
    vals = rng.normal(size=(100, 2))
    for delays in (0, 2):
        idx = DelayIndex(vals, delays)
        nbs, wts = idx.neighbors_all(7)
        for k in range(idx.delays, 100):
            ref_pos, ref_dist = brute_force_neighbors(idx.vectors, k - delays, 7)
            qi, qd = idx.query(k, 7)
            assert np.array_equal(qi, ref_pos + delays)
            assert np.allclose(qd, ref_dist)
            assert np.array_equal(nbs[k - delays], ref_pos + delays)


def test_knn_distance_ties_resolved_by_time_index():
    # duplicated scalar series forces exact distance ties
    vals = np.array([[0.0], [1.0], [0.0], [1.0], [0.0], [2.0]])
    idx = DelayIndex(vals, delays=0)
    nb, dist = idx.query(2, 3)
    # self first, then equal-distance steps by ascending time
    assert nb[0] == 2 and dist[0] == 0.0
    assert list(nb[1:]) == [0, 4]


def test_self_neighbor_identity():
    rng = np.random.default_rng(12)
    idx = DelayIndex(rng.normal(size=(60, 3)), delays=1)
    nbs, wts = idx.neighbors_all(5)
    lo = idx.delays
    for k in range(lo, 60):
        assert nbs[k - lo][0] == k
        assert wts[k - lo][0] == wts[k - lo].max()


def test_query_validates_range_and_n():
    idx = DelayIndex(np.random.default_rng(0).normal(size=(20, 1)), delays=2)
    with pytest.raises(InvalidArgumentError):
        idx.query(1, 3)
    with pytest.raises(InvalidArgumentError):
        idx.query(2, 0)
    with pytest.raises(InvalidArgumentError):
        idx.query(2, idx.size + 1)
    with pytest.raises(InsufficientDataError):
        DelayIndex(np.zeros((2, 1)), delays=5)


# ----------------------------------------------------------------- weights


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.0, 1e6, allow_nan=False), min_size=1, max_size=20),
    st.floats(1e-3, 1e3),
)
def test_weights_normalized_and_scale_invariant(dists, scale):
    d = np.sort(np.array(dists))
    w = neighbor_weights(d)
    assert w.shape == d.shape
    assert np.all(w >= 0)
    assert np.isclose(w.sum(), 1.0, atol=1e-12)
    assert np.allclose(neighbor_weights(scale * d), w, atol=1e-9)


def test_weights_zero_distances_uniform():
    w = neighbor_weights(np.zeros(4))
    assert np.allclose(w, 0.25)


def test_weights_reject_bad_input():
    with pytest.raises(InvalidArgumentError):
        neighbor_weights(np.array([-1.0, 2.0]))
    with pytest.raises(InvalidArgumentError):
        neighbor_weights(np.array([np.inf, 1.0]))
    with pytest.raises(InvalidArgumentError):
        neighbor_weights(np.array([]))


def test_weights_decrease_with_distance():
    w = neighbor_weights(np.array([0.0, 1.0, 2.0, 5.0]))
    assert np.all(np.diff(w) < 0)


# --------------------------------------------------------------- smoothing


def test_smoothing_linearity():
    rng = np.random.default_rng(13)
    idx = DelayIndex(rng.normal(size=(80, 2)), delays=2)
    r1 = rng.normal(size=(80, 2))
    r2 = rng.normal(size=(80, 2))
    a, b = 1.7, -0.4
    lhs = smooth_residuals(idx, a * r1 + b * r2, 9)
    rhs = a * smooth_residuals(idx, r1, 9) + b * smooth_residuals(idx, r2, 9)
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_smoothing_preserves_constants():
    rng = np.random.default_rng(14)
    idx = DelayIndex(rng.normal(size=(50, 2)), delays=1)
    const = np.tile([2.0, -3.0], (50, 1))
    out = smooth_residuals(idx, const, 6)
    lo = idx.delays
    assert np.allclose(out[lo:], const[lo:], atol=1e-12)
    assert np.all(out[:lo] == 0.0)


def test_smoothing_matches_direct_weighted_average():
    rng = np.random.default_rng(15)
    idx = DelayIndex(rng.normal(size=(40, 1)), delays=1)
    raw = rng.normal(size=(40, 1))
    out = smooth_residuals(idx, raw, 5)
    nbs, wts = idx.neighbors_all(5)
    for k in range(1, 40):
        expect = (wts[k - 1][:, None] * raw[nbs[k - 1]]).sum(axis=0)
        assert np.allclose(out[k], expect, atol=1e-12)


def test_smoothing_shape_check():
    idx = DelayIndex(np.random.default_rng(0).normal(size=(30, 2)), delays=1)
    with pytest.raises(DimensionMismatchError):
        smooth_residuals(idx, np.zeros((29, 2)), 4)


# ------------------------------------------------------------ localization


def test_localized_index_uses_ring_columns():
    rng = np.random.default_rng(16)
    vals = rng.normal(size=(60, 5))
    loc = LocalizedDelayIndex(vals, delays=1)
    assert len(loc.indexes) == 5
    ring2 = vals[:, [1, 2, 3]]
    assert np.array_equal(loc.indexes[2].vectors, DelayIndex(ring2, 1).vectors)
    ring0 = vals[:, [4, 0, 1]]  # cyclic wrap at node 0
    assert np.array_equal(loc.indexes[0].vectors, DelayIndex(ring0, 1).vectors)


def test_localized_smooth_matches_per_node_scalar_smoothing():
    rng = np.random.default_rng(17)
    vals = rng.normal(size=(50, 4))
    raw = rng.normal(size=(50, 4))
    loc = LocalizedDelayIndex(vals, delays=2)
    out = localized_smooth(loc, raw, 6)
    for i in range(4):
        per_node = smooth_residuals(loc.indexes[i], raw[:, i : i + 1], 6)
        assert np.allclose(out[:, i], per_node[:, 0], atol=1e-12)


def test_localized_needs_three_nodes():
    with pytest.raises(InvalidArgumentError):
        LocalizedDelayIndex(np.zeros((30, 2)), delays=1)


# ------------------------------------------------------------------- table


def test_correction_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(18)
    from omec.observation import CorrectionTable

    raw = rng.normal(size=(20, 2))
    raw[:3] = np.nan
    smoothed = rng.normal(size=(20, 2))
    smoothed[:3] = 0.0
    table = CorrectionTable(iteration=4, raw=raw, smoothed=smoothed, delays=3)
    p = tmp_path / "c.csv"
    write_correction_csv(p, table)
    back = read_correction_csv(p, iteration=4)
    assert back.delays == 3
    assert np.allclose(back.raw[3:], raw[3:], rtol=0, atol=0)
    assert np.allclose(back.smoothed, smoothed, rtol=0, atol=0)
