import numpy as np
import pytest

from dstgcn.data import (
    DataError,
    SpeedMatrix,
    describe_dataset,
    load_availability,
    load_speed_matrix,
    ring_graph,
    save_availability,
    save_speed_matrix,
    synthesize_dataset,
)


def test_load_plain_header(tmp_path):
    (tmp_path / "s.csv").write_text("node_0,node_1\n1.5,2\n3,4.25\n5,6\n")
    sm = load_speed_matrix(tmp_path / "s.csv")
    assert sm.values.shape == (2, 3)
    assert sm.values[:, 0].tolist() == [1.5, 2.0]


def test_load_rejects_nan_with_location(tmp_path):
    (tmp_path / "s.csv").write_text("a,b\n1,2\n3,nan\n")
    with pytest.raises(DataError, match=r":3: column 2 \(b\)"):
        load_speed_matrix(tmp_path / "s.csv")


def test_load_rejects_ragged_rows(tmp_path):
    (tmp_path / "s.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match=":3:"):
        load_speed_matrix(tmp_path / "s.csv")


def test_node_ids_checked_against_graph(tmp_path):
    (tmp_path / "s.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        load_speed_matrix(tmp_path / "s.csv", graph=ring_graph(2))


def test_round_trip_is_exact(tmp_path):
    values = np.random.default_rng(0).normal(55, 10, (4, 30))
    values[1, 3] = 0.0
    sm = SpeedMatrix(values, [f"n{i}" for i in range(4)])
    save_speed_matrix(sm, tmp_path / "s.csv")
    back = load_speed_matrix(tmp_path / "s.csv")
    assert np.array_equal(back.values, values)
    assert back.node_ids == sm.node_ids
    assert back.time_labels() == sm.time_labels()


def test_speed_matrix_rejects_non_finite():
    with pytest.raises(DataError, match="node 'b', step 1"):
        SpeedMatrix(np.array([[1.0, 2.0], [3.0, np.inf]]), ["a", "b"])


def test_availability_round_trip(tmp_path):
    mask = np.random.default_rng(1).random((3, 7)) > 0.5
    save_availability(mask, tmp_path / "a.csv")
    assert np.array_equal(load_availability(tmp_path / "a.csv", (3, 7)), mask)
    with pytest.raises(DataError):
        load_availability(tmp_path / "a.csv", (3, 8))


def test_synthetic_noise_free_signal():
    sm, g = synthesize_dataset(6, 600, seed=0, noise=0.0, steps_per_day=100)
    X = sm.values
    np.testing.assert_allclose(X[:, 100:200], X[:, :100], atol=1e-12)
    t = np.arange(600)
    np.testing.assert_allclose(X[2], 55 + 10 * np.sin(2 * np.pi * (t / 100 + 2 / 6)), atol=1e-12)
    assert g.num_nodes == 6


def test_synthetic_seeded_and_adjacent_correlation():
    a, g = synthesize_dataset(10, 2880, seed=4)
    b, _ = synthesize_dataset(10, 2880, seed=4)
    assert np.array_equal(a.values, b.values)
    corr = np.corrcoef(a.values)
    adjacent = (g.adjacency + g.adjacency.T) > 0
    off = ~np.eye(10, dtype=bool)
    assert corr[adjacent].mean() > corr[off & ~adjacent].mean()


def test_describe():
    info = describe_dataset(SpeedMatrix(np.zeros((2, 3)), ["a", "b"]))
    assert info["observed_fraction"] == 0 and info["mean"] is None and info["std"] is None
    info = describe_dataset(SpeedMatrix(np.array([[1.0, 0.0], [3.0, 5.0]]), ["a", "b"]))
    assert info["nodes"] == 2 and info["observed_fraction"] == 0.75 and info["mean"] == 3.0
