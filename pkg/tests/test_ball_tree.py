"""
Tests for ball tree construction and the tree-order permutation
"""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ballsparse.exceptions import InvalidArgumentError, RejectedInputError, ShapeError
from ballsparse.processing.geom.ball_tree import (
    SENTINEL,
    PointCloud,
    build_ball_tree,
    mean_intra_ball_distance,
    permute_features,
    random_partition,
    tree_groups,
    unpermute_features,
)
from ballsparse.processing.geom.cloud_io import load_point_cloud, save_point_cloud


def _cloud(n, dim=3, seed=0):
    return PointCloud(np.random.default_rng(seed).standard_normal((n, dim)))


def test_one_dimensional_split_groups_neighbours():
    tree = build_ball_tree(PointCloud(np.array([[0.0], [10.0], [1.0], [11.0]])), ball_size=2)
    assert tree.permutation.tolist() == [0, 2, 1, 3]
    assert tree.inverse_permutation.tolist() == [0, 2, 1, 3]
    assert tree.ball_ranges == [(0, 2), (2, 4)]


def test_sorted_points_keep_their_order():
    tree = build_ball_tree(PointCloud(np.arange(8.0)), ball_size=2)
    assert tree.permutation.tolist() == list(range(8))
    assert tree.n_balls == 4


def test_ball_size_equal_to_n_gives_single_ball():
    tree = build_ball_tree(_cloud(16), ball_size=16)
    assert tree.n_balls == 1
    assert sorted(tree.permutation.tolist()) == list(range(16))


def test_padding_lands_in_final_ball():
    tree = build_ball_tree(PointCloud(np.array([[0.0], [5.0], [1.0]])), ball_size=2)
    assert tree.n_padded == 4
    assert tree.permutation[-1] == SENTINEL
    assert tree.valid_mask.tolist() == [True, True, True, False]
    assert tree.inverse_permutation[3] == SENTINEL


def test_single_point():
    tree = build_ball_tree(PointCloud(np.zeros((1, 3))), ball_size=4)
    assert tree.n_padded == 4
    assert tree.permutation.tolist() == [0, SENTINEL, SENTINEL, SENTINEL]
    assert tree.ball_of(3) == 0
    assert tree.ball_members(0).tolist() == [0, 1, 2, 3]


@pytest.mark.parametrize("ball_size", [0, -2, 2.5, True])
def test_invalid_ball_size(ball_size):
    with pytest.raises(InvalidArgumentError):
        build_ball_tree(_cloud(8), ball_size=ball_size)


def test_non_finite_points_rejected():
    coords = np.zeros((4, 3))
    coords[2, 1] = np.nan
    with pytest.raises(RejectedInputError):
        build_ball_tree(PointCloud(coords), ball_size=2)


def test_empty_cloud_rejected():
    with pytest.raises(ShapeError):
        PointCloud(np.zeros((0, 3)))


def test_permute_rejects_wrong_row_count():
    tree = build_ball_tree(_cloud(8), ball_size=4)
    with pytest.raises(ShapeError):
        permute_features(tree, np.zeros((7, 2)))
    with pytest.raises(ShapeError):
        unpermute_features(tree, np.zeros((7, 2)))


@given(
    n=st.integers(min_value=1, max_value=200),
    ball_size=st.sampled_from([1, 2, 4, 8, 16, 64]),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_permutation_round_trip_and_partition(n, ball_size, seed):
    points = _cloud(n, seed=seed)
    tree = build_ball_tree(points, ball_size)

    assert tree.n_padded % ball_size == 0
    assert tree.n_padded - n < ball_size
    assert sorted(tree.permutation[tree.valid_mask].tolist()) == list(range(n))

    features = np.random.default_rng(seed).standard_normal((n, 3))
    permuted = permute_features(tree, features, fill=7.0)
    assert np.all(permuted[~tree.valid_mask] == 7.0)
    np.testing.assert_array_equal(unpermute_features(tree, permuted), features)

    # every padded slot is in the final ball
    assert np.all(tree.valid_mask[:tree.n_padded - ball_size])


def test_tree_is_deterministic():
    points = _cloud(300, seed=4)
    first = build_ball_tree(points, 16)
    second = build_ball_tree(points, 16)
    np.testing.assert_array_equal(first.permutation, second.permutation)


def test_tie_break_by_original_index():
    tree = build_ball_tree(PointCloud(np.zeros((6, 2))), ball_size=2)
    assert tree.permutation.tolist() == list(range(6))


def test_balls_are_more_local_than_random_groups():
    wins = 0
    for seed in range(20):
        points = _cloud(512, seed=seed)
        tree = build_ball_tree(points, 32)
        tree_distance = mean_intra_ball_distance(points.coords, tree_groups(tree))
        random_distance = mean_intra_ball_distance(
            points.coords, random_partition(512, 32, np.random.default_rng(seed))
        )
        wins += tree_distance < random_distance
    assert wins == 20


def test_point_cloud_file_round_trip(tmp_path):
    points = _cloud(10, seed=1)
    target = np.arange(10.0)
    path = tmp_path / "cloud.txt"
    save_point_cloud(path, points, extra=target)

    loaded, extra = load_point_cloud(path)
    np.testing.assert_allclose(loaded.coords, points.coords)
    np.testing.assert_allclose(extra[:, 0], target)


def test_missing_point_cloud_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_point_cloud(tmp_path / "absent.txt")


def test_point_cloud_file_with_too_few_columns(tmp_path):
    path = tmp_path / "flat.txt"
    path.write_text("1 2\n3 4\n")
    with pytest.raises(ShapeError):
        load_point_cloud(path)
