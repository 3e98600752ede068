import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcltta.pointcloud import (PointCloud, SphereBatch, VoteBuffer, accumulate_votes, combine_spheres,
                               finalize_votes, grid_subsample, iter_batches, jitter, sample_spheres)


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.nan]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], colors=[[1.5, 0, 0]])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], labels=[-2])
    with pytest.raises(ValueError):
        PointCloud([[0, 0, 0]], labels=[3], num_classes=3)
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), indices=[4, 4])


# -- grid_subsample -----------------------------------------------------------

def test_grid_subsample_empty():
    out = grid_subsample(PointCloud(np.zeros((0, 3))), 0.2)
    assert len(out.cloud) == 0 and len(out.mapping) == 0


def test_grid_subsample_centroid():
    out = grid_subsample(PointCloud([[0, 0, 0], [0.05, 0, 0]]), 0.2)
    assert len(out.cloud) == 1
    np.testing.assert_allclose(out.cloud.positions[0], [0.025, 0, 0])
    assert list(out.mapping) == [0, 0]


def test_grid_subsample_across_boundary():
    # 0.25 falls in cell 1 along x, 0.0 in cell 0
    out = grid_subsample(PointCloud([[0, 0, 0], [0.25, 0, 0]]), 0.2)
    assert len(out.cloud) == 2


def test_grid_subsample_rejects_bad_cell():
    with pytest.raises(ValueError):
        grid_subsample(PointCloud([[0, 0, 0]]), 0.0)


def test_grid_subsample_majority_label_and_color():
    pos = np.array([[0.01, 0, 0], [0.02, 0, 0], [0.03, 0, 0], [0.5, 0, 0], [0.51, 0, 0]])
    cloud = PointCloud(pos, colors=np.array([[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5], [0, 0, 0], [0, 0, 0]]),
                       labels=[2, 1, 2, -1, -1])
    out = grid_subsample(cloud, 0.2)
    assert list(out.cloud.labels) == [2, -1]
    np.testing.assert_allclose(out.cloud.colors[0], [0.5, 0.5, 0.5])


def test_grid_subsample_tie_breaks_to_smallest_label():
    cloud = PointCloud(np.zeros((4, 3)), labels=[3, 1, 3, 1])
    assert grid_subsample(cloud, 1.0).cloud.labels[0] == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.05, 2.0))
def test_grid_subsample_one_point_per_cell(seed, cell):
    rng = np.random.default_rng(seed)
    cloud = PointCloud(rng.uniform(-3, 3, size=(300, 3)))
    out = grid_subsample(cloud, cell)
    keys = np.floor(out.cloud.positions / cell).astype(np.int64)
    assert len(np.unique(keys, axis=0)) == len(keys)
    # the mapping sends each input point to the cell it occupies
    np.testing.assert_array_equal(keys[out.mapping], np.floor(cloud.positions / cell).astype(np.int64))


# -- sample_spheres -----------------------------------------------------------

def test_small_ball_first_batch_has_everything():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(10, 3))
    pos = 0.9 * d / np.linalg.norm(d, axis=1, keepdims=True) * rng.random((10, 1))
    batches = sample_spheres(PointCloud(pos), radius=15.0, max_points=40000, target_visits=3, seed=0)
    assert len(batches[0]) == 10


def test_sampler_visit_statistics(slab):
    batches = sample_spheres(slab, radius=4.0, max_points=40000, target_visits=3, seed=5)
    visits = np.bincount(np.concatenate([b.parent for b in batches]), minlength=len(slab))
    assert visits.min() >= 1
    assert 2.0 <= visits.mean() <= 4.0


def test_sampler_caps_sphere_size():
    rng = np.random.default_rng(3)
    cloud = PointCloud(rng.uniform(-1, 1, size=(50000, 3)))
    batch = sample_spheres(cloud, radius=15.0, max_points=40000, target_visits=1, seed=1)[0]
    assert len(batch) == 40000
    assert len(np.unique(batch.parent)) == 40000


def test_sampler_invariants(slab):
    radius = 3.0
    batches = sample_spheres(slab, radius=radius, max_points=500, target_visits=2, seed=11)
    for b in batches:
        assert 1 <= len(b) <= 500
        assert np.linalg.norm(b.positions, axis=1).max() <= radius + 1e-9
        np.testing.assert_allclose(b.positions + b.center, slab.positions[b.parent])
        np.testing.assert_allclose(b.features[:, 3:], slab.colors[b.parent])
    covered = np.unique(np.concatenate([b.parent for b in batches]))
    assert len(covered) == len(slab)


def test_sampler_deterministic(slab):
    a = sample_spheres(slab, 4.0, 1000, 2, seed=9)
    b = sample_spheres(slab, 4.0, 1000, 2, seed=9)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.parent, y.parent)


def test_sampler_empty_and_bad_args():
    assert sample_spheres(PointCloud(np.zeros((0, 3))), 1.0, 10, 1, 0) == []
    with pytest.raises(ValueError):
        sample_spheres(PointCloud(np.zeros((1, 3))), 0.0, 10, 1, 0)
    with pytest.raises(ValueError):
        sample_spheres(PointCloud(np.zeros((1, 3))), 1.0, 0, 1, 0)
    with pytest.raises(ValueError):
        sample_spheres(PointCloud(np.zeros((1, 3))), 1.0, 10, 0.5, 0)


def test_batches_group_spheres(slab):
    spheres = sample_spheres(slab, 4.0, 1000, 2, seed=2)
    grouped = list(iter_batches(slab, 4.0, 1000, 2, seed=2, spheres_per_batch=3))
    assert len(grouped) == -(-len(spheres) // 3)
    assert grouped[0].num_spheres == 3
    np.testing.assert_array_equal(grouped[0].parent, np.concatenate([s.parent for s in spheres[:3]]))
    assert list(np.unique(grouped[0].segments)) == [0, 1, 2]


# -- jitter ---------------------------------------------------------------------

def test_jitter_zero_is_identity(slab):
    out = jitter(slab, 0.0, seed=1)
    np.testing.assert_array_equal(out.positions, slab.positions)


def test_jitter_deterministic_and_preserves_attributes(slab):
    a, b = jitter(slab, 0.05, 3), jitter(slab, 0.05, 3)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert len(a) == len(slab)
    np.testing.assert_array_equal(a.labels, slab.labels)
    np.testing.assert_array_equal(a.indices, slab.indices)
    np.testing.assert_array_equal(a.colors, slab.colors)


def test_jitter_noise_level():
    cloud = PointCloud(np.zeros((100000, 3)))
    d = jitter(cloud, 0.05, seed=4).positions
    std = d.std(axis=0)
    assert np.all(np.abs(std - 0.05) < 0.005)


def test_jitter_negative_sigma():
    with pytest.raises(ValueError):
        jitter(PointCloud(np.zeros((1, 3))), -0.1, 0)


# -- votes ----------------------------------------------------------------------

def _batch(parent):
    parent = np.asarray(parent)
    return SphereBatch(parent, np.zeros((len(parent), 3)), np.zeros((len(parent), 3)))


def test_votes_single_batch():
    buf = VoteBuffer(5, 2)
    accumulate_votes(buf, _batch([1, 3]), np.array([[0.3, 0.7], [1.0, 0.0]]))
    assert list(buf.visits) == [0, 1, 0, 1, 0]


def test_votes_additivity():
    probs = np.array([[0.3, 0.7], [0.6, 0.4]])
    once = VoteBuffer(3, 2).accumulate([0, 2], probs)
    twice = VoteBuffer(3, 2).accumulate([0, 2], probs).accumulate([0, 2], probs)
    np.testing.assert_array_equal(twice.probs, 2 * once.probs)


def test_votes_overlap_and_tiebreak():
    buf = VoteBuffer(3, 2)
    buf.accumulate([0, 1], np.array([[1.0, 0.0], [0.0, 1.0]]))
    buf.accumulate([1, 2], np.array([[1.0, 0.0], [0.2, 0.8]]))
    np.testing.assert_array_equal(buf.probs[1], [1.0, 1.0])
    assert buf.visits[1] == 2
    labels, mean = finalize_votes(buf)
    np.testing.assert_allclose(mean[1], [0.5, 0.5])
    assert labels[1] == 0
    assert labels[2] == 1


def test_votes_unvisited_sentinel():
    labels, mean = VoteBuffer(2, 3).accumulate([0], np.array([[0.1, 0.1, 0.8]])).finalize()
    assert labels[1] == -1
    assert not mean[1].any()


def test_votes_errors():
    buf = VoteBuffer(2, 2)
    with pytest.raises(ValueError):
        buf.accumulate([2], np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        buf.accumulate([0], np.array([[0.5, 0.6]]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_votes_rows_sum_to_visits(seed):
    rng = np.random.default_rng(seed)
    buf = VoteBuffer(20, 4)
    for _ in range(5):
        parent = rng.choice(20, size=8, replace=False)
        p = rng.dirichlet(np.ones(4), size=8)
        buf.accumulate(parent, p)
    np.testing.assert_allclose(buf.probs.sum(axis=1), buf.visits, atol=1e-5)
    _, mean = buf.finalize()
    seen = buf.visits > 0
    np.testing.assert_allclose(mean[seen].sum(axis=1), 1.0, atol=1e-5)


def test_combine_single_is_identity():
    b = _batch([1, 2])
    assert combine_spheres([b]) is b
