"""Point-cloud container and the batching machinery around it.

Grid subsampling, overlapping spherical mini-batches, jitter augmentation
and accumulation of overlapping predictions.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional

import numpy as np
from scipy.spatial import cKDTree

IGNORE = -1


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    indices: Optional[np.ndarray] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != n:
                raise ValueError("colors length does not match positions")
            if n and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
                raise ValueError("colors must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise ValueError("labels length does not match positions")
            if n and self.labels.min() < IGNORE:
                raise ValueError("labels below -1")
            if n and self.num_classes is not None and self.labels.max() >= self.num_classes:
                raise ValueError(f"label {self.labels.max()} outside 0..{self.num_classes - 1}")
        if self.indices is None:
            self.indices = np.arange(n, dtype=np.int64)
        else:
            self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
            if len(self.indices) != n:
                raise ValueError("indices length does not match positions")
            if len(np.unique(self.indices)) != n:
                raise ValueError("global indices must be unique")

    def __len__(self):
        return len(self.positions)

    @property
    def has_colors(self):
        return self.colors is not None

    @property
    def has_labels(self):
        return self.labels is not None

    def subset(self, mask_or_index) -> "PointCloud":
        sel = mask_or_index if isinstance(mask_or_index, slice) else np.asarray(mask_or_index)
        return PointCloud(
            positions=self.positions[sel],
            colors=None if self.colors is None else self.colors[sel],
            labels=None if self.labels is None else self.labels[sel],
            indices=self.indices[sel],
            num_classes=self.num_classes,
        )

    def features(self, use_colors: bool) -> np.ndarray:
        if use_colors:
            if self.colors is None:
                raise ValueError("network expects colors but the cloud has none")
            return np.hstack([self.positions, self.colors])
        return self.positions.copy()


@dataclass
class SphereBatch:
    """Points of one or more spheres, each centered on its own sphere center.

    ``segments`` gives the sphere id of every row (``None`` means a single
    sphere); context pooling in the network runs per segment.
    """
    parent: np.ndarray            # row indices into the sampled cloud
    positions: np.ndarray
    features: np.ndarray
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    segments: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.parent)

    @property
    def num_spheres(self):
        return 1 if self.segments is None else int(self.segments.max()) + 1

    def with_positions(self, positions: np.ndarray) -> "SphereBatch":
        """Copy with new centered positions; the xyz feature columns follow."""
        feats = self.features.copy()
        feats[:, :3] = positions
        return replace(self, positions=positions, features=feats)


@dataclass
class SubsampleResult:
    cloud: PointCloud
    mapping: np.ndarray           # input row -> output row


def grid_subsample(cloud: PointCloud, cell: float) -> SubsampleResult:
    """One point per occupied cubic cell.

    Position and color are cell means, the label is the majority over
    non-ignore members (smallest class id on ties, -1 if every member is
    ignored). ``mapping`` sends each input row to its representative.
    """
    if not cell > 0:
        raise ValueError(f"cell must be positive, got {cell}")
    n = len(cloud)
    if n == 0:
        empty = PointCloud(np.zeros((0, 3)),
                           colors=None if cloud.colors is None else np.zeros((0, 3)),
                           labels=None if cloud.labels is None else np.zeros(0, np.int64),
                           num_classes=cloud.num_classes)
        return SubsampleResult(empty, np.zeros(0, np.int64))

    keys = np.floor(cloud.positions / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)

    def cell_mean(values):
        out = np.empty((m, values.shape[1]))
        for d in range(values.shape[1]):
            out[:, d] = np.bincount(inverse, weights=values[:, d], minlength=m)
        return out / counts[:, None]

    positions = cell_mean(cloud.positions)
    colors = None
    if cloud.colors is not None:
        colors = np.clip(cell_mean(cloud.colors), 0.0, 1.0)
    labels = None
    if cloud.labels is not None:
        labels = np.full(m, IGNORE, dtype=np.int64)
        valid = cloud.labels >= 0
        if valid.any():
            k = int(cloud.labels.max()) + 1
            votes = np.bincount(inverse[valid] * k + cloud.labels[valid], minlength=m * k).reshape(m, k)
            has = votes.sum(axis=1) > 0
            labels[has] = np.argmax(votes[has], axis=1)
    out = PointCloud(positions, colors, labels, num_classes=cloud.num_classes)
    return SubsampleResult(out, inverse.astype(np.int64))


def sample_spheres(cloud: PointCloud, radius: float, max_points: int,
                   target_visits: float, seed: int,
                   use_colors: Optional[bool] = None) -> List[SphereBatch]:
    """Overlapping spherical batches until every point is covered.

    Centers are the least-visited points (ties broken uniformly at random),
    and sampling stops once the minimum visit count is at least 1 and the
    mean reaches ``target_visits``. Spheres holding more than ``max_points``
    are subsampled uniformly without replacement.
    """
    return list(iter_spheres(cloud, radius, max_points, target_visits, seed, use_colors))


def iter_spheres(cloud, radius, max_points, target_visits, seed, use_colors=None) -> Iterator[SphereBatch]:
    if not radius > 0:
        raise ValueError("radius must be positive")
    if max_points < 1:
        raise ValueError("max_points must be at least 1")
    if target_visits < 1:
        raise ValueError("target_visits must be at least 1")
    n = len(cloud)
    if n == 0:
        return
    if use_colors is None:
        use_colors = cloud.has_colors
    feats = cloud.features(use_colors)
    rng = np.random.default_rng(seed)
    tree = cKDTree(cloud.positions)
    visits = np.zeros(n, dtype=np.int64)
    total = 0
    while True:
        low = visits.min()
        if low >= 1 and total >= target_visits * n:
            break
        candidates = np.flatnonzero(visits == low)
        center = cloud.positions[candidates[rng.integers(len(candidates))]]
        members = np.asarray(tree.query_ball_point(center, radius), dtype=np.int64)
        members.sort()
        if len(members) > max_points:
            members = np.sort(rng.choice(members, size=max_points, replace=False))
        visits[members] += 1
        total += len(members)
        centered = cloud.positions[members] - center
        f = feats[members].copy()
        f[:, :3] = centered
        yield SphereBatch(parent=members, positions=centered, features=f, center=center.copy())


def combine_spheres(spheres: List[SphereBatch]) -> SphereBatch:
    """Stack spheres into one batch, tagging rows with their sphere id."""
    if not spheres:
        raise ValueError("nothing to combine")
    if len(spheres) == 1:
        return spheres[0]
    return SphereBatch(
        parent=np.concatenate([s.parent for s in spheres]),
        positions=np.vstack([s.positions for s in spheres]),
        features=np.vstack([s.features for s in spheres]),
        center=np.vstack([s.center for s in spheres]),
        segments=np.concatenate([np.full(len(s), i, dtype=np.int64) for i, s in enumerate(spheres)]),
    )


def iter_batches(cloud, radius, max_points, target_visits, seed, spheres_per_batch=1,
                 use_colors=None) -> Iterator[SphereBatch]:
    """Group consecutive sampler spheres into batches of ``spheres_per_batch``."""
    if spheres_per_batch < 1:
        raise ValueError("spheres_per_batch must be at least 1")
    group = []
    for sphere in iter_spheres(cloud, radius, max_points, target_visits, seed, use_colors):
        group.append(sphere)
        if len(group) == spheres_per_batch:
            yield combine_spheres(group)
            group = []
    if group:
        yield combine_spheres(group)


def jitter(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    """Add i.i.d. Gaussian noise of std ``sigma`` to every coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = cloud.subset(slice(None))
    if sigma > 0:
        rng = np.random.default_rng(seed)
        out.positions = cloud.positions + rng.normal(0.0, sigma, size=cloud.positions.shape)
    return out


def jitter_batch(batch: SphereBatch, sigma: float, seed) -> SphereBatch:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return batch.with_positions(batch.positions.copy())
    rng = np.random.default_rng(seed)
    return batch.with_positions(batch.positions + rng.normal(0.0, sigma, size=batch.positions.shape))


class VoteBuffer:
    """Sum of per-visit class probabilities and visit counts per point."""

    def __init__(self, num_points: int, num_classes: int):
        self.probs = np.zeros((num_points, num_classes))
        self.visits = np.zeros(num_points, dtype=np.int64)

    @property
    def num_classes(self):
        return self.probs.shape[1]

    def accumulate(self, parent: np.ndarray, probs: np.ndarray) -> "VoteBuffer":
        parent = np.asarray(parent, dtype=np.int64)
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(parent), self.num_classes):
            raise ValueError(f"probs shape {probs.shape} does not match batch")
        if len(parent) and (parent.min() < 0 or parent.max() >= len(self.visits)):
            raise ValueError("batch index out of range for vote buffer")
        if len(parent) and np.abs(probs.sum(axis=1) - 1.0).max() > 1e-5:
            raise ValueError("probability rows must sum to 1")
        np.add.at(self.probs, parent, probs)
        np.add.at(self.visits, parent, 1)
        return self

    def finalize(self):
        """Return (labels, mean probabilities); unvisited rows get -1 and zeros."""
        mean = np.zeros_like(self.probs)
        seen = self.visits > 0
        mean[seen] = self.probs[seen] / self.visits[seen, None]
        labels = np.full(len(self.visits), IGNORE, dtype=np.int64)
        labels[seen] = np.argmax(mean[seen], axis=1)
        return labels, mean


def accumulate_votes(buffer: VoteBuffer, batch: SphereBatch, probs: np.ndarray) -> VoteBuffer:
    return buffer.accumulate(batch.parent, probs)


def finalize_votes(buffer: VoteBuffer):
    return buffer.finalize()
