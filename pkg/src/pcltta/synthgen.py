"""Procedural labeled scenes and controllable domain shifts.

Scenes are a noisy ground plane with box buildings, ellipsoidal tree
crowns on trunks, thin poles and rounded car bodies. Every surface sample
carries an outward normal internally; the normal decides what an aerial or
street-level viewpoint can see, but it is never stored on the cloud.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .pointcloud import PointCloud, jitter

CLASSES = ("ground", "building", "vegetation", "pole", "car")
CLASS_ID = {name: i for i, name in enumerate(CLASSES)}
VIEWPOINTS = ("none", "aerial", "street")

DEFAULT_PALETTE = {
    "ground": ((0.42, 0.40, 0.37), 0.05),
    "building": ((0.72, 0.52, 0.42), 0.07),
    "vegetation": ((0.28, 0.48, 0.22), 0.07),
    "pole": ((0.58, 0.58, 0.62), 0.05),
    "car": ((0.25, 0.30, 0.55), 0.12),
}
DEFAULT_COUNTS = {"building": 6, "vegetation": 14, "pole": 10, "car": 10}

# surfaces with a normal z-component above this face the sky
_UP = 0.5
STREET_SENSOR_HEIGHT = 2.5


@dataclass
class SceneSpec:
    extent: float = 60.0
    classes: Tuple[str, ...] = CLASSES
    counts: Dict[str, int] = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    density: float = 40.0
    palette: Dict[str, tuple] = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if not self.classes:
            raise ValueError("a scene needs at least one class")
        unknown = [c for c in self.classes if c not in CLASS_ID]
        if unknown:
            raise ValueError(f"unknown classes {unknown}; choose from {CLASSES}")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        if not self.density > 0:
            raise ValueError("density must be positive")
        for name, n in self.counts.items():
            if name not in CLASS_ID or name == "ground":
                raise ValueError(f"object counts apply to {CLASSES[1:]}, got {name!r}")
            if int(n) < 0:
                raise ValueError(f"negative count for {name}")
        palette = dict(DEFAULT_PALETTE)
        for name, entry in (self.palette or {}).items():
            mean, spread = entry
            palette[name] = (tuple(float(v) for v in mean), float(spread))
        self.palette = palette

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneSpec":
        allowed = {"extent", "classes", "counts", "density", "palette"}
        extra = set(doc) - allowed
        if extra:
            raise ValueError(f"unknown SceneSpec fields {sorted(extra)}")
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        d["classes"] = list(self.classes)
        d["palette"] = {k: [list(m), s] for k, (m, s) in self.palette.items()}
        return d

    def count(self, name):
        return int(self.counts.get(name, 0)) if name in self.classes else 0


@dataclass
class ShiftSpec:
    density_factor: float = 1.0
    viewpoint: str = "none"
    occlusion: float = 0.0
    color_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    color_gain: float = 1.0
    jitter_sigma: float = 0.0
    class_dropout: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.color_offset = tuple(float(v) for v in self.color_offset)
        if not self.density_factor > 0:
            raise ValueError("density_factor must be positive")
        if self.viewpoint not in VIEWPOINTS:
            raise ValueError(f"viewpoint must be one of {VIEWPOINTS}")
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError("occlusion must lie in [0, 1]")
        if len(self.color_offset) != 3:
            raise ValueError("color_offset needs three components")
        if self.color_gain < 0:
            raise ValueError("color_gain must be non-negative")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be non-negative")
        for name, p in self.class_dropout.items():
            if name not in CLASS_ID:
                raise ValueError(f"unknown class {name!r} in class_dropout")
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "ShiftSpec":
        allowed = set(cls.__dataclass_fields__)
        extra = set(doc) - allowed
        if extra:
            raise ValueError(f"unknown ShiftSpec fields {sorted(extra)}")
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        d["color_offset"] = list(self.color_offset)
        return d


# -- surface samplers -------------------------------------------------------
# Each returns (points, normals) for a surface sampled at `density` pts/m^2.

def _n(area, density):
    return max(int(round(area * density)), 0)


def _rect(rng, origin, u, v, normal, density):
    area = np.linalg.norm(u) * np.linalg.norm(v)
    n = _n(area, density)
    st = rng.random((n, 2))
    pts = origin + st[:, :1] * u + st[:, 1:] * v
    return pts, np.tile(normal, (n, 1))


def _building(rng, x0, y0, w, l, h, density):
    parts = [
        _rect(rng, np.array([x0, y0, h]), np.array([w, 0, 0]), np.array([0, l, 0]), np.array([0, 0, 1.0]), density),
        _rect(rng, np.array([x0, y0, 0]), np.array([w, 0, 0]), np.array([0, 0, h]), np.array([0, -1.0, 0]), density),
        _rect(rng, np.array([x0, y0 + l, 0]), np.array([w, 0, 0]), np.array([0, 0, h]), np.array([0, 1.0, 0]), density),
        _rect(rng, np.array([x0, y0, 0]), np.array([0, l, 0]), np.array([0, 0, h]), np.array([-1.0, 0, 0]), density),
        _rect(rng, np.array([x0 + w, y0, 0]), np.array([0, l, 0]), np.array([0, 0, h]), np.array([1.0, 0, 0]), density),
    ]
    return np.vstack([p for p, _ in parts]), np.vstack([q for _, q in parts])


def _cylinder(rng, cx, cy, radius, z0, height, density):
    n = _n(2 * np.pi * radius * height, density)
    theta = rng.uniform(0, 2 * np.pi, n)
    z = z0 + rng.uniform(0, height, n)
    nrm = np.column_stack([np.cos(theta), np.sin(theta), np.zeros(n)])
    pts = np.column_stack([cx + radius * nrm[:, 0], cy + radius * nrm[:, 1], z])
    return pts, nrm


def _ellipsoid(rng, center, radii, density, roughness):
    a, b, c = radii
    p = 1.6075
    area = 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
    n = _n(area, density)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    nrm = u / np.array(radii)
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    pts = center + u * np.array(radii) + nrm * rng.normal(0, roughness, (n, 1))
    return pts, nrm


def _car(rng, cx, cy, length, width, height, clearance, density, along_x):
    a, b, c = (length / 2, width / 2, height) if along_x else (width / 2, length / 2, height)
    pts, _ = _building(rng, -a, -b, 2 * a, 2 * b, c, density)
    # superellipsoid |x/a|^4 + |y/b|^4 + |z/c|^4 = 1, radial projection from the box
    q = np.abs(pts) / np.array([a, b, c])
    scale = np.sum(q ** 4, axis=1) ** -0.25
    pts = pts * scale[:, None]
    grad = np.sign(pts) * np.abs(pts / np.array([a, b, c])) ** 3 / np.array([a, b, c])
    nrm = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return pts + np.array([cx, cy, clearance]), nrm


def _place(rng, extent, size, blocked, margin=1.0, tries=200):
    """Random (x, y) whose size x size footprint avoids the blocked boxes; None if nothing fits."""
    if extent - 2 * margin < max(size):
        return None
    for _ in range(tries):
        x, y = rng.uniform(margin, extent - margin - size[0]), rng.uniform(margin, extent - margin - size[1])
        box = (x - margin, y - margin, x + size[0] + margin, y + size[1] + margin)
        if all(box[2] <= b[0] or box[0] >= b[2] or box[3] <= b[1] or box[1] >= b[3] for b in blocked):
            return x, y
    return None


def _colors(rng, name, n, palette):
    mean, spread = palette[name]
    return np.clip(np.asarray(mean) + rng.normal(0, spread, (n, 3)), 0.0, 1.0)


def generate_scene_with_normals(spec: SceneSpec, seed: int):
    """Generator core: ``(cloud, normals)``; ``generate_scene`` drops the normals."""
    if not isinstance(spec, SceneSpec):
        spec = SceneSpec.from_dict(spec)
    extent, dens = spec.extent, spec.density
    pts, nrm, lab = [], [], []

    def add(p, q, name):
        pts.append(p)
        nrm.append(q)
        lab.append(np.full(len(p), CLASS_ID[name], dtype=np.int64))

    footprints = []
    rng = np.random.default_rng([seed, CLASS_ID["building"]])
    for _ in range(spec.count("building")):
        w, l, h = rng.uniform(8, 16), rng.uniform(8, 16), rng.uniform(5, 14)
        spot = _place(rng, extent, (w, l), footprints, margin=3.0)
        if spot is None:
            continue
        footprints.append((spot[0], spot[1], spot[0] + w, spot[1] + l))
        add(*_building(rng, spot[0], spot[1], w, l, h, dens), "building")
    buildings = list(footprints)

    rng = np.random.default_rng([seed, CLASS_ID["vegetation"]])
    for _ in range(spec.count("vegetation")):
        r, rz, trunk = rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.5)
        spot = _place(rng, extent, (2 * r, 2 * r), buildings, margin=0.5)
        if spot is None:
            continue
        cx, cy = spot[0] + r, spot[1] + r
        add(*_ellipsoid(rng, np.array([cx, cy, trunk + rz]), (r, r, rz), dens, 0.15), "vegetation")
        add(*_cylinder(rng, cx, cy, 0.2, 0.0, trunk + 0.3 * rz, dens), "vegetation")

    rng = np.random.default_rng([seed, CLASS_ID["pole"]])
    for _ in range(spec.count("pole")):
        spot = _place(rng, extent, (0.3, 0.3), buildings, margin=1.0)
        if spot is None:
            continue
        add(*_cylinder(rng, spot[0] + 0.15, spot[1] + 0.15, 0.15, 0.0, rng.uniform(5, 9), dens), "pole")

    rng = np.random.default_rng([seed, CLASS_ID["car"]])
    for _ in range(spec.count("car")):
        along_x = bool(rng.integers(2))
        size = (4.4, 1.9) if along_x else (1.9, 4.4)
        spot = _place(rng, extent, size, buildings, margin=0.5)
        if spot is None:
            continue
        add(*_car(rng, spot[0] + size[0] / 2, spot[1] + size[1] / 2, 4.4, 1.9, 1.4, 0.25, dens, along_x), "car")

    if "ground" in spec.classes:
        rng = np.random.default_rng([seed, CLASS_ID["ground"]])
        n = _n(extent * extent, dens)
        xy = rng.uniform(0, extent, (n, 2))
        inside = np.zeros(n, dtype=bool)
        for x0, y0, x1, y1 in buildings:
            inside |= (xy[:, 0] > x0) & (xy[:, 0] < x1) & (xy[:, 1] > y0) & (xy[:, 1] < y1)
        xy = xy[~inside]
        z = rng.normal(0, 0.03, len(xy))
        add(np.column_stack([xy, z]), np.tile([0.0, 0.0, 1.0], (len(xy), 1)), "ground")

    if not pts:
        cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, np.int64), num_classes=len(CLASSES))
        return cloud, np.zeros((0, 3))
    positions, normals, labels = np.vstack(pts), np.vstack(nrm), np.concatenate(lab)
    rng = np.random.default_rng([seed, len(CLASSES)])
    colors = np.empty_like(positions)
    for name, cid in CLASS_ID.items():
        sel = labels == cid
        colors[sel] = _colors(rng, name, int(sel.sum()), spec.palette)
    cloud = PointCloud(positions, colors, labels, num_classes=len(CLASSES))
    return cloud, normals


def generate_scene(spec: SceneSpec, seed: int) -> PointCloud:
    return generate_scene_with_normals(spec, seed)[0]


def estimate_normals(positions: np.ndarray, k: int = 12) -> np.ndarray:
    """PCA normals from k nearest neighbours, oriented to +z."""
    n = len(positions)
    if n < 3:
        return np.tile([0.0, 0.0, 1.0], (n, 1))
    k = min(k, n)
    _, idx = cKDTree(positions).query(positions, k=k)
    nb = positions[idx] - positions[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals[normals[:, 2] < 0] *= -1
    return normals


def apply_domain_shift(cloud: PointCloud, shift: ShiftSpec, seed: int,
                       normals: Optional[np.ndarray] = None) -> PointCloud:
    """Per-class dropout, viewpoint occlusion, density resampling, color affine, jitter.

    Surviving points keep their global index; duplicates created by a
    density factor above 1 get fresh indices. Without ``normals`` the
    occlusion step estimates them from the geometry.
    """
    if not isinstance(shift, ShiftSpec):
        shift = ShiftSpec.from_dict(shift)
    if cloud.labels is None:
        raise ValueError("apply_domain_shift needs a labeled cloud")
    rng = np.random.default_rng([seed, 7])
    keep = np.ones(len(cloud), dtype=bool)

    for name, p in shift.class_dropout.items():
        sel = cloud.labels == CLASS_ID[name]
        keep &= ~(sel & (rng.random(len(cloud)) < p))

    if shift.viewpoint != "none" and shift.occlusion > 0 and len(cloud):
        if normals is None:
            normals = estimate_normals(cloud.positions)
        nz = np.asarray(normals)[:, 2]
        z = cloud.positions[:, 2]
        if shift.viewpoint == "aerial":
            hidden = nz < _UP
        else:
            ground_z = np.percentile(z, 1)
            hidden = (nz > _UP) & (z > ground_z + STREET_SENSOR_HEIGHT)
        keep &= ~(hidden & (rng.random(len(cloud)) < shift.occlusion))

    out = cloud.subset(keep)

    f = shift.density_factor
    if f < 1.0:
        out = out.subset(rng.random(len(out)) < f)
    elif f > 1.0:
        copies = np.floor(f).astype(int) + (rng.random(len(out)) < f - np.floor(f))
        rows = np.repeat(np.arange(len(out)), copies)
        first = np.r_[True, rows[1:] != rows[:-1]] if len(rows) else np.zeros(0, bool)
        indices = out.indices[rows].copy()
        start = int(cloud.indices.max()) + 1 if len(cloud) else 0
        indices[~first] = start + np.arange(int((~first).sum()))
        out = PointCloud(out.positions[rows], None if out.colors is None else out.colors[rows],
                         out.labels[rows], indices, cloud.num_classes)

    if out.colors is not None and (shift.color_gain != 1.0 or any(shift.color_offset)):
        out.colors = np.clip(shift.color_gain * out.colors + np.asarray(shift.color_offset), 0.0, 1.0)

    if shift.jitter_sigma > 0:
        out = jitter(out, shift.jitter_sigma, int(rng.integers(2 ** 31)))
    return out


def load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
