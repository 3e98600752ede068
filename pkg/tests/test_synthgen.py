import numpy as np
import pytest

from pcltta.synthgen import (CLASS_ID, CLASSES, SceneSpec, ShiftSpec, apply_domain_shift, estimate_normals,
                             generate_scene, generate_scene_with_normals)


@pytest.fixture(scope="module")
def scene():
    return generate_scene_with_normals(SceneSpec(extent=30, counts={"building": 2, "vegetation": 4,
                                                                    "pole": 3, "car": 3}), 11)


def test_deterministic():
    spec = SceneSpec(extent=20, counts={"building": 1, "car": 2})
    a, b = generate_scene(spec, 3), generate_scene(spec, 3)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.colors, b.colors)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_ground_only():
    c = generate_scene(SceneSpec(extent=10, classes=["ground"]), 0)
    assert np.all(c.labels == 0)


def test_ground_point_count():
    d, e = 40.0, 25.0
    c = generate_scene(SceneSpec(extent=e, density=d, counts={}), 1)
    assert abs(len(c) - d * e * e) <= 0.05 * d * e * e


def test_invalid_specs():
    with pytest.raises(ValueError):
        SceneSpec(classes=[])
    with pytest.raises(ValueError):
        SceneSpec(counts={"tower": 1})
    with pytest.raises(ValueError):
        ShiftSpec(viewpoint="satellite")
    with pytest.raises(ValueError):
        ShiftSpec.from_dict({"foo": 1})


def test_all_classes_present(scene):
    cloud, normals = scene
    assert set(np.unique(cloud.labels)) == set(range(len(CLASSES)))
    np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0, atol=1e-9)
    assert cloud.colors.min() >= 0 and cloud.colors.max() <= 1


def test_identity_shift(scene):
    cloud, normals = scene
    out = apply_domain_shift(cloud, ShiftSpec(), 5, normals)
    np.testing.assert_array_equal(out.positions, cloud.positions)
    np.testing.assert_array_equal(out.colors, cloud.colors)
    np.testing.assert_array_equal(out.indices, cloud.indices)


def test_density_half(scene):
    cloud, _ = scene
    out = apply_domain_shift(cloud, ShiftSpec(density_factor=0.5), 2)
    assert abs(len(out) - len(cloud) / 2) <= 0.05 * len(cloud) / 2


def test_density_up_gives_fresh_indices(scene):
    cloud, _ = scene
    out = apply_domain_shift(cloud, ShiftSpec(density_factor=1.5), 2)
    assert abs(len(out) - 1.5 * len(cloud)) <= 0.05 * 1.5 * len(cloud)
    assert len(np.unique(out.indices)) == len(out)


def test_aerial_removes_facades_keeps_roofs():
    spec = SceneSpec(extent=30, classes=["building"], counts={"building": 3})
    cloud, normals = generate_scene_with_normals(spec, 4)
    out = apply_domain_shift(cloud, ShiftSpec(viewpoint="aerial", occlusion=1.0), 0, normals)
    facade = np.abs(normals[:, 2]) < 0.5
    assert facade.sum() > 0
    kept = np.isin(cloud.indices, out.indices)
    assert not np.any(kept & facade)
    assert np.all(kept[~facade])


def test_street_removes_roofs():
    spec = SceneSpec(extent=30, counts={"building": 3})
    cloud, normals = generate_scene_with_normals(spec, 4)
    out = apply_domain_shift(cloud, ShiftSpec(viewpoint="street", occlusion=1.0), 0, normals)
    roof = (cloud.labels == CLASS_ID["building"]) & (normals[:, 2] > 0.9)
    kept = np.isin(cloud.indices, out.indices)
    assert roof.sum() > 0 and not np.any(kept & roof)
    assert np.all(kept[cloud.labels == CLASS_ID["ground"]])


def test_color_shift_and_labels(scene):
    cloud, normals = scene
    out = apply_domain_shift(cloud, ShiftSpec(color_gain=0.8, color_offset=(0.1, 0, 0)), 1, normals)
    np.testing.assert_allclose(out.colors, np.clip(0.8 * cloud.colors + [0.1, 0, 0], 0, 1))
    np.testing.assert_array_equal(out.labels, cloud.labels)


def test_class_dropout(scene):
    cloud, _ = scene
    out = apply_domain_shift(cloud, ShiftSpec(class_dropout={"car": 1.0}), 1)
    assert not np.any(out.labels == CLASS_ID["car"])


def test_estimated_normals_on_plane():
    rng = np.random.default_rng(0)
    pos = np.column_stack([rng.uniform(0, 5, 400), rng.uniform(0, 5, 400), np.zeros(400)])
    n = estimate_normals(pos)
    np.testing.assert_allclose(n[:, 2], 1.0, atol=1e-9)


def test_objects_larger_than_extent_are_skipped():
    c = generate_scene(SceneSpec(extent=5, counts={"building": 2, "car": 1}), 0)
    assert not np.any(c.labels == CLASS_ID["building"])
