import numpy as np
import pytest

from tpmtl.renderer import Camera, RigidTransform, make_rays
from tpmtl.scenes import (Box, DatasetCorruptionError, Plane, Scene, Sphere,
                          apply_label_noise, boundary_from_seg, generate_scene,
                          make_pair, read_dataset, split_records, trace_labels,
                          write_dataset)


def back_plane(class_id=0):
    return Plane(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0]),
                 class_id, np.array([0.5, 0.5, 0.5]))


def test_center_ray_sphere_hit():
    scene = Scene([Sphere(np.zeros(3), 0.5, 2, np.array([1.0, 0.0, 0.0])),
                   back_plane()])
    rec = trace_labels(scene, Camera.identity(), 1, 1)
    assert rec.depth[0, 0] == pytest.approx(0.5)
    np.testing.assert_allclose(rec.normal[0, 0], [0.0, 0.0, -1.0], atol=1e-12)
    assert rec.seg[0, 0] == 2


def test_empty_scene_back_plane_everywhere():
    scene = Scene([back_plane()])
    rec = trace_labels(scene, Camera.identity(), 8, 8)
    np.testing.assert_allclose(rec.depth, 2.0)
    np.testing.assert_allclose(rec.normal, np.broadcast_to([0, 0, -1.0], (8, 8, 3)))
    assert (rec.seg == 0).all()
    assert (rec.boundary == 0).all()


def test_boundary_single_pixel_vertical_edge():
    seg = np.zeros((6, 6), dtype=int)
    seg[:, 3:] = 1
    b = boundary_from_seg(seg)
    expected = np.zeros((6, 6))
    expected[:, 2] = 1.0
    np.testing.assert_array_equal(b, expected)


def test_box_face_normal_and_depth():
    scene = Scene([Box(np.array([-0.3, -0.3, 0.0]), np.array([0.3, 0.3, 0.4]),
                       1, np.array([0.2, 0.9, 0.2])), back_plane()])
    rec = trace_labels(scene, Camera.identity(), 1, 1)
    assert rec.depth[0, 0] == pytest.approx(1.0)  # front face z=0, origin z=-1
    np.testing.assert_allclose(rec.normal[0, 0], [0.0, 0.0, -1.0], atol=1e-12)


def test_normals_unit_and_camera_facing():
    rng = np.random.default_rng(0)
    scene = generate_scene(rng)
    rec = trace_labels(scene, Camera.identity(), 24, 24)
    norms = np.linalg.norm(rec.normal, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-12)
    rays = make_rays(Camera.identity(), 24, 24)
    dots = (rec.normal.reshape(-1, 3) * rays.directions).sum(axis=1)
    assert (dots <= 1e-12).all()


def test_depth_is_min_over_primitives():
    rng = np.random.default_rng(1)
    scene = generate_scene(rng, n_objects=(3, 3))
    h = w = 16
    full = trace_labels(scene, Camera.identity(), h, w)
    per_prim = []
    for prim in scene.primitives:
        single = Scene([prim], light_dir=scene.light_dir)
        rays = make_rays(Camera.identity(), h, w)
        t, idx = single.trace(rays.origins, rays.directions)
        per_prim.append(np.where(idx < 0, np.inf, t).reshape(h, w))
    np.testing.assert_allclose(full.depth, np.minimum(2.0, np.min(per_prim, axis=0)))


def test_seg_class_matches_nearest_hit():
    rng = np.random.default_rng(2)
    scene = generate_scene(rng, n_objects=(2, 4))
    h = w = 12
    rec = trace_labels(scene, Camera.identity(), h, w)
    rays = make_rays(Camera.identity(), h, w)
    t, idx = scene.trace(rays.origins, rays.directions)
    classes = np.array([scene.primitives[i].class_id for i in idx])
    np.testing.assert_array_equal(rec.seg.ravel(), classes)
    np.testing.assert_allclose(rec.depth.ravel(), t)


def test_boundary_coincides_with_seg_discontinuity():
    rng = np.random.default_rng(3)
    scene = generate_scene(rng)
    rec = trace_labels(scene, Camera.identity(), 20, 20)
    np.testing.assert_array_equal(rec.boundary, boundary_from_seg(rec.seg))


def test_generate_scene_containment_and_determinism():
    for seed in range(5):
        scene = generate_scene(np.random.default_rng(seed))
        for prim in scene.primitives[:-1]:
            if isinstance(prim, Sphere):
                assert (np.abs(prim.center) + prim.radius <= 1.0 + 1e-9).all()
                assert prim.class_id >= 1
            elif isinstance(prim, Box):
                assert (np.abs(prim.vmin) <= 1.0).all() and (np.abs(prim.vmax) <= 1.0).all()
        assert isinstance(scene.primitives[-1], Plane)
    a = generate_scene(np.random.default_rng(7))
    b = generate_scene(np.random.default_rng(7))
    assert len(a.primitives) == len(b.primitives)
    for pa, pb in zip(a.primitives, b.primitives):
        assert pa.kind == pb.kind and pa.class_id == pb.class_id


def test_zero_objects_gives_back_plane_only():
    scene = generate_scene(np.random.default_rng(4), n_objects=(0, 0))
    assert len(scene.primitives) == 1
    rec = trace_labels(scene, Camera.identity(), 6, 6)
    assert (rec.seg == 0).all()


def test_make_pair_identity_views_match():
    rng = np.random.default_rng(5)
    scene = generate_scene(rng)
    rec = make_pair(scene, Camera.identity(), RigidTransform.identity(), 16, 16)
    np.testing.assert_array_equal(rec.seg, rec.pair.seg)
    np.testing.assert_array_equal(rec.depth, rec.pair.depth)


def test_make_pair_translation_shifts_seg():
    # 0.2 shift in x = 0.2 * (W / 2) = 4 pixels at W = 40
    scene = Scene([Sphere(np.array([0.0, 0.0, 0.3]), 0.4, 1,
                          np.array([0.9, 0.1, 0.1])), back_plane()])
    w = h = 40
    dv = RigidTransform(np.eye(3), np.array([0.2, 0.0, 0.0]))
    rec = make_pair(scene, Camera.identity(), dv, h, w)
    shift = int(round(0.2 * w / 2))
    # camera moved +x: the scene slides toward -x in view 2
    np.testing.assert_array_equal(rec.pair.seg[:, :-shift], rec.seg[:, shift:])


def test_make_pair_delta_is_cam2_compose_cam1_inverse():
    rng = np.random.default_rng(6)
    q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    cam1 = Camera(RigidTransform(q, rng.standard_normal(3) * 0.1))
    dv = RigidTransform(np.eye(3), np.array([0.1, 0.0, 0.0]))
    scene = generate_scene(rng, n_objects=(1, 1))
    rec = make_pair(scene, cam1, dv, 4, 4)
    cam2 = dv.compose(cam1.pose)
    recovered = cam2.compose(cam1.pose.inverse())
    np.testing.assert_allclose(recovered.rotation, rec.pair.delta_v.rotation, atol=1e-12)
    np.testing.assert_allclose(recovered.translation, rec.pair.delta_v.translation,
                               atol=1e-12)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    records = []
    for i in range(3):
        scene = generate_scene(rng)
        if i == 2:
            rec = make_pair(scene, Camera.identity(),
                            RigidTransform(np.eye(3), [0.1, 0, 0]), 16, 16,
                            sample_id=f"{i:03d}")
            rec.split = "test"
        else:
            rec = trace_labels(scene, Camera.identity(), 16, 16, sample_id=f"{i:03d}")
        records.append(rec)
    write_dataset(records, tmp_path / "ds", k_classes=6, seed=8,
                  generator_params={"n_objects": [2, 5]})
    loaded, manifest = read_dataset(tmp_path / "ds")
    assert manifest["k_classes"] == 6
    assert len(loaded) == 3
    for orig, back in zip(records, loaded):
        np.testing.assert_allclose(back.image, orig.image.astype(np.float32), atol=0)
        np.testing.assert_array_equal(back.seg, orig.seg)
        np.testing.assert_allclose(back.depth, orig.depth.astype(np.float32), atol=0)
    assert loaded[2].pair is not None
    np.testing.assert_allclose(loaded[2].pair.delta_v.translation, [0.1, 0, 0])
    train, test = split_records(loaded)
    assert len(train) == 2 and len(test) == 1


def test_write_then_read_is_bit_identical(tmp_path):
    rng = np.random.default_rng(9)
    rec = trace_labels(generate_scene(rng), Camera.identity(), 8, 8, "a")
    write_dataset([rec], tmp_path / "d1", k_classes=6)
    first, _ = read_dataset(tmp_path / "d1")
    write_dataset(first, tmp_path / "d2", k_classes=6)
    second, _ = read_dataset(tmp_path / "d2")
    for name in ("image", "seg", "depth", "normal", "boundary"):
        np.testing.assert_array_equal(getattr(first[0], name), getattr(second[0], name))


def test_truncated_blob_raises_corruption_error(tmp_path):
    rng = np.random.default_rng(10)
    rec = trace_labels(generate_scene(rng), Camera.identity(), 8, 8, "bad")
    out = write_dataset([rec], tmp_path / "ds", k_classes=6)
    blob = out / "bad" / "depth.f32"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(DatasetCorruptionError) as exc:
        read_dataset(out)
    assert "bad" in str(exc.value)


def test_label_noise():
    rng = np.random.default_rng(11)
    rec = trace_labels(generate_scene(rng), Camera.identity(), 32, 32, "n")
    seg0, depth0 = rec.seg.copy(), rec.depth.copy()
    apply_label_noise(rec, np.random.default_rng(0), seg_noise=0.1,
                      depth_sigma=0.05, k_classes=6)
    flip_rate = (rec.seg != seg0).mean()
    assert 0.03 < flip_rate < 0.15  # 10% flips, some land on the same class
    assert 0.03 < np.std(rec.depth - depth0) < 0.07
