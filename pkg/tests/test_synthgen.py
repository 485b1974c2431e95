import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narf.articulation import ModelError, RigidTransform, parse_model
from narf.camera import Camera, look_at
from narf.scenes import clamp_model
from narf.synthgen import (
    Light, PrimitiveGeometry, intersect_box, intersect_sphere, make_rng, model_geometry, raytrace_frame,
    read_dataset, read_pfm, sample_training_set, surface_points, write_dataset, write_pfm,
)


def one_part(prims, pid="a"):
    m = parse_model({"root": pid, "parts": [{"id": pid}], "joints": []})
    return m, {pid: prims}


def test_empty_view_is_background():
    m, g = one_part([PrimitiveGeometry("sphere", (0.1,))])
    cam = Camera.default(look_at([0, 0, 1.0], target=[0, 0, 2.0]), resolution=16)
    fr = raytrace_frame(m, g, cam, RigidTransform.identity(), [])
    assert (fr.rgb == 1.0).all() and (fr.depth == 0).all() and (fr.part_mask == 0).all()


def test_sphere_center_pixel_analytic_shading():
    m, g = one_part([PrimitiveGeometry("sphere", (0.2,), (1.0, 1.0, 1.0))])
    light = Light(direction=(0.0, -1.0, 0.0), ambient=0.3)
    cam = Camera(64, 64, 32, 32, 65, 65, look_at([0, -1.0, 0]))
    fr = raytrace_frame(m, g, cam, RigidTransform.identity(), [], light)
    np.testing.assert_allclose(fr.rgb[32, 32], 0.3 + 0.7 * 1.0, atol=1e-12)
    assert fr.depth[32, 32] == pytest.approx(0.8, abs=1e-12)
    # every hit: ambient plus the diffuse term of the analytic normal
    from narf.camera import generate_rays
    o, d = generate_rays(cam)
    hit = fr.part_mask.ravel() > 0
    normal = (o + fr.depth.ravel()[:, None] * d)[hit] / 0.2
    expected = 0.3 + 0.7 * np.clip(normal @ np.array([0.0, -1.0, 0.0]), 0, None)
    np.testing.assert_allclose(fr.rgb.reshape(-1, 3)[hit][:, 0], expected, atol=1e-9)


def brute_force_nearest(prims_world, o, d):
    """Independent nearest-hit search: sample each ray densely and test primitive membership."""
    t = np.linspace(0.0, 3.0, 300_001)
    pts = o + t[:, None] * d
    best, who = np.inf, 0
    for k, (kind, center, size) in enumerate(prims_world):
        if kind == "sphere":
            inside = np.linalg.norm(pts - center, axis=1) <= size
        else:
            inside = (np.abs(pts - center) <= np.asarray(size) / 2).all(1)
        idx = np.argmax(inside) if inside.any() else None
        if idx is not None and t[idx] < best:
            best, who = t[idx], k + 1
    return best, who


def test_box_occluding_sphere_labels():
    doc = {"root": "ball", "parts": [{"id": "ball"}, {"id": "plate"}], "joints": [
        {"name": "j", "kind": "fixed", "parent": "ball", "child": "plate",
         "origin": {"xyzw": [0, 0, 0, 1], "t": [0.0, -0.25, 0.05]}}]}
    m = parse_model(doc)
    g = {"ball": [PrimitiveGeometry("sphere", (0.15,), (0.9, 0.1, 0.1))],
         "plate": [PrimitiveGeometry("box", (0.12, 0.02, 0.12), (0.1, 0.1, 0.9))]}
    cam = Camera.default(look_at([0, -1.0, 0]), resolution=24, focal=30)
    fr = raytrace_frame(m, g, cam, RigidTransform.identity(), [])
    assert (fr.part_mask == 2).any() and (fr.part_mask == 1).any()
    from narf.camera import generate_rays
    o, d = generate_rays(cam)
    rng = np.random.default_rng(0)
    world = [("sphere", np.zeros(3), 0.15), ("box", np.array([0.0, -0.25, 0.05]), (0.12, 0.02, 0.12))]
    for i in rng.choice(len(o), 25, replace=False):
        t, who = brute_force_nearest(world, o[i], d[i])
        assert fr.part_mask.ravel()[i] == who
        if who:
            assert fr.depth.ravel()[i] == pytest.approx(t, abs=2e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_intersections_closed_form(seed):
    rng = np.random.default_rng(seed)
    o = rng.uniform(-2, 2, (64, 3))
    d = rng.normal(size=(64, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(0.2, 1.0)
    t, n = intersect_sphere(o, d, r)
    # quadratic: |o + t d|^2 = r^2 -> smallest positive root
    b = (o * d).sum(1)
    c = (o * o).sum(1) - r * r
    disc = b * b - c
    for i in range(64):
        roots = [] if disc[i] < 0 else [x for x in (-b[i] - np.sqrt(disc[i]), -b[i] + np.sqrt(disc[i])) if x > 1e-9]
        if roots:
            assert t[i] == pytest.approx(min(roots), abs=1e-9)
        else:
            assert np.isinf(t[i])
    size = rng.uniform(0.2, 1.5, 3)
    tb, _ = intersect_box(o, d, size)
    for i in range(64):
        with np.errstate(divide="ignore", invalid="ignore"):
            t0, t1 = (-size / 2 - o[i]) / d[i], (size / 2 - o[i]) / d[i]
        lo, hi = np.minimum(t0, t1).max(), np.maximum(t0, t1).min()
        expected = np.inf
        if hi >= max(lo, 0):
            expected = lo if lo > 1e-9 else (hi if hi > 1e-9 else np.inf)
        if np.isfinite(expected):
            assert tb[i] == pytest.approx(expected, abs=1e-9)
        else:
            assert np.isinf(tb[i])


def test_pose_equivariance():
    m = clamp_model()
    g = model_geometry(m)
    cam = Camera.default(look_at([0.5, -0.6, 0.6]), resolution=32, focal=32)
    a = raytrace_frame(m, g, cam, RigidTransform.identity(), [0.1])
    G = RigidTransform.from_rotvec([0.3, -0.2, 0.5], [0.2, 0.1, -0.3])
    b = raytrace_frame(m, g, cam.with_pose(G @ cam.pose), G, [0.1])
    np.testing.assert_allclose(a.rgb, b.rgb, atol=1e-9)
    np.testing.assert_array_equal(a.part_mask, b.part_mask)


def test_missing_geometry():
    m = clamp_model()
    with pytest.raises(ModelError):
        raytrace_frame(m, {"bar": model_geometry(m)["bar"]}, Camera.default(), RigidTransform.identity(), [0.0])


@pytest.mark.parametrize("kwargs", [dict(kind="cone", dimensions=(1,)), dict(kind="box", dimensions=(1, 0, 1)),
                                    dict(kind="sphere", dimensions=(1,), albedo=(1.2, 0, 0))])
def test_invalid_primitive(kwargs):
    with pytest.raises(ValueError):
        PrimitiveGeometry(**kwargs)


def test_training_set_contract():
    m = clamp_model()
    g = model_geometry(m)
    one = sample_training_set(m, g, 1, [[0.05]])
    assert len(one) == 1
    frames = sample_training_set(m, g, 100, [[0.05]], seed=3)
    assert len(frames) == 100
    assert all(f.config.tolist() == [0.05] for f in frames)
    for f in frames:
        assert ((f.part_mask > 0) == (f.depth > 0)).all()
        assert f.camera.pose.translation[2] >= 0
        assert np.linalg.norm(f.camera.pose.translation) == pytest.approx(1.0)


def _digest(frames):
    h = hashlib.sha256()
    for f in frames:
        h.update(f.rgb.tobytes() + f.depth.tobytes() + f.part_mask.tobytes())
    return h.hexdigest()


def test_training_set_deterministic():
    m = clamp_model()
    g = model_geometry(m)
    assert _digest(sample_training_set(m, g, 5, [[0.0], [0.2]], seed=8)) == \
        _digest(sample_training_set(m, g, 5, [[0.0], [0.2]], seed=8))


def test_sphere_surface_radius():
    m, g = one_part([PrimitiveGeometry("sphere", (0.3,), local_pose=RigidTransform(translation=[0.1, 0.2, 0.3]))])
    pts = surface_points(m, g, [], 500, seed=1)
    np.testing.assert_allclose(np.linalg.norm(pts - [0.1, 0.2, 0.3], axis=1), 0.3, atol=1e-9)


def test_equal_area_split_binomial():
    a = PrimitiveGeometry("box", (0.1, 0.2, 0.3), local_pose=RigidTransform(translation=[-5.0, 0, 0]))
    b = PrimitiveGeometry("box", (0.3, 0.1, 0.2), local_pose=RigidTransform(translation=[5.0, 0, 0]))
    m, g = one_part([a, b])
    pts = surface_points(m, g, [], 10_000, seed=2)
    left = int((pts[:, 0] < 0).sum())
    assert abs(left - 5000) <= 3 * np.sqrt(10_000 * 0.25)


def test_prismatic_shift_moves_child_points():
    m = clamp_model()
    g = model_geometry(m)
    a = surface_points(m, g, [0.0], 300, seed=4)
    b = surface_points(m, g, [0.15], 300, seed=4)
    diff = b - a
    moved = np.abs(diff).sum(1) > 0
    assert moved.any() and (~moved).any()
    np.testing.assert_allclose(diff[moved], np.tile([0.15, 0, 0], (moved.sum(), 1)), atol=1e-12)


def test_dataset_roundtrip(tmp_path):
    m = clamp_model()
    g = model_geometry(m)
    frames = sample_training_set(m, g, 3, [[0.1]], seed=1)
    write_dataset(tmp_path, frames)
    back = read_dataset(tmp_path)
    assert len(back) == 3
    for a, b in zip(frames, back):
        np.testing.assert_allclose(a.rgb, b.rgb, atol=0.5 / 255 + 1e-12)
        np.testing.assert_allclose(a.depth, b.depth, rtol=1e-6)
        np.testing.assert_array_equal(a.part_mask, b.part_mask)
        assert a.camera.pose.allclose(b.camera.pose)
    raw = (tmp_path / "depth" / "0000.pfm").read_bytes()
    assert raw.startswith(b"Pf\n64 64\n-1.0\n")


def test_pfm_orientation(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "x.pfm", data)
    np.testing.assert_array_equal(read_pfm(tmp_path / "x.pfm"), data)
    body = np.frombuffer((tmp_path / "x.pfm").read_bytes()[-24:], dtype="<f4")
    np.testing.assert_array_equal(body[:3], [3, 4, 5])  # bottom row first


def test_rng_is_philox():
    assert isinstance(make_rng(0).bit_generator, np.random.Philox)
