import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from narf.articulation import (
    ModelError, RigidTransform, clamp_configuration, forward_kinematics, midpoint_configuration, parse_model,
)
from narf.scenes import clamp_document


def chain_doc(kinds=("revolute", "prismatic", "revolute"), limits=None):
    parts = [{"id": f"p{i}"} for i in range(len(kinds) + 1)]
    joints = []
    rng = np.random.default_rng(3)
    for i, kind in enumerate(kinds):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        joints.append({
            "name": f"j{i}", "kind": kind, "parent": f"p{i}", "child": f"p{i + 1}",
            "origin": {"xyzw": q.tolist(), "t": rng.normal(scale=0.1, size=3).tolist()},
            "axis": axis.tolist(),
            "limits": (limits or {}).get(i, [-1.0, 1.0]) if kind != "fixed" else [0.0, 0.0],
        })
    return {"root": "p0", "parts": parts, "joints": joints}


def random_pose(rng):
    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.normal(size=3))


def test_single_part_no_joints():
    m = parse_model(json.dumps({"root": "a", "parts": [{"id": "a", "geometry": []}], "joints": []}))
    assert m.part_ids == ["a"]
    assert m.dof_order == ()
    assert midpoint_configuration(m).shape == (0,)


def test_prismatic_joint_defines_dof_order():
    doc = {"root": "a", "parts": [{"id": "a"}, {"id": "b"}], "joints": [
        {"name": "slide", "kind": "prismatic", "parent": "a", "child": "b", "axis": [0, 0, 1], "limits": [0, 0.08]}]}
    m = parse_model(doc)
    assert m.dof_order == ("slide",)
    assert m.joint("slide").limits == (0.0, 0.08)


def test_child_equal_to_ancestor_is_a_cycle():
    doc = {"root": "a", "parts": [{"id": "a"}, {"id": "b"}, {"id": "c"}], "joints": [
        {"name": "j1", "kind": "fixed", "parent": "a", "child": "b"},
        {"name": "j2", "kind": "fixed", "parent": "b", "child": "c"},
        {"name": "j3", "kind": "fixed", "parent": "c", "child": "b"}]}
    with pytest.raises(ModelError, match="cycle"):
        parse_model(doc)


def test_root_as_child_is_a_cycle():
    doc = {"root": "a", "parts": [{"id": "a"}, {"id": "b"}], "joints": [
        {"name": "j1", "kind": "fixed", "parent": "a", "child": "b"},
        {"name": "j2", "kind": "fixed", "parent": "b", "child": "a"}]}
    with pytest.raises(ModelError, match="cycle"):
        parse_model(doc)


@pytest.mark.parametrize("joint, message", [
    ({"parent": "a", "child": "zz"}, "unknown part"),
    ({"parent": "a", "child": "b", "kind": "revolute", "axis": [0, 0, 2], "limits": [0, 1]}, "unit"),
    ({"parent": "a", "child": "b", "kind": "revolute", "limits": [1, 0]}, "lower <= upper"),
    ({"parent": "a", "child": "b", "kind": "revolute", "limits": ["x"]}, "malformed"),
    ({"parent": "a", "child": "b", "kind": "fixed", "limits": [0, 1]}, "fixed"),
    ({"parent": "a", "child": "b", "kind": "screw"}, "unknown kind"),
])
def test_invalid_joints(joint, message):
    doc = {"root": "a", "parts": [{"id": "a"}, {"id": "b"}], "joints": [{"name": "j", **joint}]}
    with pytest.raises(ModelError, match=message):
        parse_model(doc)


def test_disconnected_part():
    with pytest.raises(ModelError, match="not connected"):
        parse_model({"root": "a", "parts": [{"id": "a"}, {"id": "b"}], "joints": []})


def test_zero_config_composes_origins():
    m = parse_model(chain_doc())
    poses = forward_kinematics(m, RigidTransform.identity(), np.zeros(3))
    expected = RigidTransform.identity()
    for i, j in enumerate(m.joints):
        expected = expected @ j.origin
        assert poses[f"p{i + 1}"].allclose(expected)


def test_prismatic_translation_along_axis():
    doc = {"root": "a", "parts": [{"id": "a"}, {"id": "b"}], "joints": [
        {"name": "s", "kind": "prismatic", "parent": "a", "child": "b", "axis": [0, 0, 1], "limits": [0, 0.1],
         "origin": {"xyzw": [0, 0, 0, 1], "t": [0.1, 0.2, 0.3]}}]}
    m = parse_model(doc)
    poses = forward_kinematics(m, RigidTransform.identity(), [0.05])
    np.testing.assert_allclose(poses["b"].translation, [0.1, 0.2, 0.35], atol=1e-12)


def test_revolute_quarter_turn():
    doc = {"root": "a", "parts": [{"id": "a"}, {"id": "b"}], "joints": [
        {"name": "r", "kind": "revolute", "parent": "a", "child": "b", "axis": [0, 0, 1], "limits": [-4, 4],
         "origin": {"xyzw": [0, 0, 0, 1], "t": [0.5, 0.0, 0.0]}}]}
    m = parse_model(doc)
    pose = forward_kinematics(m, RigidTransform.identity(), [math.pi / 2])["b"]
    np.testing.assert_allclose(pose.apply([1.0, 0.0, 0.0]) - [0.5, 0, 0], [0.0, 1.0, 0.0], atol=1e-12)


def test_config_length_mismatch():
    m = parse_model(chain_doc())
    with pytest.raises(ModelError, match="length"):
        forward_kinematics(m, RigidTransform.identity(), [0.0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(-0.5, 0.5))
def test_fk_extra_delta_on_one_joint(theta, k, delta):
    m = parse_model(chain_doc())
    theta = np.asarray(theta)
    base = forward_kinematics(m, RigidTransform.identity(), theta)
    bumped = theta.copy()
    bumped[k] += delta
    moved = forward_kinematics(m, RigidTransform.identity(), bumped)
    joint = m.joints[k]
    child = base[joint.child]
    child_after = child @ joint.motion(delta)
    for i in range(k + 1, len(m.joints) + 1):
        pid = f"p{i}"
        expected = child_after @ (child.inverse() @ base[pid])
        assert moved[pid].allclose(expected, atol=1e-9)
    for i in range(0, k + 1):
        assert moved[f"p{i}"].allclose(base[f"p{i}"], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_fk_pose_equivariance(seed):
    rng = np.random.default_rng(seed)
    m = parse_model(chain_doc())
    x, g = random_pose(rng), random_pose(rng)
    theta = rng.uniform(-1, 1, 3)
    a = forward_kinematics(m, g @ x, theta)
    b = forward_kinematics(m, x, theta)
    for pid in m.part_ids:
        assert a[pid].allclose(g @ b[pid], atol=1e-9)


@pytest.mark.parametrize("value, expected", [(-0.5, 0.0), (0.03, 0.03), (0.5, 0.08)])
def test_clamp_examples(value, expected):
    m = parse_model({"root": "a", "parts": [{"id": "a"}, {"id": "b"}], "joints": [
        {"name": "s", "kind": "prismatic", "parent": "a", "child": "b", "axis": [1, 0, 0], "limits": [0, 0.08]}]})
    assert clamp_configuration(m, [value])[0] == pytest.approx(expected)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_clamp_idempotent(values):
    m = parse_model(chain_doc())
    once = clamp_configuration(m, values)
    np.testing.assert_array_equal(clamp_configuration(m, once), once)


def test_midpoint_examples_and_fixed_excluded():
    doc = chain_doc(("prismatic", "fixed", "revolute"), limits={0: [0, 0.08], 2: [-math.pi / 4, math.pi / 4]})
    m = parse_model(doc)
    assert m.dof_order == ("j0", "j2")
    np.testing.assert_allclose(midpoint_configuration(m), [0.04, 0.0], atol=1e-15)


def test_model_roundtrip():
    m = parse_model(clamp_document())
    again = parse_model(json.dumps(m.to_dict()))
    assert again.dof_order == m.dof_order
    assert again.part_ids == m.part_ids


def test_quaternion_must_be_unit():
    with pytest.raises(ModelError):
        RigidTransform([0, 0, 0, 2.0])
