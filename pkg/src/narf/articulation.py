"""Kinematic models of articulated objects.

Models are read from a small JSON schema that mirrors the URDF kinematic
chain (parts, joints, origins, axes, limits).  Rotations are unit
quaternions in ``xyzw`` order; all lengths are in meters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

JOINT_KINDS = ("revolute", "prismatic", "fixed")
_UNIT_TOL = 1e-9


class ModelError(ValueError):
    """Raised for malformed or inconsistent articulation models."""


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion, xyzw) followed by a translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ModelError(f"quaternion norm {n} is not 1")
        q = q / n
        # canonical sign keeps serialization stable
        if q[3] < 0 or (q[3] == 0 and q[np.nonzero(q)[0][0]] < 0):
            q = -q
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_quat(), translation)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RigidTransform":
        return cls(d.get("xyzw", [0.0, 0.0, 0.0, 1.0]), d.get("t", [0.0, 0.0, 0.0]))

    def to_dict(self) -> dict:
        return {"xyzw": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}

    @property
    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        r = Rotation.from_quat(self.rotation)
        return RigidTransform(
            (r * Rotation.from_quat(other.rotation)).as_quat(),
            r.apply(other.translation) + self.translation,
        )

    __matmul__ = compose

    def inverse(self) -> "RigidTransform":
        r_inv = Rotation.from_quat(self.rotation).inv()
        return RigidTransform(r_inv.as_quat(), -r_inv.apply(self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation_matrix.T + self.translation

    def apply_direction(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation_matrix.T

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix(), other.matrix(), atol=atol))


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str
    parent: str
    child: str
    origin: RigidTransform
    axis: np.ndarray
    limits: tuple[float, float]

    def motion(self, value: float) -> RigidTransform:
        """Transform of the child frame relative to the joint frame."""
        if self.kind == "revolute":
            return RigidTransform.from_rotvec(self.axis * value)
        if self.kind == "prismatic":
            return RigidTransform(translation=self.axis * value)
        return RigidTransform.identity()


@dataclass(frozen=True)
class Part:
    id: str
    geometry: tuple = ()


@dataclass(frozen=True)
class ArticulationModel:
    root: str
    parts: tuple[Part, ...]
    joints: tuple[Joint, ...]
    dof_order: tuple[str, ...]

    @property
    def part_ids(self) -> list[str]:
        return [p.id for p in self.parts]

    def part_index(self, part_id: str) -> int:
        """1-based index used in segmentation masks (0 is background)."""
        return self.part_ids.index(part_id) + 1

    def part(self, part_id: str) -> Part:
        for p in self.parts:
            if p.id == part_id:
                return p
        raise KeyError(part_id)

    def joint(self, name: str) -> Joint:
        for j in self.joints:
            if j.name == name:
                return j
        raise KeyError(name)

    @property
    def dof_joints(self) -> list[Joint]:
        return [self.joint(n) for n in self.dof_order]

    @property
    def n_dof(self) -> int:
        return len(self.dof_order)

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.dof_joints], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.dof_joints], dtype=np.float64)

    def parent_joint(self, part_id: str) -> Joint | None:
        for j in self.joints:
            if j.child == part_id:
                return j
        return None

    def chain(self, part_id: str) -> list[Joint]:
        """Joints from the root down to ``part_id``."""
        out = []
        j = self.parent_joint(part_id)
        while j is not None:
            out.append(j)
            j = self.parent_joint(j.parent)
        return out[::-1]

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "parts": [{"id": p.id, "geometry": list(p.geometry)} for p in self.parts],
            "joints": [
                {
                    "name": j.name,
                    "kind": j.kind,
                    "parent": j.parent,
                    "child": j.child,
                    "origin": j.origin.to_dict(),
                    "axis": [float(a) for a in j.axis],
                    "limits": [float(j.limits[0]), float(j.limits[1])],
                }
                for j in self.joints
            ],
        }


def _parse_joint(d: Mapping[str, Any]) -> Joint:
    try:
        name = str(d["name"])
        kind = str(d.get("kind", "fixed"))
        parent, child = str(d["parent"]), str(d["child"])
    except KeyError as exc:
        raise ModelError(f"joint is missing field {exc}") from None
    if kind not in JOINT_KINDS:
        raise ModelError(f"joint {name!r}: unknown kind {kind!r}")
    origin = RigidTransform.from_dict(d.get("origin", {}))
    axis = np.asarray(d.get("axis", [0.0, 0.0, 1.0]), dtype=np.float64)
    if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > _UNIT_TOL:
        raise ModelError(f"joint {name!r}: axis must be a unit 3-vector, got {axis.tolist()}")
    limits = d.get("limits", [0.0, 0.0])
    if kind == "fixed":
        limits = limits if "limits" in d else [0.0, 0.0]
    try:
        lo, hi = (float(v) for v in limits)
    except (TypeError, ValueError):
        raise ModelError(f"joint {name!r}: malformed limits {limits!r}") from None
    if not np.isfinite([lo, hi]).all() or lo > hi:
        raise ModelError(f"joint {name!r}: limits must satisfy lower <= upper, got {limits!r}")
    if kind == "fixed" and (lo != 0.0 or hi != 0.0):
        raise ModelError(f"joint {name!r}: fixed joints must have limits [0, 0]")
    return Joint(name, kind, parent, child, origin, axis, (lo, hi))


def _check_acyclic(children: Mapping[str, list[str]]) -> None:
    state: dict[str, int] = {}  # 1 = on the DFS stack, 2 = done
    for start in children:
        if state.get(start):
            continue
        stack = [(start, iter(children[start]))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                raise ModelError(f"cycle detected: joint chain returns to part {nxt!r}")
            elif not state.get(nxt):
                state[nxt] = 1
                stack.append((nxt, iter(children[nxt])))


def parse_model(document: str | Mapping[str, Any]) -> ArticulationModel:
    """Build a validated :class:`ArticulationModel` from JSON text or a dict."""
    doc = json.loads(document) if isinstance(document, (str, bytes)) else document
    try:
        part_docs = doc["parts"]
        root = str(doc.get("root", part_docs[0]["id"] if part_docs else ""))
    except (KeyError, IndexError, TypeError):
        raise ModelError("model needs a non-empty 'parts' list") from None
    parts = tuple(Part(str(p["id"]), tuple(p.get("geometry", ()))) for p in part_docs)
    ids = [p.id for p in parts]
    if len(set(ids)) != len(ids):
        raise ModelError("duplicate part ids")
    if root not in ids:
        raise ModelError(f"root part {root!r} is not declared")
    joints = tuple(_parse_joint(j) for j in doc.get("joints", []))
    names = [j.name for j in joints]
    if len(set(names)) != len(names):
        raise ModelError("duplicate joint names")

    children: dict[str, list[str]] = {pid: [] for pid in ids}
    for j in joints:
        for end in (j.parent, j.child):
            if end not in ids:
                raise ModelError(f"joint {j.name!r} references unknown part {end!r}")
        if j.parent == j.child:
            raise ModelError(f"cycle: joint {j.name!r} connects {j.child!r} to itself")
        children[j.parent].append(j.child)
    _check_acyclic(children)
    parent_of: dict[str, str] = {}
    for j in joints:
        if j.child == root:
            raise ModelError(f"root part {root!r} cannot be the child of joint {j.name!r}")
        if j.child in parent_of:
            raise ModelError(f"part {j.child!r} has more than one parent joint")
        parent_of[j.child] = j.parent
    for pid in ids:
        cur = pid
        while cur != root:
            if cur not in parent_of:
                raise ModelError(f"part {cur!r} is not connected to the root")
            cur = parent_of[cur]

    dof_order = tuple(j.name for j in joints if j.kind != "fixed")
    return ArticulationModel(root, parts, joints, dof_order)


def load_model(path: str | Path) -> ArticulationModel:
    return parse_model(Path(path).read_text())


def _check_config(model: ArticulationModel, config) -> np.ndarray:
    config = np.asarray(config, dtype=np.float64).reshape(-1)
    if config.shape[0] != model.n_dof:
        raise ModelError(f"configuration has length {config.shape[0]}, model expects {model.n_dof}")
    return config


def forward_kinematics(
    model: ArticulationModel, object_pose: RigidTransform, config: Sequence[float]
) -> dict[str, RigidTransform]:
    """Pose of every part given the root pose and joint values."""
    config = _check_config(model, config)
    values = dict(zip(model.dof_order, config))
    poses = {model.root: object_pose}
    pending = list(model.joints)
    while pending:
        rest = []
        for j in pending:
            if j.parent in poses:
                motion = j.motion(values.get(j.name, 0.0))
                poses[j.child] = poses[j.parent] @ j.origin @ motion
            else:
                rest.append(j)
        pending = rest
    return poses


def clamp_configuration(model: ArticulationModel, config: Sequence[float]) -> np.ndarray:
    config = _check_config(model, config)
    return np.clip(config, model.lower, model.upper)


def midpoint_configuration(model: ArticulationModel) -> np.ndarray:
    return 0.5 * (model.lower + model.upper)


def sample_configuration(model: ArticulationModel, rng: np.random.Generator) -> np.ndarray:
    """Each axis independently uniform within its limits."""
    return model.lower + (model.upper - model.lower) * rng.random(model.n_dof)


def corner_configurations(model: ArticulationModel) -> np.ndarray:
    """All 2**n combinations of joint limits (n = number of dofs)."""
    n = model.n_dof
    if n == 0:
        return np.zeros((1, 0))
    grid = np.array(np.meshgrid(*[[0, 1]] * n, indexing="ij")).reshape(n, -1).T
    return np.where(grid == 0, model.lower, model.upper)


def normalize_configuration(model_lower, model_upper, config):
    """Map joint values into [-1, 1] by their limits; degenerate ranges map to 0."""
    lo = np.asarray(model_lower, dtype=np.float64)
    hi = np.asarray(model_upper, dtype=np.float64)
    span = np.where(hi > lo, hi - lo, 1.0)
    return 2.0 * (np.asarray(config) - lo) / span - 1.0
