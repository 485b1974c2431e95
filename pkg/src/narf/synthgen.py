"""Analytic raytracer over colored primitives and labelled dataset generation.

Every part of an articulation model carries a list of primitive geometry
records (box, cylinder, sphere).  Frames are traced with one ray per pixel
center and flat Lambertian shading under a single directional light that
is fixed in the object's root frame, so images only depend on the
camera pose relative to the object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .articulation import ArticulationModel, RigidTransform, forward_kinematics, ModelError
from .camera import Camera, generate_rays, look_at, sphere_direction

PRIMITIVE_KINDS = ("box", "cylinder", "sphere")
BACKGROUND = np.ones(3)
_EPS = 1e-9


@dataclass(frozen=True)
class PrimitiveGeometry:
    """``dimensions``: box full extents (x, y, z); cylinder (radius, height) along local z; sphere (radius,)."""

    kind: str
    dimensions: tuple
    albedo: tuple = (0.8, 0.8, 0.8)
    local_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        expected = {"box": 3, "cylinder": 2, "sphere": 1}[self.kind]
        dims = tuple(float(d) for d in self.dimensions)
        if len(dims) != expected or min(dims) <= 0:
            raise ValueError(f"{self.kind} needs {expected} positive dimensions, got {dims}")
        albedo = tuple(float(a) for a in self.albedo)
        if len(albedo) != 3 or min(albedo) < 0 or max(albedo) > 1:
            raise ValueError("albedo components must lie in [0, 1]")
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "albedo", albedo)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PrimitiveGeometry":
        return cls(d["kind"], tuple(d["dimensions"]), tuple(d.get("albedo", (0.8, 0.8, 0.8))),
                   RigidTransform.from_dict(d.get("origin", {})))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dimensions": list(self.dimensions), "albedo": list(self.albedo),
                "origin": self.local_pose.to_dict()}

    @property
    def area(self) -> float:
        if self.kind == "box":
            x, y, z = self.dimensions
            return 2 * (x * y + y * z + x * z)
        if self.kind == "cylinder":
            r, h = self.dimensions
            return 2 * np.pi * r * h + 2 * np.pi * r * r
        return 4 * np.pi * self.dimensions[0] ** 2

    def local_corners(self) -> np.ndarray:
        """Corners of the primitive's bounding box in its owning part's frame."""
        if self.kind == "box":
            half = np.asarray(self.dimensions) / 2
        elif self.kind == "cylinder":
            half = np.array([self.dimensions[0], self.dimensions[0], self.dimensions[1] / 2])
        else:
            half = np.full(3, self.dimensions[0])
        signs = np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1], indexing="ij")).reshape(3, -1).T
        return self.local_pose.apply(signs * half)


@dataclass(frozen=True)
class Light:
    direction: tuple = (0.4, 0.3, 1.0)  # toward the light, object root frame
    ambient: float = 0.3

    @property
    def unit(self) -> np.ndarray:
        d = np.asarray(self.direction, dtype=np.float64)
        return d / np.linalg.norm(d)


@dataclass
class LabeledFrame:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) ray distance in meters, 0 where nothing is hit
    part_mask: np.ndarray  # (H, W) uint8, 1-based part index, 0 background
    camera: Camera
    object_pose: RigidTransform
    config: np.ndarray

    def meta(self) -> dict:
        return {"camera": self.camera.to_dict(), "object_pose": self.object_pose.to_dict(),
                "config": [float(c) for c in self.config]}


Geometry = Mapping[str, Sequence[PrimitiveGeometry]]


def model_geometry(model: ArticulationModel) -> dict[str, list[PrimitiveGeometry]]:
    """Resolve the primitive records embedded in the model's parts."""
    return {p.id: [PrimitiveGeometry.from_dict(g) for g in p.geometry] for p in model.parts}


# -- ray/primitive intersection in the primitive's own frame ------------------

def intersect_sphere(o: np.ndarray, d: np.ndarray, radius: float):
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - radius**2
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > _EPS, t0, t1)
    hit &= t > _EPS
    t = np.where(hit, t, np.inf)
    normal = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    normal /= radius
    return t, normal


def intersect_box(o: np.ndarray, d: np.ndarray, size):
    half = np.asarray(size, dtype=np.float64) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tlo = np.fmin(t1, t2)
    thi = np.fmax(t1, t2)
    # rays parallel to a slab: inside -> unconstrained, outside -> miss
    parallel = d == 0
    inside = np.abs(o) <= half
    tlo = np.where(parallel, np.where(inside, -np.inf, np.inf), tlo)
    thi = np.where(parallel, np.where(inside, np.inf, -np.inf), thi)
    tmin = tlo.max(axis=1)
    tmax = thi.min(axis=1)
    hit = (tmax >= tmin) & (tmax > _EPS)
    entering = tmin > _EPS
    t = np.where(hit, np.where(entering, tmin, tmax), np.inf)
    axis = np.where(entering, tlo.argmax(axis=1), thi.argmin(axis=1))
    normal = np.zeros_like(o)
    rows = np.arange(len(o))
    sign = np.where(entering, -np.sign(d[rows, axis]), np.sign(d[rows, axis]))
    normal[rows, axis] = sign
    return t, normal


def intersect_cylinder(o: np.ndarray, d: np.ndarray, radius: float, height: float):
    hh = height / 2
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius**2
    disc = b * b - a * c
    t_side = np.full(len(o), np.inf)
    ok = (a > 0) & (disc >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for root in ((-b - sq) / a, (-b + sq) / a):
            z = o[:, 2] + root * d[:, 2]
            valid = ok & (root > _EPS) & (np.abs(z) <= hh)
            t_side = np.where(valid & (root < t_side), root, t_side)
        t_cap = np.full(len(o), np.inf)
        cap_sign = np.zeros(len(o))
        for s in (-1.0, 1.0):
            root = (s * hh - o[:, 2]) / d[:, 2]
            p = o[:, :2] + root[:, None] * d[:, :2]
            valid = (d[:, 2] != 0) & (root > _EPS) & ((p**2).sum(1) <= radius**2)
            better = valid & (root < t_cap)
            t_cap = np.where(better, root, t_cap)
            cap_sign = np.where(better, s, cap_sign)
    use_cap = t_cap < t_side
    t = np.where(use_cap, t_cap, t_side)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    normal = np.zeros_like(o)
    normal[:, :2] = p[:, :2] / radius
    normal = np.where(use_cap[:, None], np.stack([0 * cap_sign, 0 * cap_sign, cap_sign], 1), normal)
    return t, normal


def intersect_primitive(prim: PrimitiveGeometry, o: np.ndarray, d: np.ndarray):
    if prim.kind == "sphere":
        return intersect_sphere(o, d, prim.dimensions[0])
    if prim.kind == "box":
        return intersect_box(o, d, prim.dimensions)
    return intersect_cylinder(o, d, *prim.dimensions)


def _check_geometry(model: ArticulationModel, geometry: Geometry) -> None:
    for pid in model.part_ids:
        if not geometry.get(pid):
            raise ModelError(f"part {pid!r} has no geometry")


def trace_rays(
    model: ArticulationModel,
    geometry: Geometry,
    object_pose: RigidTransform,
    config,
    origins: np.ndarray,
    dirs: np.ndarray,
    light: Light = Light(),
    background=BACKGROUND,
    parts: Sequence[str] | None = None,
):
    """Nearest-hit shading for world-frame rays.

    Returns ``(rgb, depth, label)``; ``label`` is the 1-based part index of
    the model (0 for misses).  ``parts`` restricts tracing to a subset.
    """
    _check_geometry(model, geometry)
    poses = forward_kinematics(model, object_pose, config)
    to_root = object_pose.inverse()
    n = len(origins)
    best_t = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.uint8)
    color = np.zeros((n, 3))
    for pid in (parts if parts is not None else model.part_ids):
        for prim in geometry[pid]:
            frame = poses[pid] @ prim.local_pose
            inv = frame.inverse()
            t, normal = intersect_primitive(prim, inv.apply(origins), inv.apply_direction(dirs))
            closer = t < best_t
            if not closer.any():
                continue
            n_root = (to_root @ frame).apply_direction(normal[closer])
            lam = np.clip(n_root @ light.unit, 0.0, None)
            shade = light.ambient + (1.0 - light.ambient) * lam
            color[closer] = np.asarray(prim.albedo) * shade[:, None]
            best_t[closer] = t[closer]
            label[closer] = model.part_index(pid)
    hit = np.isfinite(best_t)
    rgb = np.where(hit[:, None], color, np.asarray(background, dtype=np.float64))
    depth = np.where(hit, best_t, 0.0)
    return rgb, depth, label


def raytrace_frame(
    model: ArticulationModel,
    geometry: Geometry,
    camera: Camera,
    object_pose: RigidTransform,
    config,
    light: Light = Light(),
    background=BACKGROUND,
    parts: Sequence[str] | None = None,
) -> LabeledFrame:
    origins, dirs = generate_rays(camera)
    rgb, depth, label = trace_rays(model, geometry, object_pose, config, origins, dirs, light, background, parts)
    h, w = camera.height, camera.width
    return LabeledFrame(
        rgb.reshape(h, w, 3), depth.reshape(h, w), label.reshape(h, w), camera, object_pose,
        np.asarray(config, dtype=np.float64).copy(),
    )


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide PRNG: counter-based Philox keyed by ``seed``."""
    return np.random.Generator(np.random.Philox(int(seed)))


def sample_camera(rng: np.random.Generator, radius: float, template: Camera, upper_only: bool = True) -> Camera:
    eye = radius * sphere_direction(rng, upper_only=upper_only)
    return template.with_pose(look_at(eye))


def sample_training_set(
    model: ArticulationModel,
    geometry: Geometry,
    n_views: int,
    configs: Sequence,
    camera_radius: float = 1.0,
    seed: int = 0,
    camera: Camera | None = None,
    light: Light = Light(),
) -> list[LabeledFrame]:
    """``n_views`` frames on the upper view hemisphere; configurations cycle through ``configs``."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if len(configs) == 0:
        raise ValueError("need at least one configuration")
    template = camera or Camera.default()
    rng = make_rng(seed)
    frames = []
    for i in range(n_views):
        cam = sample_camera(rng, camera_radius, template)
        frames.append(raytrace_frame(model, geometry, cam, RigidTransform.identity(), configs[i % len(configs)], light))
    return frames


# -- surface sampling -----------------------------------------------------------

def _sample_primitive_surface(prim: PrimitiveGeometry, n: int, rng: np.random.Generator) -> np.ndarray:
    if prim.kind == "sphere":
        v = rng.standard_normal((n, 3))
        pts = prim.dimensions[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif prim.kind == "box":
        size = np.asarray(prim.dimensions)
        face_area = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
        face_area = np.repeat(face_area, 2)
        face = rng.choice(6, size=n, p=face_area / face_area.sum())
        pts = (rng.random((n, 3)) - 0.5) * size
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * size[axis] / 2
    else:
        r, h = prim.dimensions
        areas = np.array([2 * np.pi * r * h, np.pi * r * r, np.pi * r * r])
        which = rng.choice(3, size=n, p=areas / areas.sum())
        phi = 2 * np.pi * rng.random(n)
        rad = np.where(which == 0, r, r * np.sqrt(rng.random(n)))
        z = np.where(which == 0, (rng.random(n) - 0.5) * h, np.where(which == 1, -h / 2, h / 2))
        pts = np.stack([rad * np.cos(phi), rad * np.sin(phi), z], axis=1)
    return prim.local_pose.apply(pts)


def sample_part_surfaces(
    model: ArticulationModel, geometry: Geometry, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` area-uniform points in their parts' local frames, plus owning part indices (0-based)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    prims = [(k, prim) for k, pid in enumerate(model.part_ids) for prim in geometry[pid]]
    areas = np.array([p.area for _, p in prims])
    which = rng.choice(len(prims), size=n, p=areas / areas.sum())
    pts = np.zeros((n, 3))
    owner = np.zeros(n, dtype=np.int64)
    for i, (k, prim) in enumerate(prims):
        sel = np.nonzero(which == i)[0]
        if len(sel):
            pts[sel] = _sample_primitive_surface(prim, len(sel), rng)
            owner[sel] = k
    return pts, owner


def place_part_points(model: ArticulationModel, pose: RigidTransform, config, pts: np.ndarray, owner: np.ndarray):
    poses = forward_kinematics(model, pose, config)
    out = np.empty_like(pts)
    for k, pid in enumerate(model.part_ids):
        sel = owner == k
        out[sel] = poses[pid].apply(pts[sel])
    return out


def surface_points(model: ArticulationModel, geometry: Geometry, config, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform surface samples in the object root frame at ``config``."""
    pts, owner = sample_part_surfaces(model, geometry, n, make_rng(seed))
    return place_part_points(model, RigidTransform.identity(), config, pts, owner)


def part_bounds(model: ArticulationModel, geometry: Geometry, part: str) -> tuple[np.ndarray, np.ndarray]:
    corners = np.concatenate([p.local_corners() for p in geometry[part]])
    return corners.min(0), corners.max(0)


# -- dataset directory I/O --------------------------------------------------------

def write_pfm(path: Path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype="<f4")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(data).tobytes())


def read_pfm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind != b"Pf":
            raise ValueError(f"{path}: only single-channel PFM is supported")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dtype).reshape(h, w)
    return np.flipud(data).astype(np.float32)


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_dataset(directory, frames: Sequence[LabeledFrame], extra: dict | None = None) -> Path:
    """Write frames as ``manifest.json`` + ``rgb/`` PNG + ``depth/`` PFM + ``mask/`` PNG."""
    root = Path(directory)
    for sub in ("rgb", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for i, fr in enumerate(frames):
        name = f"{i:04d}"
        Image.fromarray(to_uint8(fr.rgb), mode="RGB").save(root / "rgb" / f"{name}.png")
        write_pfm(root / "depth" / f"{name}.pfm", fr.depth)
        Image.fromarray(np.asarray(fr.part_mask, dtype=np.uint8), mode="L").save(root / "mask" / f"{name}.png")
        entries.append({
            "index": i,
            "rgb": f"rgb/{name}.png",
            "depth": f"depth/{name}.pfm",
            "mask": f"mask/{name}.png",
            **fr.meta(),
        })
    manifest = {"version": 1, "frames": entries, **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return root


def frame_from_entry(root: Path, entry: Mapping) -> LabeledFrame:
    rgb = np.asarray(Image.open(root / entry["rgb"]).convert("RGB"), dtype=np.float64) / 255.0
    if "mask" not in entry:
        raise ValueError(f"frame {entry.get('index')} has no mask channel")
    mask = np.asarray(Image.open(root / entry["mask"]), dtype=np.uint8)
    depth = read_pfm(root / entry["depth"]).astype(np.float64) if "depth" in entry else np.zeros(mask.shape)
    return LabeledFrame(
        rgb, depth, mask, Camera.from_dict(entry["camera"]), RigidTransform.from_dict(entry["object_pose"]),
        np.asarray(entry["config"], dtype=np.float64),
    )


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def read_dataset(directory) -> list[LabeledFrame]:
    root = Path(directory)
    return [frame_from_entry(root, e) for e in read_manifest(root)["frames"]]
