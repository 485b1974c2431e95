"""Differentiable volume rendering over an occupancy-pruned bounding box.

Rays are cut into segments by the voxel planes of an axis-aligned
occupancy grid; samples are spread over the occupied segments only.  The
discrete segment structure (which planes bound which segment) is found in
numpy, and the segment end points are then recomputed in torch from the
ray origin/direction, so renders are differentiable with respect to the
object pose as well as the configuration and network weights.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .articulation import RigidTransform
from .camera import Camera, all_pixels, generate_rays
from .nn import EncodingSpec, MlpWeights, field_density, field_forward, init_weights

__all__ = [
    "OccupancyGrid", "RaySamples", "RadianceField", "RenderOutput",
    "generate_rays", "sample_along", "integrate", "render", "render_rays", "prune_grid",
    "pose_tensors", "apply_twist", "save_checkpoint", "load_checkpoint",
]

CHECKPOINT_MAGIC = b"NARFCKPT"
CHECKPOINT_VERSION = 1
WHITE = (1.0, 1.0, 1.0)


class DegenerateFieldError(RuntimeError):
    """Pruning removed every voxel."""


@dataclass
class OccupancyGrid:
    lower: np.ndarray
    upper: np.ndarray
    resolution: tuple = (32, 32, 32)
    occupied: np.ndarray | None = None

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        self.resolution = tuple(int(r) for r in self.resolution)
        if not (self.upper > self.lower).all():
            raise ValueError("grid bounds must satisfy lower < upper on every axis")
        if self.occupied is None:
            self.occupied = np.ones(self.resolution, dtype=bool)
        self.occupied = np.asarray(self.occupied, dtype=bool)
        if self.occupied.shape != self.resolution:
            raise ValueError("occupancy shape does not match resolution")

    @classmethod
    def around(cls, lower, upper, padding: float = 1.2, resolution=(32, 32, 32)) -> "OccupancyGrid":
        """Grid over the box ``[lower, upper]`` scaled by ``padding`` about its center."""
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        c, h = (lower + upper) / 2, (upper - lower) / 2 * padding
        h = np.maximum(h, 1e-3)
        return cls(c - h, c + h, resolution)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.upper - self.lower) / np.asarray(self.resolution)

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.lower.copy(), self.upper.copy(), self.resolution, self.occupied.copy())

    def voxel_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer voxel indices and an inside-the-box flag for each point."""
        idx = np.floor((points - self.lower) / self.voxel_size).astype(np.int64)
        inside = ((idx >= 0) & (idx < np.asarray(self.resolution))).all(-1)
        return np.clip(idx, 0, np.asarray(self.resolution) - 1), inside

    def is_occupied(self, points: np.ndarray) -> np.ndarray:
        idx, inside = self.voxel_of(np.asarray(points, dtype=np.float64))
        return inside & self.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "resolution": list(self.resolution)}

    def packed(self) -> bytes:
        return np.packbits(self.occupied.ravel()).tobytes()

    @classmethod
    def from_packed(cls, meta: dict, data: bytes) -> "OccupancyGrid":
        res = tuple(meta["resolution"])
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))[: int(np.prod(res))]
        return cls(meta["lower"], meta["upper"], res, bits.astype(bool).reshape(res))


# -- segment structure ------------------------------------------------------------

@dataclass
class RaySamples:
    """Sample placement for a batch of rays.

    ``kinds``/``coords`` (R, K) identify the boundary planes in sorted order
    (kind 0-2: plane ``x_kind = coord``; kind 3: fixed depth ``coord``),
    ``occ`` (R, K-1) flags occupied segments, ``seg`` (R, n) the segment
    each sample falls in and ``frac`` (R, n) the sample's position as a
    fraction of the ray's total occupied length.
    """

    kinds: np.ndarray
    coords: np.ndarray
    occ: np.ndarray
    seg: np.ndarray
    frac: np.ndarray
    hit: np.ndarray  # (R,) ray has positive occupied length
    t: np.ndarray  # (R, n) numeric sample depths
    deltas: np.ndarray  # (R,) per-sample interval length
    far: np.ndarray  # (R,) exit depth

    def depths(self, i: int) -> np.ndarray:
        return self.t[i] if self.hit[i] else np.zeros(0)


def _boundaries(grid: OccupancyGrid, o: np.ndarray, d: np.ndarray):
    n = len(o)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (grid.lower - o) * inv
        t1 = (grid.upper - o) * inv
    parallel = d == 0
    inside = (o >= grid.lower) & (o <= grid.upper)
    tlo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.fmin(t0, t1))
    thi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.fmax(t0, t1))
    tnear = np.maximum(tlo.max(1), 0.0)
    tfar = thi.min(1)
    box_hit = tfar > tnear

    kinds, coords, ts = [], [], []
    for a in range(3):
        planes = np.linspace(grid.lower[a], grid.upper[a], grid.resolution[a] + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (planes[None, :] - o[:, a : a + 1]) / d[:, a : a + 1]
        t = np.where(parallel[:, a : a + 1], np.inf, t)
        kinds.append(np.full(t.shape, a, dtype=np.int64))
        coords.append(np.broadcast_to(planes, t.shape))
        ts.append(t)
    # origin inside the box: the first boundary is the ray origin itself
    kinds.append(np.full((n, 1), 3, dtype=np.int64))
    coords.append(np.zeros((n, 1)))
    ts.append(np.where(tlo.max(1) < 0, 0.0, np.inf)[:, None])

    kinds = np.concatenate(kinds, 1)
    coords = np.concatenate(coords, 1)
    ts = np.concatenate(ts, 1)
    tol = 1e-9 * np.maximum(1.0, np.abs(np.where(box_hit, tfar, 0.0)))[:, None]
    keep = box_hit[:, None] & (ts >= tnear[:, None] - tol) & (ts <= tfar[:, None] + tol) & (ts >= 0)
    ts = np.where(keep, ts, np.inf)
    order = np.argsort(ts, axis=1, kind="stable")
    ts = np.take_along_axis(ts, order, 1)
    kinds = np.take_along_axis(kinds, order, 1)
    coords = np.take_along_axis(coords, order, 1)
    count = np.isfinite(ts).sum(1)
    kmax = max(int(count.max()) if n else 0, 2)
    ts, kinds, coords = ts[:, :kmax], kinds[:, :kmax], coords[:, :kmax]
    # pad with copies of the last valid boundary -> zero-length tail segments
    last = np.maximum(count - 1, 0)
    rows = np.arange(n)
    pad = np.arange(kmax)[None, :] >= count[:, None]
    ts = np.where(pad, ts[rows, last][:, None], ts)
    kinds = np.where(pad, kinds[rows, last][:, None], kinds)
    coords = np.where(pad, coords[rows, last][:, None], coords)
    none = count == 0
    ts[none], kinds[none], coords[none] = 0.0, 3, 0.0
    return ts, kinds, coords


def sample_along(
    grid: OccupancyGrid,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_samples: int = 64,
    stratified: bool = False,
    rng: np.random.Generator | None = None,
) -> RaySamples:
    """Spread ``n_samples`` over each ray's occupied segments (rays in the grid's frame)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    ts, kinds, coords = _boundaries(grid, o, d)
    mids = 0.5 * (ts[:, 1:] + ts[:, :-1])
    seg_len = ts[:, 1:] - ts[:, :-1]
    occ = grid.is_occupied(o[:, None, :] + mids[..., None] * d[:, None, :]) & (seg_len > 0)
    lengths = np.where(occ, seg_len, 0.0)
    total = lengths.sum(1)
    hit = total > 0
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = rng.random((len(o), n_samples))
    else:
        jitter = np.full((len(o), n_samples), 0.5)
    frac = (np.arange(n_samples)[None, :] + jitter) / n_samples
    target = frac * total[:, None]
    cum = np.cumsum(lengths, 1)
    seg = (cum[:, None, :] <= target[:, :, None]).sum(-1)
    seg = np.minimum(seg, lengths.shape[1] - 1)
    cum_excl = cum - lengths
    rows = np.arange(len(o))[:, None]
    t = ts[rows, seg] + target - cum_excl[rows, seg]
    return RaySamples(kinds, coords, occ, seg, frac, hit, t, total / n_samples, ts[:, -1])


def _sample_depths(s: RaySamples, o: torch.Tensor, d: torch.Tensor):
    """Differentiable sample depths, interval length and far bound for hit rays."""
    kinds = torch.from_numpy(s.kinds)
    coords = torch.from_numpy(s.coords).to(o.dtype)
    axis = kinds.clamp(max=2)
    o_a = torch.gather(o, 1, axis)
    d_a = torch.gather(d, 1, axis)
    plane = kinds < 3
    safe_d = torch.where(plane, d_a, torch.ones_like(d_a))
    tb = torch.where(plane, (coords - o_a) / safe_d, coords)
    occ = torch.from_numpy(s.occ).to(o.dtype)
    lengths = (tb[:, 1:] - tb[:, :-1]) * occ
    total = lengths.sum(1, keepdim=True)
    cum_excl = torch.cumsum(lengths, 1) - lengths
    seg = torch.from_numpy(s.seg)
    frac = torch.from_numpy(s.frac).to(o.dtype)
    t = torch.gather(tb, 1, seg) + frac * total - torch.gather(cum_excl, 1, seg)
    n = s.frac.shape[1]
    return t, (total / n).expand_as(t), tb[:, -1]


# -- integration ----------------------------------------------------------------------

def _composite(sigma, rgb, t, deltas, far, background):
    tau = sigma * deltas
    acc = torch.cumsum(tau, -1)
    trans = torch.exp(-(acc - tau))
    w = trans * (1.0 - torch.exp(-tau))
    alpha = 1.0 - torch.exp(-acc[..., -1])
    color = (w[..., None] * rgb).sum(-2) + (1.0 - alpha)[..., None] * background
    depth = (w * t).sum(-1) + (1.0 - alpha) * far
    return color, alpha, depth


def integrate(sigma, rgb, t, far, background=WHITE, deltas=None):
    """Quadrature of the volume rendering integral along each ray.

    ``sigma`` (..., N), ``rgb`` (..., N, 3), ``t`` (..., N) strictly
    increasing, ``far`` (...) the far bound.  Interval lengths default to
    ``t[i+1] - t[i]`` with the last one reaching ``far``.  Returns
    ``(rgb, alpha, depth)``; numpy in, numpy out.
    """
    as_numpy = not isinstance(sigma, torch.Tensor)
    cv = (lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64))) if as_numpy else (lambda x: x)
    sigma, rgb, t = cv(sigma), cv(rgb), cv(t)
    far = torch.as_tensor(far, dtype=t.dtype) if not isinstance(far, torch.Tensor) else far
    bg = torch.as_tensor(background, dtype=t.dtype)
    if t.shape[-1] > 1 and bool((t[..., 1:] <= t[..., :-1]).any()):
        raise ValueError("sample depths must be strictly increasing")
    if bool((sigma < 0).any()):
        raise ValueError("densities must be non-negative")
    if deltas is None:
        deltas = torch.cat([t[..., 1:] - t[..., :-1], (far[..., None] if far.dim() else far.reshape(1)) - t[..., -1:]], -1)
    else:
        deltas = cv(deltas)
    out = _composite(sigma, rgb, t, deltas, far, bg)
    return tuple(o.numpy() for o in out) if as_numpy else out


# -- fields ----------------------------------------------------------------------

@dataclass
class RadianceField:
    """Network weights plus the frame-dependent metadata needed to render them.

    ``bounds`` is the normalization box (points map to [-1, 1]^3);
    ``config_lower``/``config_upper`` normalize joint values the same way.
    """

    weights: MlpWeights
    spec: EncodingSpec
    grid: OccupancyGrid
    bounds: tuple
    config_lower: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    config_upper: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))
    part: str | None = None

    @classmethod
    def create(cls, grid: OccupancyGrid, spec: EncodingSpec | None = None, config_lower=(), config_upper=(),
               part=None, **init_kw) -> "RadianceField":
        spec = spec or EncodingSpec()
        lo = np.asarray(config_lower, dtype=np.float64)
        weights = init_weights(spec, n_config=len(lo), **init_kw)
        return cls(weights, spec, grid.copy(), (grid.lower.copy(), grid.upper.copy()), lo,
                   np.asarray(config_upper, dtype=np.float64), part)

    @property
    def n_config(self) -> int:
        return self.weights.n_config

    @property
    def dtype(self) -> torch.dtype:
        return self.weights.dtype

    def normalize_points(self, x: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.bounds[0], dtype=x.dtype)
        hi = torch.as_tensor(self.bounds[1], dtype=x.dtype)
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    def normalize_config(self, c: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.config_lower, dtype=c.dtype)
        span = torch.as_tensor(np.where(self.config_upper > self.config_lower,
                                        self.config_upper - self.config_lower, 1.0), dtype=c.dtype)
        return 2.0 * (c - lo) / span - 1.0

    def config_tensor(self, config) -> torch.Tensor | None:
        if self.n_config == 0:
            if config is not None and len(np.atleast_1d(config)) and np.asarray(config).size:
                raise ValueError("this field takes no configuration")
            return None
        if config is None:
            raise ValueError(f"this field needs a configuration of length {self.n_config}")
        c = config.to(self.dtype) if isinstance(config, torch.Tensor) else \
            torch.as_tensor(np.asarray(config, float), dtype=self.dtype)
        if c.shape[-1] != self.n_config:
            raise ValueError(f"configuration arity {c.shape[-1]} does not match the field's {self.n_config}")
        return c

    def clone(self, dtype=None) -> "RadianceField":
        return RadianceField(self.weights.clone(dtype), self.spec, self.grid.copy(),
                             (self.bounds[0].copy(), self.bounds[1].copy()),
                             self.config_lower.copy(), self.config_upper.copy(), self.part)


@dataclass
class RenderOutput:
    rgb: np.ndarray | torch.Tensor  # (P, 3)
    alpha: np.ndarray | torch.Tensor  # (P,)
    depth: np.ndarray | torch.Tensor  # (P,)

    def numpy(self) -> "RenderOutput":
        cv = lambda x: x.detach().cpu().numpy().astype(np.float64) if isinstance(x, torch.Tensor) else x  # noqa: E731
        return RenderOutput(cv(self.rgb), cv(self.alpha), cv(self.depth))

    def image(self, camera: Camera):
        out = self.numpy()
        return (out.rgb.reshape(camera.height, camera.width, 3), out.alpha.reshape(camera.height, camera.width),
                out.depth.reshape(camera.height, camera.width))


def render_rays(
    fld: RadianceField,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    config=None,
    background=WHITE,
    n_samples: int = 64,
    stratified: bool = False,
    rng: np.random.Generator | None = None,
    chunk: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Render rays given in the field's own frame.

    ``config`` may be (k,) or per-ray (R, k) raw joint values.  Everything
    returned is differentiable with respect to origins, directions,
    configuration and weights.
    """
    dtype = fld.dtype
    origins = origins.to(dtype)
    dirs = dirs.to(dtype)
    n = origins.shape[0]
    cfg = fld.config_tensor(config)
    bg = torch.as_tensor(background, dtype=dtype)
    if chunk is not None and n > chunk:
        outs = []
        for i in range(0, n, chunk):
            c = cfg if cfg is None or cfg.dim() == 1 else cfg[i : i + chunk]
            outs.append(render_rays(fld, origins[i : i + chunk], dirs[i : i + chunk], c, background,
                                    n_samples, stratified, rng))
        return tuple(torch.cat(x) for x in zip(*outs))

    samples = sample_along(fld.grid, origins.detach().cpu().numpy(), dirs.detach().cpu().numpy(),
                           n_samples, stratified, rng)
    idx = np.nonzero(samples.hit)[0]
    rgb = bg.expand(n, 3)
    alpha = torch.zeros(n, dtype=dtype)
    depth = torch.zeros(n, dtype=dtype)
    if len(idx) == 0:
        return rgb.clone(), alpha, depth
    sub = RaySamples(samples.kinds[idx], samples.coords[idx], samples.occ[idx], samples.seg[idx],
                     samples.frac[idx], samples.hit[idx], samples.t[idx], samples.deltas[idx], samples.far[idx])
    ti = torch.from_numpy(idx)
    o, d = origins[ti], dirs[ti]
    t, deltas, far = _sample_depths(sub, o, d)
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    c = None
    if cfg is not None:
        c = fld.normalize_config(cfg if cfg.dim() == 1 else cfg[ti])
    sigma, color = field_forward(fld.weights, fld.spec, fld.normalize_points(pts), d, c)
    rgb_h, alpha_h, depth_h = _composite(sigma, color, t, deltas, far, bg)
    rgb = rgb.index_put((ti,), rgb_h)
    alpha = alpha.index_put((ti,), alpha_h)
    depth = depth.index_put((ti,), depth_h)
    return rgb, alpha, depth


# -- poses ----------------------------------------------------------------------

def _skew(w: torch.Tensor) -> torch.Tensor:
    z = torch.zeros((), dtype=w.dtype)
    return torch.stack([
        torch.stack([z, -w[2], w[1]]),
        torch.stack([w[2], z, -w[0]]),
        torch.stack([-w[1], w[0], z]),
    ])


def pose_tensors(anchor: RigidTransform, twist: torch.Tensor | None = None, dtype=torch.float64):
    """Rotation matrix and translation of ``anchor ∘ (exp(omega), v)`` for twist ``(omega, v)``."""
    r_a = torch.as_tensor(anchor.rotation_matrix, dtype=dtype)
    t_a = torch.as_tensor(anchor.translation, dtype=dtype)
    if twist is None:
        return r_a, t_a
    twist = twist.to(dtype)
    r = r_a @ torch.linalg.matrix_exp(_skew(twist[:3]))
    return r, t_a + r_a @ twist[3:]


def apply_twist(anchor: RigidTransform, twist) -> RigidTransform:
    """Fold a twist into a new anchor pose (same convention as :func:`pose_tensors`)."""
    twist = np.asarray(twist, dtype=np.float64)
    return anchor @ RigidTransform.from_rotvec(twist[:3], twist[3:])


def camera_rays_in_object(camera: Camera, pixels, rot: torch.Tensor, trans: torch.Tensor):
    """Camera rays expressed in the frame of an object at pose ``(rot, trans)`` (object-to-world)."""
    o, d = generate_rays(camera, pixels)
    o = torch.as_tensor(o, dtype=rot.dtype)
    d = torch.as_tensor(d, dtype=rot.dtype)
    return (o - trans) @ rot, d @ rot


def render(
    fld: RadianceField,
    camera: Camera,
    object_pose: RigidTransform,
    config=None,
    pixels: np.ndarray | None = None,
    background=WHITE,
    n_samples: int = 64,
    chunk: int = 2048,
) -> RenderOutput:
    """Render ``fld`` placed at ``object_pose`` as seen by ``camera`` (no gradients, numpy out)."""
    if pixels is None:
        pixels = all_pixels(camera)
    pixels = np.asarray(pixels).reshape(-1, 2)
    if len(pixels) == 0:
        return RenderOutput(np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    with torch.no_grad():
        rot, trans = pose_tensors(object_pose, dtype=fld.dtype)
        o, d = camera_rays_in_object(camera, pixels, rot, trans)
        out = render_rays(fld, o, d, config, background, n_samples, chunk=chunk)
    return RenderOutput(*out).numpy()


# -- pruning --------------------------------------------------------------------

def voxel_probe_points(grid: OccupancyGrid) -> tuple[np.ndarray, np.ndarray]:
    """Corner lattice (rx+1, ry+1, rz+1, 3) and voxel centers (rx, ry, rz, 3)."""
    axes = [np.linspace(grid.lower[a], grid.upper[a], grid.resolution[a] + 1) for a in range(3)]
    corners = np.stack(np.meshgrid(*axes, indexing="ij"), -1)
    mids = [0.5 * (x[1:] + x[:-1]) for x in axes]
    centers = np.stack(np.meshgrid(*mids, indexing="ij"), -1)
    return corners, centers


def max_voxel_density(fld: RadianceField, grid: OccupancyGrid, configs: Sequence | None = None,
                      chunk: int = 32768) -> np.ndarray:
    corners, centers = voxel_probe_points(grid)
    cfgs = [None] if fld.n_config == 0 else list(configs if configs is not None else [])
    if fld.n_config and not cfgs:
        raise ValueError("a configuration-aware field needs configuration samples for pruning")
    best = np.zeros(grid.resolution)

    def dens(points: np.ndarray, cfg) -> np.ndarray:
        flat = points.reshape(-1, 3)
        out = []
        c = None if cfg is None else fld.normalize_config(torch.as_tensor(np.asarray(cfg, float), dtype=fld.dtype))
        for i in range(0, len(flat), chunk):
            x = fld.normalize_points(torch.as_tensor(flat[i : i + chunk], dtype=fld.dtype))
            out.append(field_density(fld.weights, fld.spec, x, c).numpy())
        return np.concatenate(out).reshape(points.shape[:-1])

    with torch.no_grad():
        for cfg in cfgs:
            dc = dens(corners, cfg)
            m = dens(centers, cfg)
            for i in (0, 1):
                for j in (0, 1):
                    for k in (0, 1):
                        m = np.maximum(m, dc[i : i + grid.resolution[0], j : j + grid.resolution[1],
                                             k : k + grid.resolution[2]])
            best = np.maximum(best, m)
    return best


def prune_grid(fld: RadianceField, grid: OccupancyGrid | None = None, config_samples=None,
               threshold: float = 0.01) -> OccupancyGrid:
    """Keep an occupied voxel iff its max sampled density reaches ``threshold``."""
    grid = (grid or fld.grid).copy()
    if threshold > 0:
        grid.occupied &= max_voxel_density(fld, grid, config_samples) >= threshold
    if not grid.occupied.any():
        raise DegenerateFieldError("every voxel was pruned; the field has no density above the threshold")
    return grid


# -- checkpoints ------------------------------------------------------------------

def checkpoint_bytes(fld: RadianceField, extra: dict | None = None) -> bytes:
    params = fld.weights.flat()
    grid_bytes = fld.grid.packed()
    header = {
        "format": "narf-field",
        "encoding": fld.spec.to_dict(),
        "shapes": fld.weights.shapes,
        "rank": fld.weights.rank,
        "dof_arity": fld.n_config,
        "density_scale": fld.weights.density_scale,
        "bounds": [np.asarray(fld.bounds[0]).tolist(), np.asarray(fld.bounds[1]).tolist()],
        "config_lower": fld.config_lower.tolist(),
        "config_upper": fld.config_upper.tolist(),
        "part": fld.part,
        "grid": fld.grid.to_dict(),
        "n_params": int(params.size),
        "grid_bytes": len(grid_bytes),
        "extra": extra or {},
    }
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(h)) + h + params.tobytes() + grid_bytes


def save_checkpoint(path, fld: RadianceField, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(fld, extra))
    return path


def parse_checkpoint(data: bytes, dtype=torch.float32) -> tuple[RadianceField, dict]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a field checkpoint")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    off = 16 + hlen
    n = header["n_params"]
    params = np.frombuffer(data[off : off + 4 * n], dtype="<f4")
    grid = OccupancyGrid.from_packed(header["grid"], data[off + 4 * n : off + 4 * n + header["grid_bytes"]])

    def layers(shapes):
        return [(torch.zeros(ws, dtype=dtype), torch.zeros(bs, dtype=dtype)) for ws, bs in shapes]

    weights = MlpWeights(layers(header["shapes"]["position"]), layers(header["shapes"]["direction"]),
                         header["rank"], header["dof_arity"], header["density_scale"])
    weights.load_flat(params)
    fld = RadianceField(weights, EncodingSpec(**header["encoding"]), grid,
                        (np.asarray(header["bounds"][0]), np.asarray(header["bounds"][1])),
                        np.asarray(header["config_lower"], dtype=np.float64),
                        np.asarray(header["config_upper"], dtype=np.float64), header["part"])
    return fld, header["extra"]


def load_checkpoint(path, dtype=torch.float32) -> tuple[RadianceField, dict]:
    return parse_checkpoint(Path(path).read_bytes(), dtype)
