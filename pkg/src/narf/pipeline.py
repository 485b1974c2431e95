"""Two-stage training: per-part fields, composition, configuration-aware field.

Stage one fits a configuration-free field for every rigid part, using
forward kinematics to express each training view in that part's frame.
The part fields are then rendered at random cameras and configurations
and merged per pixel by expected depth, producing a dense synthetic
dataset over the configuration space.  Stage two fits one field whose
position branch also sees the (encoded) configuration.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field as dc_field, asdict
from typing import Mapping, Sequence

import numpy as np
import torch

from .articulation import (
    ArticulationModel, RigidTransform, corner_configurations, forward_kinematics, sample_configuration,
)
from .camera import Camera, all_pixels
from .estimation import masked_mse
from .field import (
    OccupancyGrid, RadianceField, prune_grid, render, render_rays,
)
from .nn import AdamState, EncodingSpec, adam_step, backward
from .synthgen import (
    BACKGROUND, LabeledFrame, make_rng, part_bounds, sample_camera,
)

log = logging.getLogger(__name__)

CompositeSample = LabeledFrame


@dataclass
class TrainingConfig:
    iterations: int = 20000
    batch_rays: int = 1024
    lr: float = 5e-4
    lr_final_fraction: float = 0.1
    n_samples: int = 64
    seed: int = 0
    hidden_position: tuple = (128, 128, 128, 128)
    hidden_direction: tuple = (64, 64)
    rank: int = 8
    levels_position: int = 10
    levels_direction: int = 4
    levels_configuration: int = 10
    include_identity: bool = True
    density_scale: float = 10.0
    grid_resolution: int = 32
    grid_padding: float = 1.2
    prune_every: int = 5000
    prune_threshold: float = 0.01
    prune_configs: int = 8
    dtype: str = "float32"

    @property
    def encoding(self) -> EncodingSpec:
        return EncodingSpec(self.levels_position, self.levels_direction, self.levels_configuration,
                            self.include_identity)

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("hidden_position", "hidden_direction"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


@dataclass
class TrainingResult:
    field: RadianceField
    loss_trace: list = dc_field(default_factory=list)
    seconds: float = 0.0
    metrics: dict = dc_field(default_factory=dict)


# -- ray pools ----------------------------------------------------------------------

@dataclass
class RayPool:
    """Training rays stored compactly as (frame, pixel) pairs.

    Per frame: camera intrinsics and the camera-to-field-frame transform;
    per ray: frame index, pixel and target color.
    """

    intrinsics: np.ndarray  # (F, 4) fx, fy, cx, cy
    rotations: np.ndarray  # (F, 3, 3)
    translations: np.ndarray  # (F, 3)
    configs: np.ndarray  # (F, k)
    frame: np.ndarray  # (N,) int32
    pixel: np.ndarray  # (N, 2) int16
    target: np.ndarray  # (N, 3) float32

    def __len__(self) -> int:
        return len(self.frame)

    def rays(self, idx: np.ndarray):
        f = self.frame[idx]
        k = self.intrinsics[f]
        px = self.pixel[idx].astype(np.float64)
        d_cam = np.stack([(px[:, 0] - k[:, 2]) / k[:, 0], (px[:, 1] - k[:, 3]) / k[:, 1], np.ones(len(idx))], -1)
        d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
        d = np.einsum("nij,nj->ni", self.rotations[f], d_cam)
        o = self.translations[f]
        return o, d, self.configs[f], self.target[idx]


def _box_hit(o: np.ndarray, d: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lower - o) / d
        t1 = (upper - o) / d
    tlo = np.where(d == 0, np.where((o >= lower) & (o <= upper), -np.inf, np.inf), np.fmin(t0, t1))
    thi = np.where(d == 0, np.where((o >= lower) & (o <= upper), np.inf, -np.inf), np.fmax(t0, t1))
    return thi.min(1) > np.maximum(tlo.max(1), 0.0)


def build_ray_pool(
    frames: Sequence[LabeledFrame],
    field_poses: Sequence[RigidTransform],
    grid: OccupancyGrid,
    targets: Sequence[np.ndarray],
    valid: Sequence[np.ndarray],
    configs: np.ndarray,
) -> RayPool:
    """Collect rays of every frame that cross the grid box.

    ``field_poses[i]`` places the field's frame in the world of frame ``i``;
    ``targets``/``valid`` are per-frame (H, W, 3) colors and (H, W) flags.
    """
    intr, rots, trans, fidx, pix, tgt = [], [], [], [], [], []
    for i, (fr, pose) in enumerate(zip(frames, field_poses)):
        cam = fr.camera
        cam_in_field = pose.inverse() @ cam.pose
        r, t = cam_in_field.rotation_matrix, cam_in_field.translation
        intr.append([cam.fx, cam.fy, cam.cx, cam.cy])
        rots.append(r)
        trans.append(t)
        px = all_pixels(cam)
        d_cam = np.stack([(px[:, 0] - cam.cx) / cam.fx, (px[:, 1] - cam.cy) / cam.fy, np.ones(len(px))], -1)
        d = d_cam @ r.T
        keep = _box_hit(np.broadcast_to(t, d.shape), d, grid.lower, grid.upper) & valid[i].ravel()
        sel = np.nonzero(keep)[0]
        fidx.append(np.full(len(sel), i, dtype=np.int32))
        pix.append(px[sel].astype(np.int16))
        tgt.append(targets[i].reshape(-1, 3)[sel].astype(np.float32))
    return RayPool(
        np.asarray(intr, dtype=np.float64), np.asarray(rots), np.asarray(trans),
        np.asarray(configs, dtype=np.float64).reshape(len(frames), -1),
        np.concatenate(fidx), np.concatenate(pix), np.concatenate(tgt),
    )


def _cosine_lr(cfg: TrainingConfig, it: int) -> float:
    lo = cfg.lr * cfg.lr_final_fraction
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * it / max(cfg.iterations, 1)))


def fit_field(
    fld: RadianceField,
    pool: RayPool,
    cfg: TrainingConfig,
    prune_configs: np.ndarray | None = None,
    progress: bool = False,
) -> TrainingResult:
    """Minimize the per-ray squared color error over random ray batches."""
    if len(pool) == 0:
        raise ValueError("no training rays intersect the field's bounding box")
    rng = make_rng(cfg.seed + 1)
    params = fld.weights.requires_grad_(True).parameters()
    state = AdamState.for_params(params)
    trace = []
    start = time.perf_counter()
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(pool), size=min(cfg.batch_rays, len(pool)))
        o, d, c, target = pool.rays(idx)
        config = torch.as_tensor(c, dtype=fld.dtype) if fld.n_config else None
        rgb, _, _ = render_rays(fld, torch.as_tensor(o), torch.as_tensor(d), config,
                                n_samples=cfg.n_samples, stratified=True, rng=rng)
        loss = ((rgb - torch.as_tensor(target, dtype=fld.dtype)) ** 2).mean()
        grads = backward(loss, params)
        adam_step(params, grads, state, _cosine_lr(cfg, it))
        trace.append(loss.item())
        if cfg.prune_every and (it + 1) % cfg.prune_every == 0 and it + 1 < cfg.iterations:
            fld.grid = prune_grid(fld, fld.grid, prune_configs, cfg.prune_threshold)
        if progress and (it % 500 == 0 or it == cfg.iterations - 1):
            log.info("iter %d loss %.5f occupied %.3f", it, trace[-1], fld.grid.occupied.mean())
    fld.weights.requires_grad_(False)
    return TrainingResult(fld, trace, time.perf_counter() - start)


# -- stage one: parts --------------------------------------------------------------------

def _check_masks(frames: Sequence[LabeledFrame]) -> None:
    for i, fr in enumerate(frames):
        if getattr(fr, "part_mask", None) is None:
            raise ValueError(f"frame {i} has no part mask")


def part_grid(model: ArticulationModel, geometry, part: str, cfg: TrainingConfig) -> OccupancyGrid:
    lo, hi = part_bounds(model, geometry, part)
    r = cfg.grid_resolution
    return OccupancyGrid.around(lo, hi, cfg.grid_padding, (r, r, r))


def part_targets(frames: Sequence[LabeledFrame], model: ArticulationModel, part: str, background=BACKGROUND):
    """Target images and valid-pixel flags for one part.

    Pixels of the part keep their color, background pixels stay background
    and pixels showing another part are left out: they occlude this part,
    whose appearance there is unknown.
    """
    k = model.part_index(part)
    targets, valid = [], []
    for fr in frames:
        mine = fr.part_mask == k
        targets.append(np.where(mine[..., None], fr.rgb, np.asarray(background)))
        valid.append(mine | (fr.part_mask == 0))
    return targets, valid


def train_part(
    frames: Sequence[LabeledFrame],
    part: str,
    model: ArticulationModel,
    geometry,
    hp: TrainingConfig | None = None,
    progress: bool = False,
) -> TrainingResult:
    """Fit a configuration-free field of ``part`` in its own frame."""
    hp = hp or TrainingConfig()
    if part not in model.part_ids:
        raise KeyError(f"part {part!r} is not in the model")
    _check_masks(frames)
    grid = part_grid(model, geometry, part, hp)
    fld = RadianceField.create(grid, hp.encoding, part=part, hidden_position=hp.hidden_position,
                               hidden_direction=hp.hidden_direction, rank=hp.rank, seed=hp.seed,
                               dtype=hp.torch_dtype, density_scale=hp.density_scale)
    poses = [forward_kinematics(model, fr.object_pose, fr.config)[part] for fr in frames]
    targets, valid = part_targets(frames, model, part)
    pool = build_ray_pool(frames, poses, grid, targets, valid, np.zeros((len(frames), 0)))
    return fit_field(fld, pool, hp, progress=progress)


# -- composition ---------------------------------------------------------------------

def render_parts(
    part_fields: Mapping[str, RadianceField],
    model: ArticulationModel,
    camera: Camera,
    object_pose: RigidTransform,
    config,
    n_samples: int = 64,
    pixels: np.ndarray | None = None,
):
    """Per-part renders (rgb, alpha, depth), stacked in model part order."""
    missing = [p for p in model.part_ids if p not in part_fields]
    if missing:
        raise KeyError(f"missing part checkpoints: {missing}")
    poses = forward_kinematics(model, object_pose, config)
    outs = [render(part_fields[p], camera, poses[p], None, pixels, n_samples=n_samples) for p in model.part_ids]
    return (np.stack([o.rgb for o in outs]), np.stack([o.alpha for o in outs]), np.stack([o.depth for o in outs]))


def merge_min_depth(rgb: np.ndarray, alpha: np.ndarray, depth: np.ndarray, alpha_fg: float = 0.5):
    """Per-pixel merge of part renders (leading axis = part, in model order).

    Among parts with ``alpha > alpha_fg`` the smallest expected depth wins
    (ties go to the lower part index).  Pixels without a foreground part
    take the color of the most opaque part and get label 0 / depth 0.
    Returns ``(rgb, depth, label)`` with 1-based labels.
    """
    fg = alpha > alpha_fg
    key = np.where(fg, depth, np.inf)
    winner = np.argmin(key, axis=0)  # first minimum -> lowest index
    any_fg = fg.any(0)
    fallback = np.argmax(alpha, axis=0)
    choice = np.where(any_fg, winner, fallback)
    cols = np.arange(rgb.shape[1])
    out_rgb = rgb[choice, cols]
    out_depth = np.where(any_fg, depth[choice, cols], 0.0)
    label = np.where(any_fg, winner + 1, 0).astype(np.uint8)
    return out_rgb, out_depth, label


def composite_view(part_fields, model, camera, object_pose, config, n_samples=64, alpha_fg=0.5) -> CompositeSample:
    rgb, alpha, depth = render_parts(part_fields, model, camera, object_pose, config, n_samples)
    out_rgb, out_depth, label = merge_min_depth(rgb, alpha, depth, alpha_fg)
    h, w = camera.height, camera.width
    return CompositeSample(out_rgb.reshape(h, w, 3), out_depth.reshape(h, w), label.reshape(h, w), camera,
                           object_pose, np.asarray(config, dtype=np.float64))


def composite(
    part_fields: Mapping[str, RadianceField],
    model: ArticulationModel,
    n_samples: int = 5000,
    camera_radius: float = 1.0,
    seed: int = 0,
    camera: Camera | None = None,
    upper_only: bool = False,
    render_samples: int = 64,
    alpha_fg: float = 0.5,
    holdout=None,
    holdout_radius: float = 0.0,
    progress: bool = False,
) -> list[CompositeSample]:
    """Render the parts at random cameras and configurations and merge them.

    Configurations closer than ``holdout_radius`` (max-norm) to any entry
    of ``holdout`` are redrawn, which keeps those states out of the set.
    """
    template = camera or Camera.default()
    rng = make_rng(seed)
    held = np.zeros((0, model.n_dof)) if holdout is None else \
        np.asarray(holdout, dtype=np.float64).reshape(-1, model.n_dof)
    out = []
    for i in range(n_samples):
        cam = sample_camera(rng, camera_radius, template, upper_only=upper_only)
        config = sample_configuration(model, rng)
        for _ in range(10_000):
            if not len(held) or np.abs(held - config).max(1).min() >= holdout_radius:
                break
            config = sample_configuration(model, rng)
        else:
            raise ValueError("the holdout region covers the whole configuration space")
        out.append(composite_view(part_fields, model, cam, RigidTransform.identity(), config, render_samples, alpha_fg))
        if progress and i % 500 == 0:
            log.info("composite %d/%d", i, n_samples)
    return out


# -- stage two: configuration-aware field ------------------------------------------------

def object_bounds(model: ArticulationModel, geometry) -> tuple[np.ndarray, np.ndarray]:
    """Root-frame box enclosing every part over all joint-limit corners."""
    pts = []
    for cfg in corner_configurations(model):
        poses = forward_kinematics(model, RigidTransform.identity(), cfg)
        for pid in model.part_ids:
            for prim in geometry[pid]:
                pts.append(poses[pid].apply(prim.local_corners()))
    pts = np.concatenate(pts)
    return pts.min(0), pts.max(0)


def train_config(
    composites: Sequence[CompositeSample],
    model: ArticulationModel,
    geometry,
    hp: TrainingConfig | None = None,
    progress: bool = False,
) -> TrainingResult:
    """Fit the configuration-conditioned field on composited samples."""
    hp = hp or TrainingConfig(iterations=40000)
    configs = np.asarray([c.config for c in composites], dtype=np.float64).reshape(len(composites), -1)
    if configs.shape[1] != model.n_dof:
        raise ValueError(f"composites carry {configs.shape[1]} joint values, model has {model.n_dof}")
    if len(np.unique(configs, axis=0)) < 2:
        warnings.warn("composites cover fewer than two configurations", stacklevel=2)
    lo, hi = object_bounds(model, geometry)
    r = hp.grid_resolution
    grid = OccupancyGrid.around(lo, hi, hp.grid_padding, (r, r, r))
    fld = RadianceField.create(grid, hp.encoding, model.lower, model.upper, hidden_position=hp.hidden_position,
                               hidden_direction=hp.hidden_direction, rank=hp.rank, seed=hp.seed,
                               dtype=hp.torch_dtype, density_scale=hp.density_scale)
    pool = build_ray_pool(composites, [c.object_pose for c in composites], grid, [c.rgb for c in composites],
                          [np.ones(c.rgb.shape[:2], dtype=bool) for c in composites], configs)
    prune_cfgs = np.stack([sample_configuration(model, make_rng(hp.seed + 7 + i)) for i in range(hp.prune_configs)])
    prune_cfgs = np.concatenate([corner_configurations(model), prune_cfgs])
    return fit_field(fld, pool, hp, prune_configs=prune_cfgs, progress=progress)


# -- evaluation ---------------------------------------------------------------------------

def render_frame(fld: RadianceField, frame: LabeledFrame, n_samples: int = 64, model: ArticulationModel | None = None):
    """Render ``fld`` at a frame's ground-truth state; part fields are placed by forward kinematics."""
    pose = frame.object_pose
    config = frame.config if fld.n_config else None
    if fld.part is not None and model is not None:
        pose = forward_kinematics(model, frame.object_pose, frame.config)[fld.part]
    return render(fld, frame.camera, pose, config, n_samples=n_samples).image(frame.camera)[0]


def evaluate_renders(
    fld: RadianceField,
    frames: Sequence[LabeledFrame],
    n_samples: int = 64,
    model: ArticulationModel | None = None,
) -> dict:
    """Per-frame masked per-pixel MSE of renders at the labelled state, plus the mean.

    A part field is scored on its own pixels; pixels owned by other parts are
    skipped, as in part training, since an occluder hides what the part renders.
    """
    per_frame = []
    for i, fr in enumerate(frames):
        mask = fr.part_mask > 0
        img = render_frame(fld, fr, n_samples, model)
        obs = fr.rgb
        if fld.part is not None and model is not None:
            idx = model.part_index(fld.part)
            keep = (fr.part_mask == 0) | (fr.part_mask == idx)
            mask, img, obs = (fr.part_mask == idx)[keep], img[keep], obs[keep]
        per_frame.append({"index": i, "mse": float(masked_mse(img, obs, mask)), "mask_pixels": int(mask.sum())})
    values = [p["mse"] for p in per_frame]
    return {"frames": per_frame, "mean_mse": float(np.mean(values)) if values else float("nan"),
            "n_frames": len(values)}


def compare_render_speed(
    config_field: RadianceField,
    part_fields: Mapping[str, RadianceField],
    model: ArticulationModel,
    cameras: Sequence[Camera],
    configs: Sequence,
    n_samples: int = 64,
    repeats: int = 1,
) -> dict:
    """Wall-clock time of the unified field against render-and-merge of all parts (same pixels)."""
    def run_unified():
        for cam, cfg in zip(cameras, configs):
            render(config_field, cam, RigidTransform.identity(), cfg, n_samples=n_samples)

    def run_parts():
        for cam, cfg in zip(cameras, configs):
            composite_view(part_fields, model, cam, RigidTransform.identity(), cfg, n_samples)

    times = {}
    for name, fn in (("unified", run_unified), ("parts", run_parts)):
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        times[name] = best
    times["speedup"] = times["parts"] / times["unified"]
    return times
