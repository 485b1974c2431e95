"""Pose refinement and configuration estimation by gradient descent through a trained field."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .articulation import ArticulationModel, RigidTransform
from .camera import Camera
from .nn import AdamState, adam_step, backward
from .synthgen import make_rng, place_part_points, sample_part_surfaces

WHITE = (1.0, 1.0, 1.0)


def masked_mse(render, observation, mask, background=WHITE):
    """Squared error of a render against the masked observation, per mask pixel and channel.

    Outside the mask the render is compared against the background color;
    the sum over all given pixels is divided by ``3 * mask.sum()``.
    Accepts numpy arrays or tensors (``render`` may carry gradients).
    """
    is_t = isinstance(render, torch.Tensor)
    mask_np = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    n = int(mask_np.astype(bool).sum())
    if n == 0:
        raise ValueError("mask is empty")
    obs = observation.detach().cpu().numpy() if isinstance(observation, torch.Tensor) else np.asarray(observation)
    target = np.where(mask_np.astype(bool)[..., None], obs, np.asarray(background, dtype=np.float64))
    if is_t:
        diff = render - torch.as_tensor(target, dtype=render.dtype)
        return (diff**2).sum() / (3 * n)
    diff = np.asarray(render, dtype=np.float64) - target
    return float((diff**2).sum() / (3 * n))


def sample_perturbation(rng: np.random.Generator, rot_deg: float = 10.0, trans_m: float = 0.02):
    """Azimuth and elevation offsets (degrees) and a per-axis translation offset (meters)."""
    az, el = rng.uniform(-rot_deg, rot_deg, size=2) if rot_deg > 0 else (0.0, 0.0)
    dt = rng.uniform(-trans_m, trans_m, size=3) if trans_m > 0 else np.zeros(3)
    return float(az), float(el), dt


def perturb_pose(pose: RigidTransform, rot_deg: float = 10.0, trans_m: float = 0.02, seed: int = 0,
                 rng: np.random.Generator | None = None) -> RigidTransform:
    """Rotate about the object's own z (azimuth) then y (elevation) axes and shift in the world.

    Both angles are uniform in ``[-rot_deg, rot_deg]``; each translation
    component is uniform in ``[-trans_m, trans_m]``.
    """
    rng = rng or make_rng(seed)
    az, el, dt = sample_perturbation(rng, rot_deg, trans_m)
    rot = Rotation.from_euler("ZY", [az, el], degrees=True)
    local = RigidTransform(rot.as_quat())
    moved = pose @ local
    return RigidTransform(moved.rotation, moved.translation + dt)


def add_metric(model: ArticulationModel, geometry, gt, est, n_points: int = 1000, seed: int = 0) -> float:
    """Mean distance between model surface points placed at the true and the estimated (pose, config)."""
    pts, owner = sample_part_surfaces(model, geometry, n_points, make_rng(seed))
    a = place_part_points(model, gt[0], gt[1], pts, owner)
    b = place_part_points(model, est[0], est[1], pts, owner)
    return float(np.linalg.norm(a - b, axis=1).mean())


@dataclass
class EstimationReport:
    pose: RigidTransform
    config: np.ndarray
    loss_trace: list
    diverged: bool = False
    add: float | None = None
    config_error: list | None = None
    pose_trace: list = dc_field(default_factory=list)
    config_trace: list = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "config": [float(c) for c in self.config],
            "loss_trace": [float(v) for v in self.loss_trace],
            "config_trace": [[float(c) for c in cfg] for cfg in self.config_trace],
            "diverged": self.diverged,
            "add": self.add,
            "config_error": self.config_error,
        }


def _pixel_window(mask: np.ndarray, dilation: int) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    h, w = mask.shape
    r0, r1 = max(rows.min() - dilation, 0), min(rows.max() + dilation, h - 1)
    c0, c1 = max(cols.min() - dilation, 0), min(cols.max() + dilation, w - 1)
    v, u = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    return np.stack([u.ravel(), v.ravel()], -1)


def _in_frustum(camera: Camera, pose: RigidTransform) -> bool:
    p = camera.pose.inverse().apply(pose.translation)
    if p[2] <= 0:
        return False
    u = camera.fx * p[0] / p[2] + camera.cx
    v = camera.fy * p[1] / p[2] + camera.cy
    return bool(-0.5 <= u <= camera.width - 0.5 and -0.5 <= v <= camera.height - 0.5)


def estimate(
    fld,
    observation: np.ndarray,
    mask: np.ndarray,
    camera: Camera,
    initial_pose: RigidTransform,
    iterations: int = 150,
    lr_config: float = 0.01,
    lr_pose: float = 0.001,
    pixel_budget: int = 1024,
    seed: int = 0,
    initial_config=None,
    n_samples: int = 64,
    dilation: int = 4,
    background=WHITE,
    truth: tuple | None = None,
    model: ArticulationModel | None = None,
    geometry=None,
) -> EstimationReport:
    """Refine pose and configuration of ``fld`` against an RGB observation.

    The pose is kept as an anchor plus a 6-vector twist that is folded back
    into the anchor after every Adam step; the configuration starts at the
    middle of the joint ranges and is clamped to them after each step.
    When ``truth = (pose, config)`` and the model/geometry are given, the
    report carries ADD and per-joint configuration error.
    """
    from .field import apply_twist, camera_rays_in_object, pose_tensors, render_rays

    mask = np.asarray(mask).astype(bool)
    if mask.sum() == 0:
        raise ValueError("degenerate (empty) mask")
    rng = make_rng(seed)
    lower, upper = fld.config_lower, fld.config_upper
    config0 = 0.5 * (lower + upper) if initial_config is None else np.asarray(initial_config, dtype=np.float64)
    dtype = torch.float64
    twist = torch.zeros(6, dtype=dtype, requires_grad=True)
    config = torch.tensor(np.clip(config0, lower, upper), dtype=dtype, requires_grad=True)
    params = [twist, config] if fld.n_config else [twist]
    lrs = [lr_pose, lr_config][: len(params)]
    state = AdamState.for_params(params)
    window = _pixel_window(mask, dilation)
    anchor = initial_pose
    obs = np.asarray(observation, dtype=np.float64)

    def loss_at(pixels):
        rot, trans = pose_tensors(anchor, twist, dtype)
        o, d = camera_rays_in_object(camera, pixels, rot, trans)
        cfg = config if fld.n_config else None
        rgb, _, _ = render_rays(fld, o, d, cfg, background, n_samples)
        sel_mask = mask[pixels[:, 1], pixels[:, 0]]
        if not sel_mask.any():
            sel_mask = sel_mask.copy()
            sel_mask[0] = True  # keeps the normalisation finite for empty pixel draws
        return masked_mse(rgb, obs[pixels[:, 1], pixels[:, 0]], sel_mask, background)

    def pick():
        if len(window) <= pixel_budget:
            return window
        return window[np.sort(rng.choice(len(window), pixel_budget, replace=False))]

    trace, pose_trace, config_trace = [], [anchor.to_dict()], [config.detach().numpy().copy()]
    diverged = False
    for _ in range(iterations):
        loss = loss_at(pick())
        trace.append(loss.item())
        # no ray reaching the field leaves nothing to differentiate
        grads = backward(loss, params) if loss.grad_fn is not None else [torch.zeros_like(p) for p in params]
        adam_step(params, grads, state, lrs)
        with torch.no_grad():
            anchor = apply_twist(anchor, twist.numpy())
            twist.zero_()
            config.copy_(torch.clamp(config, torch.as_tensor(lower), torch.as_tensor(upper)))
        pose_trace.append(anchor.to_dict())
        config_trace.append(config.detach().numpy().copy())
        if not _in_frustum(camera, anchor):
            diverged = True
            break
    with torch.no_grad():
        trace.append(float(loss_at(window)))
    report = EstimationReport(anchor, config.detach().numpy().copy(), trace, diverged,
                              pose_trace=pose_trace, config_trace=config_trace)
    if truth is not None:
        gt_pose, gt_config = truth
        report.config_error = [float(v) for v in np.abs(report.config - np.asarray(gt_config, dtype=np.float64))]
        if model is not None and geometry is not None:
            report.add = add_metric(model, geometry, (gt_pose, gt_config), (report.pose, report.config))
    return report
