"""Fourier encoding, a factorized (FastNeRF-style) radiance MLP and Adam.

Reverse-mode differentiation is delegated to ``torch.autograd``; the
network itself is written out as plain tensors so its weights can be
serialized, compared and perturbed directly.

The position branch maps encoded position (plus encoded configuration,
when the field is configuration-aware) to a density and ``rank`` RGB
factor triplets.  The direction branch maps an encoded view direction to
``rank`` mixing weights.  Color is ``sigmoid(sum_i beta_i * uvw_i)`` and
density is ``density_scale * softplus(raw)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class EncodingSpec:
    levels_position: int = 10
    levels_direction: int = 4
    levels_configuration: int = 10
    include_identity: bool = True

    def __post_init__(self):
        if min(self.levels_position, self.levels_direction, self.levels_configuration) < 0:
            raise ValueError("encoding levels must be >= 0")

    def width(self, n_inputs: int, levels: int) -> int:
        return n_inputs * (2 * levels + int(self.include_identity))

    def to_dict(self) -> dict:
        return {
            "levels_position": self.levels_position,
            "levels_direction": self.levels_direction,
            "levels_configuration": self.levels_configuration,
            "include_identity": self.include_identity,
        }


def encode(x, levels: int, include_identity: bool = False):
    """Per-component ``(sin 2^k pi x, cos 2^k pi x)`` for k < levels, optionally preceded by x.

    Output layout for each component block: ``[x?, sin k=0, cos k=0, sin k=1, ...]``.
    Accepts numpy arrays (returns numpy) or tensors.
    """
    as_numpy = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(np.asarray(x, dtype=np.float64)) if as_numpy else x
    if levels == 0 and not include_identity:
        out = t[..., :0]
    else:
        freqs = (2.0 ** torch.arange(levels, dtype=t.dtype)) * np.pi
        arg = t[..., None] * freqs  # (..., k, L)
        parts = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1).flatten(-2)  # (..., k, 2L)
        if include_identity:
            parts = torch.cat([t[..., None], parts], dim=-1)
        out = parts.flatten(-2)
    return out.numpy() if as_numpy else out


@dataclass
class MlpWeights:
    """Layer matrices (in x out) and biases of both branches."""

    position: list  # [(W, b), ...]; last layer emits 1 + 3 * rank
    direction: list  # [(W, b), ...]; last layer emits rank
    rank: int
    n_config: int
    density_scale: float = 10.0

    def parameters(self) -> list[torch.Tensor]:
        return [t for layer in (*self.position, *self.direction) for t in layer]

    @property
    def shapes(self) -> dict:
        return {
            "position": [[list(w.shape), list(b.shape)] for w, b in self.position],
            "direction": [[list(w.shape), list(b.shape)] for w, b in self.direction],
        }

    @property
    def dtype(self) -> torch.dtype:
        return self.position[0][0].dtype

    def requires_grad_(self, flag: bool = True) -> "MlpWeights":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def clone(self, dtype: torch.dtype | None = None) -> "MlpWeights":
        dt = dtype or self.dtype
        cp = lambda layers: [(w.detach().to(dt).clone(), b.detach().to(dt).clone()) for w, b in layers]  # noqa: E731
        return MlpWeights(cp(self.position), cp(self.direction), self.rank, self.n_config, self.density_scale)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.detach().cpu().numpy().ravel() for p in self.parameters()]).astype("<f4")

    def load_flat(self, values: np.ndarray) -> None:
        i = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(np.asarray(values[i : i + n], dtype=np.float64)).reshape(p.shape))
                i += n
        if i != len(values):
            raise ValueError(f"parameter count mismatch: expected {i}, got {len(values)}")


def _layers(sizes: Sequence[int], rng: np.random.Generator, dtype) -> list:
    out = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        out.append((torch.tensor(w, dtype=dtype), torch.zeros(fan_out, dtype=dtype)))
    return out


def init_weights(
    spec: EncodingSpec,
    n_config: int = 0,
    hidden_position: Sequence[int] = (128, 128, 128, 128),
    hidden_direction: Sequence[int] = (64, 64),
    rank: int = 8,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
    density_scale: float = 10.0,
) -> MlpWeights:
    """He-uniform weights, zero biases, drawn from a Philox stream keyed by ``seed``."""
    rng = np.random.Generator(np.random.Philox(seed))
    pos_in = spec.width(3, spec.levels_position) + spec.width(n_config, spec.levels_configuration)
    dir_in = spec.width(3, spec.levels_direction)
    position = _layers([pos_in, *hidden_position, 1 + 3 * rank], rng, dtype)
    direction = _layers([dir_in, *hidden_direction, rank], rng, dtype)
    return MlpWeights(position, direction, rank, n_config, density_scale)


def zero_weights_like(w: MlpWeights) -> MlpWeights:
    z = w.clone()
    with torch.no_grad():
        for p in z.parameters():
            p.zero_()
    return z


def _mlp(x: torch.Tensor, layers: list) -> torch.Tensor:
    for i, (w, b) in enumerate(layers):
        x = torch.addmm(b, x.reshape(-1, x.shape[-1]), w).reshape(*x.shape[:-1], w.shape[1])
        if i < len(layers) - 1:
            x = F.relu(x)
    return x


def direction_weights(weights: MlpWeights, spec: EncodingSpec, dirs: torch.Tensor) -> torch.Tensor:
    return _mlp(encode(dirs, spec.levels_direction, spec.include_identity), weights.direction)


def field_forward(
    weights: MlpWeights,
    spec: EncodingSpec,
    points: torch.Tensor,
    dirs: torch.Tensor,
    config: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Density and color for normalized inputs.

    ``points``: (R, S, 3) in [-1, 1]; ``dirs``: (R, 3) unit; ``config``:
    (R, k) or (k,) normalized joint values.  Returns ``sigma`` (R, S) and
    ``rgb`` (R, S, 3).
    """
    n_cfg = 0 if config is None else config.shape[-1]
    if n_cfg != weights.n_config:
        raise ValueError(f"configuration arity {n_cfg} does not match the field's {weights.n_config}")
    feats = encode(points, spec.levels_position, spec.include_identity)
    if n_cfg:
        cfg = encode(config, spec.levels_configuration, spec.include_identity)
        cfg = cfg.expand(points.shape[0], cfg.shape[-1]) if cfg.dim() == 1 else cfg
        feats = torch.cat([feats, cfg[:, None, :].expand(*feats.shape[:-1], cfg.shape[-1])], dim=-1)
    out = _mlp(feats, weights.position)
    sigma = weights.density_scale * F.softplus(out[..., 0])
    uvw = out[..., 1:].reshape(*out.shape[:-1], weights.rank, 3)
    beta = direction_weights(weights, spec, dirs)  # (R, rank)
    rgb = torch.sigmoid(torch.einsum("rsdc,rd->rsc", uvw, beta))
    return sigma, rgb


def field_density(weights: MlpWeights, spec: EncodingSpec, points: torch.Tensor, config: torch.Tensor | None = None):
    """Density only (the direction branch does not influence it); ``points`` (N, 3), ``config`` (k,)."""
    feats = encode(points, spec.levels_position, spec.include_identity)
    if weights.n_config:
        cfg = encode(config, spec.levels_configuration, spec.include_identity)
        feats = torch.cat([feats, cfg.expand(points.shape[0], cfg.shape[-1])], dim=-1)
    sizes = [(w, b) for w, b in weights.position]
    w_last, b_last = sizes[-1]
    h = _mlp(feats, sizes[:-1]) if len(sizes) > 1 else feats
    if len(sizes) > 1:
        h = F.relu(h)
    raw = h @ w_last[:, 0] + b_last[0]
    return weights.density_scale * F.softplus(raw)


def backward(loss: torch.Tensor, inputs: Sequence[torch.Tensor], allow_unused: bool = True) -> list[torch.Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``inputs`` (zeros for unused ones)."""
    if loss.grad_fn is None:
        raise RuntimeError("no forward pass recorded for this loss (backward before forward)")
    grads = torch.autograd.grad(loss, list(inputs), allow_unused=allow_unused)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, lr) -> AdamState:
    """In-place bias-corrected Adam update; ``lr`` is a scalar or one value per parameter."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    lrs = list(lr) if isinstance(lr, (list, tuple)) else [lr] * len(params)
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    with torch.no_grad():
        for p, g, m, v, a in zip(params, grads, state.m, state.v, lrs):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch: param {tuple(p.shape)} vs grad {tuple(g.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(a * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state
