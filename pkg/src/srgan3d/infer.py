"""Patch-based super-resolution: extract LR patches with context, generate, stitch."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .networks import Generator
from .upsampling import n_blocks, nn_resize_t
from .volume import PatchGrid, as_volume, cubic_interpolate, stitch_patches


class NearestStub(nn.Module):
    """Stand-in generator that nearest-neighbour upsamples its input (test hook)."""

    receptive_radius = 0

    def __init__(self, scale: int):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return nn_resize_t(x, self.scale)


def model_scale(net) -> int:
    return net.cfg.scale if isinstance(net, Generator) else int(net.scale)


def receptive_radius(net) -> int:
    """Conservative receptive-field radius of ``net`` in LR voxels."""
    if hasattr(net, "receptive_radius"):
        return int(net.receptive_radius)
    cfg = net.cfg
    half = cfg.kernel // 2
    radius = half * (1 + 2 * cfg.n_res_blocks)
    # each x2 block (and the output conv) adds at most half + 1 voxels at its own resolution
    radius += sum(math.ceil((half + 1) / 2**i) for i in range(n_blocks(cfg.scale) + 1))
    return radius


def _run(net, lr: np.ndarray) -> np.ndarray:
    dtype = next(net.parameters()).dtype if any(True for _ in net.parameters()) else torch.float32
    x = torch.as_tensor(np.ascontiguousarray(lr.transpose(3, 0, 1, 2)[None]), dtype=dtype)
    with torch.no_grad():
        y = net(x)
    return y[0].cpu().numpy().transpose(1, 2, 3, 0)


def infer_volume(lr, net, patch_shape=None, step=None, halo: int | None = None) -> np.ndarray:
    """Super-resolve a ``(H, W, D, 1)`` LR volume patch by patch.

    Each LR patch is padded with ``halo`` voxels of real context (clipped at
    the volume edge), generated, cropped back to the patch and mean-blended.
    With ``halo`` at least the receptive radius (the default) the result
    matches whole-volume inference up to rounding. ``patch_shape=None``
    processes the whole volume in one pass.
    """
    v = as_volume(lr)
    if v.shape[3] != 1:
        raise ValueError(f"generator takes single-channel volumes, got {v.shape[3]} channels")
    net.eval()
    r = model_scale(net)
    if patch_shape is None:
        return np.clip(_run(net, v), 0.0, 1.0).astype(np.float32)
    patch_shape = tuple(min(p, n) for p, n in zip(patch_shape, v.shape[:3]))
    step = tuple(min(s, p) for s, p in zip(step or patch_shape, patch_shape))
    halo = receptive_radius(net) if halo is None else halo
    grid = PatchGrid.for_shape(v.shape, patch_shape, step)
    outs = []
    for org in grid.origins:
        lo = [max(o - halo, 0) for o in org]
        hi = [min(o + p + halo, n) for o, p, n in zip(org, patch_shape, v.shape)]
        sr = _run(net, v[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]])
        off = [(o - a) * r for o, a in zip(org, lo)]
        outs.append(sr[tuple(slice(a, a + p * r) for a, p in zip(off, patch_shape))])
    hr_shape = tuple(n * r for n in v.shape[:3])
    return np.clip(stitch_patches(outs, grid.scaled(r), hr_shape), 0.0, 1.0).astype(np.float32)


def cubic_model(scale: int):
    """Cubic-spline baseline packaged as a whole-volume model (test hook)."""
    def run(lr):
        return cubic_interpolate(lr, scale).astype(np.float32)
    run.scale = scale
    return run
