"""LSGAN adversarial losses, MSE and gradient-difference content losses.

Every function accepts torch tensors (batched ``(N, C, Y, X, Z)``) or numpy
volumes ``(H, W, D, C)``; spatial axes are the last three for tensors and
the first three for numpy volumes. Results are differentiable when the
inputs are tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1e-3
    real_label: float = 0.9
    fake_label: float = 0.0
    gdl_weight: float = 1.0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.5 < self.real_label <= 1.0:
            raise ValueError(f"real_label must lie in (0.5, 1], got {self.real_label}")
        if self.fake_label != 0.0:
            raise ValueError("fake_label is fixed at 0")
        if self.gdl_weight < 0:
            raise ValueError(f"gdl_weight must be >= 0, got {self.gdl_weight}")


def _t(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _spatial_axes(x, is_tensor):
    return (-3, -2, -1) if is_tensor else (0, 1, 2)


def _check_pair(hr, sr):
    if tuple(hr.shape) != tuple(sr.shape):
        raise ValueError(f"shape mismatch: {tuple(hr.shape)} vs {tuple(sr.shape)}")


def d_loss(d_real, d_fake, cfg: LossConfig = LossConfig()):
    """Least-squares discriminator loss, averaged over the batch."""
    d_real, d_fake = _t(d_real), _t(d_fake)
    return 0.5 * ((d_real - cfg.real_label) ** 2).mean() + 0.5 * ((d_fake - cfg.fake_label) ** 2).mean()


def g_adv_loss(d_fake):
    return 0.5 * ((_t(d_fake) - 1.0) ** 2).mean()


def mse_loss(hr, sr):
    hr, sr = _t(hr), _t(sr)
    _check_pair(hr, sr)
    return ((hr - sr) ** 2).mean()


def gdl_loss(hr, sr, spatial_axes=None):
    """Sum over spatial axes of the mean of ``(|dHR| - |dSR|)**2``.

    ``d`` is the forward difference along the axis, evaluated only where
    both neighbours exist.
    """
    is_tensor = isinstance(hr, torch.Tensor) or isinstance(sr, torch.Tensor)
    axes = spatial_axes or _spatial_axes(hr, is_tensor)
    hr, sr = _t(hr), _t(sr)
    _check_pair(hr, sr)
    if any(hr.shape[a] < 2 for a in axes):
        raise ValueError(f"every spatial dim must be >= 2 for gradients, got {tuple(hr.shape)}")
    total = 0.0
    for a in axes:
        gh = torch.diff(hr, dim=a).abs()
        gs = torch.diff(sr, dim=a).abs()
        total = total + ((gh - gs) ** 2).mean()
    return total


def g_total_loss(hr, sr, d_fake, cfg: LossConfig = LossConfig(), parts: bool = False):
    """``alpha * adversarial + mse + gdl_weight * gdl``.

    With ``parts=True`` also return the individual terms.
    """
    adv = g_adv_loss(d_fake)
    mse = mse_loss(hr, sr)
    gdl = gdl_loss(hr, sr)
    total = cfg.alpha * adv + mse + cfg.gdl_weight * gdl
    if parts:
        return total, {"g_adv": adv, "g_mse": mse, "g_gdl": gdl}
    return total
