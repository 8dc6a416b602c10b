"""Voxel shuffle and the three x2 upsampling blocks.

Torch tensors use the layout ``(N, C, Y, X, Z)``. The shuffle maps input
channel ``c * r**3 + (dy * r + dx) * r + dz`` at voxel ``(y, x, z)`` to
output voxel ``(r*y + dy, r*x + dx, r*z + dz)`` of channel ``c``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .volume import as_volume

METHODS = ("resize_conv", "subpixel", "subpixel_nn")


@dataclass(frozen=True)
class UpsampleSpec:
    method: str = "resize_conv"
    block_scale: int = 2
    kernel_size: int = 3
    filters: int = 8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown upsample method {self.method!r}; expected one of {METHODS}")
        if self.block_scale != 2:
            raise ValueError("upsampling blocks always scale by 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.method != "resize_conv" and self.filters % self.block_scale**3:
            raise ValueError(
                f"filters={self.filters} must be divisible by {self.block_scale**3} for {self.method}"
            )

    @property
    def out_channels(self) -> int:
        if self.method == "resize_conv":
            return self.filters
        return self.filters // self.block_scale**3


def n_blocks(r: int) -> int:
    """Number of chained x2 blocks needed for overall factor ``r``."""
    n = round(math.log2(r))
    if r < 1 or 2**n != r:
        raise ValueError(f"overall factor must be a power of two, got {r}")
    return n


# --- voxel rearrangement -------------------------------------------------

def voxel_shuffle_t(x: torch.Tensor, r: int) -> torch.Tensor:
    n, c, h, w, d = x.shape
    if c % r**3:
        raise ValueError(f"channel count {c} not divisible by r^3 = {r**3}")
    oc = c // r**3
    x = x.reshape(n, oc, r, r, r, h, w, d)
    x = x.permute(0, 1, 5, 2, 6, 3, 7, 4)
    return x.reshape(n, oc, h * r, w * r, d * r)


def voxel_unshuffle_t(x: torch.Tensor, r: int) -> torch.Tensor:
    n, c, h, w, d = x.shape
    if h % r or w % r or d % r:
        raise ValueError(f"spatial dims {(h, w, d)} not divisible by r = {r}")
    x = x.reshape(n, c, h // r, r, w // r, r, d // r, r)
    x = x.permute(0, 1, 3, 5, 7, 2, 4, 6)
    return x.reshape(n, c * r**3, h // r, w // r, d // r)


def voxel_shuffle(v, r: int) -> np.ndarray:
    """Rearrange ``(H, W, D, C*r^3)`` into ``(rH, rW, rD, C)``."""
    a = as_volume(v)
    h, w, d, c = a.shape
    if c % r**3:
        raise ValueError(f"channel count {c} not divisible by r^3 = {r**3}")
    a = a.reshape(h, w, d, c // r**3, r, r, r)
    a = a.transpose(0, 4, 1, 5, 2, 6, 3)
    return a.reshape(h * r, w * r, d * r, c // r**3)


def voxel_unshuffle(v, r: int) -> np.ndarray:
    """Exact inverse of :func:`voxel_shuffle`."""
    a = as_volume(v)
    h, w, d, c = a.shape
    if h % r or w % r or d % r:
        raise ValueError(f"spatial dims {(h, w, d)} not divisible by r = {r}")
    a = a.reshape(h // r, r, w // r, r, d // r, r, c)
    a = a.transpose(0, 2, 4, 6, 1, 3, 5)
    return a.reshape(h // r, w // r, d // r, c * r**3)


def nn_resize_t(x: torch.Tensor, r: int = 2) -> torch.Tensor:
    return x.repeat_interleave(r, 2).repeat_interleave(r, 3).repeat_interleave(r, 4)


def polyphase_components(x: torch.Tensor, r: int = 2) -> list[torch.Tensor]:
    """Split an upsampled tensor into its ``r**3`` phase sub-lattices."""
    return [
        x[:, :, dy::r, dx::r, dz::r]
        for dy in range(r) for dx in range(r) for dz in range(r)
    ]


def max_phase_discrepancy(x: torch.Tensor, r: int = 2) -> float:
    """Largest pairwise difference between polyphase means."""
    means = torch.stack([p.detach().mean() for p in polyphase_components(x, r)])
    return float(means.max() - means.min())


# --- weight constructions ------------------------------------------------

def subpixel_to_transposed(weight: torch.Tensor, r: int = 2) -> torch.Tensor:
    """Rewrite conv+shuffle kernels as one stride-``r`` transposed convolution.

    ``weight`` has conv layout ``(oc * r^3, C, k, k, k)``. The result has
    transposed-conv layout ``(C, oc, r*k, r*k, r*k)`` and must be used with
    padding ``r * (k // 2)``.
    """
    nf, cin, k = weight.shape[0], weight.shape[1], weight.shape[2]
    if weight.shape[2:] != (k, k, k) or k % 2 == 0:
        raise ValueError(f"expected cubic odd kernels, got {tuple(weight.shape)}")
    if nf % r**3:
        raise ValueError(f"filter count {nf} not divisible by r^3 = {r**3}")
    oc = nf // r**3
    # tap a of the LR kernel lands at offset d + r*(k-1-a) for output phase d
    w = weight.reshape(oc, r, r, r, cin, k, k, k).flip(5, 6, 7)
    w = w.permute(4, 0, 5, 1, 6, 2, 7, 3)  # (C, oc, k, r, k, r, k, r)
    return w.reshape(cin, oc, k * r, k * r, k * r).contiguous()


def subpixel_nn_init(spec: UpsampleSpec, base_kernel: torch.Tensor) -> torch.Tensor:
    """Enlarge ``(nf, nf/r^3, k, k, k)`` kernels to ``(..., kr, kr, kr)`` by NN replication.

    Used as stride-2 transposed-convolution weights, every output phase sees
    the same taps, so the block computes a stride-1 transposed convolution
    with ``base_kernel`` followed by a nearest-neighbor resize.
    """
    if spec.method != "subpixel_nn":
        raise ValueError(f"subpixel_nn_init needs method 'subpixel_nn', got {spec.method!r}")
    r, k = spec.block_scale, spec.kernel_size
    if base_kernel.dim() != 5 or tuple(base_kernel.shape[2:]) != (k, k, k):
        raise ValueError(f"base kernel must have shape (C, nf/r^3, {k}, {k}, {k}), got {tuple(base_kernel.shape)}")
    if base_kernel.shape[1] != spec.out_channels:
        raise ValueError(f"base kernel has {base_kernel.shape[1]} outputs, spec wants {spec.out_channels}")
    return nn_resize_t(base_kernel, r).contiguous()


# --- functional blocks ---------------------------------------------------

def resize_conv_block(x, weight, bias=None):
    """NN resize x2 then a stride-1 'same' convolution."""
    k = weight.shape[-1]
    return F.conv3d(nn_resize_t(x, 2), weight, bias, padding=k // 2)


def subpixel_block(x, weight, bias=None):
    """LR convolution with ``8 * oc`` filters followed by a x2 voxel shuffle."""
    if weight.shape[0] % 8:
        raise ValueError(f"filter count {weight.shape[0]} not divisible by 8")
    k = weight.shape[-1]
    return voxel_shuffle_t(F.conv3d(x, weight, bias, padding=k // 2), 2)


def subpixel_nn_block(x, weight, bias=None):
    """Stride-2 transposed convolution with ``(C, oc, 2k, 2k, 2k)`` kernels."""
    kr = weight.shape[-1]
    if kr % 2 or (kr // 2) % 2 == 0:
        raise ValueError(f"expected enlarged kernel of size 2k with k odd, got {kr}")
    return F.conv_transpose3d(x, weight, bias, stride=2, padding=kr // 2 - 1)


def _uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator | None, gain: float = 1.0):
    bound = gain * math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)
    return t


class Upsample(nn.Module):
    """One x2 upsampling block of the chosen method.

    Parameters are ``weight`` and ``bias``; their layout depends on the
    method (conv layout for ``resize_conv``/``subpixel``, transposed-conv
    layout for ``subpixel_nn``).
    """

    def __init__(self, in_channels: int, spec: UpsampleSpec, gen: torch.Generator | None = None,
                 gain: float = 1.0):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        fan_in = in_channels * k**3
        if spec.method == "subpixel_nn":
            base = _uniform_(torch.empty(in_channels, spec.out_channels, k, k, k), fan_in, gen, gain)
            self.weight = nn.Parameter(subpixel_nn_init(spec, base))
            self.bias = nn.Parameter(torch.zeros(spec.out_channels))
        else:
            self.weight = nn.Parameter(
                _uniform_(torch.empty(spec.filters, in_channels, k, k, k), fan_in, gen, gain))
            self.bias = nn.Parameter(torch.zeros(spec.filters))

    def forward(self, x):
        if self.spec.method == "resize_conv":
            return resize_conv_block(x, self.weight, self.bias)
        if self.spec.method == "subpixel":
            return subpixel_block(x, self.weight, self.bias)
        return subpixel_nn_block(x, self.weight, self.bias)
