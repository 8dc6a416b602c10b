"""Volume representation, degradation, cubic baseline and patch tiling.

A volume is a plain ``numpy.ndarray`` of shape ``(H, W, D, C)`` indexed
``(y, x, z, c)``. Intensities are expected in ``[0, 1]`` once normalized.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline


class VolumeError(ValueError):
    """Raised for malformed volumes or incompatible geometry."""


def as_volume(v, dtype=None) -> np.ndarray:
    """Validate ``v`` as a 4-axis finite grid and return it as an array.

    3-axis inputs are promoted to a single channel.
    """
    a = np.asarray(v, dtype=dtype)
    if a.ndim == 3:
        a = a[..., None]
    if a.ndim != 4:
        raise VolumeError(f"volume must have 4 axes (H, W, D, C), got shape {a.shape}")
    if min(a.shape) < 1:
        raise VolumeError(f"all volume dimensions must be >= 1, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise VolumeError("volume contains non-finite values")
    return a


def normalize(v) -> np.ndarray:
    """Affinely rescale a volume to span exactly ``[0, 1]``."""
    a = as_volume(v, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if not hi > lo:
        raise VolumeError("zero dynamic range")
    if lo == 0.0 and hi == 1.0:
        return a
    return (a - lo) / (hi - lo)


@dataclass(frozen=True)
class DegradationConfig:
    """Gaussian prefilter + decimation parameters.

    ``blur_sigma`` and ``kernel_radius`` default to ``r / 2`` and
    ``ceil(3 * sigma)``.
    """

    factor: int = 2
    blur_sigma: float | None = None
    kernel_radius: int | None = None

    def __post_init__(self):
        if int(self.factor) != self.factor or self.factor < 1:
            raise VolumeError(f"factor must be a positive integer, got {self.factor}")
        if self.blur_sigma is None:
            object.__setattr__(self, "blur_sigma", self.factor / 2.0)
        if self.blur_sigma <= 0:
            raise VolumeError(f"blur_sigma must be > 0, got {self.blur_sigma}")
        if self.kernel_radius is None:
            object.__setattr__(self, "kernel_radius", int(math.ceil(3.0 * self.blur_sigma)))
        if self.kernel_radius < 1:
            raise VolumeError(f"kernel_radius must be >= 1, got {self.kernel_radius}")


def gaussian_kernel1d(sigma: float, radius: int) -> np.ndarray:
    """Sampled, unit-sum Gaussian on offsets ``-radius..radius``."""
    if sigma <= 0:
        raise VolumeError(f"sigma must be > 0, got {sigma}")
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def gaussian_blur(v, sigma: float, radius: int) -> np.ndarray:
    """Separable Gaussian blur over the three spatial axes, per channel.

    Boundaries use half-sample symmetric reflection (``d c b a | a b c d``).
    """
    a = as_volume(v, dtype=np.float64)
    k = gaussian_kernel1d(sigma, radius)
    for axis in range(3):
        a = ndimage.correlate1d(a, k, axis=axis, mode="reflect")
    return a


def degrade(v, cfg: DegradationConfig | None = None) -> np.ndarray:
    """Produce the low-resolution counterpart of an HR volume.

    Blur with a normalized Gaussian, then keep voxels ``0, r, 2r, ...``
    along each spatial axis.
    """
    cfg = cfg or DegradationConfig()
    a = as_volume(v, dtype=np.float64)
    r = cfg.factor
    if any(n % r for n in a.shape[:3]):
        raise VolumeError(f"spatial dims {a.shape[:3]} not divisible by factor {r}")
    blurred = gaussian_blur(a, cfg.blur_sigma, cfg.kernel_radius)
    return blurred[::r, ::r, ::r, :]


def nn_upsample(v, r: int) -> np.ndarray:
    """Nearest-neighbor replication by ``r`` along each spatial axis."""
    a = as_volume(v)
    for axis in range(3):
        a = np.repeat(a, r, axis=axis)
    return a


def _spline_matrix(n: int, r: int) -> np.ndarray:
    """Matrix mapping ``n`` knot samples to ``n * r`` fine samples.

    Knot ``i`` sits at fine index ``r * i`` (matching :func:`degrade`).
    The natural spline is continued linearly past the last knot, which is
    where its curvature vanishes.
    """
    out = np.empty((n * r, n))
    t = np.arange(n * r) / r
    if n == 1:
        out[:] = 1.0
        return out
    knots = np.arange(n, dtype=np.float64)
    inside = t <= n - 1
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        s = CubicSpline(knots, e, bc_type="natural")
        col = np.empty(n * r)
        col[inside] = s(t[inside])
        col[~inside] = e[-1] + s(n - 1, 1) * (t[~inside] - (n - 1))
        out[:, j] = col
    return out


def cubic_interpolate(v, r: int, clamp: bool = True) -> np.ndarray:
    """Separable natural cubic spline upsampling by ``r`` per spatial axis."""
    if int(r) != r or r < 2:
        raise VolumeError(f"r must be an integer >= 2, got {r}")
    a = as_volume(v, dtype=np.float64)
    for axis in range(3):
        m = _spline_matrix(a.shape[axis], r)
        a = np.moveaxis(np.tensordot(m, a, axes=([1], [axis])), 0, axis)
    if clamp:
        a = np.clip(a, 0.0, 1.0)
    return a


def _axis_origins(length: int, patch: int, step: int) -> list[int]:
    if patch > length:
        raise VolumeError(f"patch extent {patch} exceeds volume extent {length}")
    origins = list(range(0, length - patch + 1, step))
    if origins[-1] + patch < length:
        origins.append(length - patch)
    return origins


@dataclass(frozen=True)
class PatchGrid:
    """Patch geometry: shape, step and row-major list of patch corners."""

    patch_shape: tuple[int, int, int]
    step: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...] = field(default=())

    @classmethod
    def for_shape(cls, shape, patch_shape, step) -> "PatchGrid":
        """Build the grid covering a volume of spatial ``shape``.

        Origins advance by ``step``; if the last patch falls short of the
        far edge an extra patch flush with that edge is appended.
        """
        patch_shape = tuple(int(p) for p in patch_shape)
        step = tuple(int(s) for s in step)
        if any(s < 1 for s in step) or any(s > p for s, p in zip(step, patch_shape)):
            raise VolumeError(f"need 1 <= step <= patch_shape, got step={step} patch={patch_shape}")
        per_axis = [_axis_origins(n, p, s) for n, p, s in zip(shape[:3], patch_shape, step)]
        return cls(patch_shape, step, tuple(itertools.product(*per_axis)))

    def scaled(self, r: int) -> "PatchGrid":
        """The same tiling expressed on an ``r``-times finer grid."""
        return PatchGrid(
            tuple(p * r for p in self.patch_shape),
            tuple(s * r for s in self.step),
            tuple(tuple(o * r for o in org) for org in self.origins),
        )

    def slices(self, origin):
        return tuple(slice(o, o + p) for o, p in zip(origin, self.patch_shape))


def extract_patches(v, grid: PatchGrid) -> list[np.ndarray]:
    a = as_volume(v)
    out = []
    for org in grid.origins:
        if any(o < 0 or o + p > n for o, p, n in zip(org, grid.patch_shape, a.shape)):
            raise VolumeError(f"patch at {org} of shape {grid.patch_shape} exceeds volume {a.shape[:3]}")
        out.append(a[grid.slices(org)].copy())
    return out


def stitch_patches(patches, grid: PatchGrid, out_shape) -> np.ndarray:
    """Reassemble patches, averaging wherever they overlap."""
    if len(patches) != len(grid.origins):
        raise VolumeError(f"{len(patches)} patches for {len(grid.origins)} grid origins")
    channels = as_volume(patches[0]).shape[3] if patches else 1
    out_shape = tuple(out_shape[:3]) + (channels,)
    acc = np.zeros(out_shape, dtype=np.float64)
    count = np.zeros(out_shape[:3] + (1,), dtype=np.int64)
    for p, org in zip(patches, grid.origins):
        p = as_volume(p)
        if p.shape[:3] != grid.patch_shape:
            raise VolumeError(f"patch shape {p.shape[:3]} does not match grid {grid.patch_shape}")
        sl = grid.slices(org)
        acc[sl] += p
        count[sl] += 1
    if np.any(count == 0):
        raise VolumeError("coverage gap: some voxels are not covered by any patch")
    return (acc / count).astype(np.result_type(*patches), copy=False)
