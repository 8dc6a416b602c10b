"""Synthetic ellipsoid phantoms, VOL1 volume files and dataset manifests."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import as_volume

MAGIC = b"VOL1"
MANIFEST = "manifest.txt"
_HEADER = struct.Struct("<4s4I")


class DataError(ValueError):
    """Missing, malformed or empty dataset input."""


class VolumeFileError(DataError):
    """Base class for VOL1 parsing failures; ``code`` names the failure."""

    code = "invalid"


class BadMagicError(VolumeFileError):
    code = "bad magic"


class BadDimsError(VolumeFileError):
    code = "bad dims"


class TruncatedPayloadError(VolumeFileError):
    code = "truncated payload"


class NonFiniteError(VolumeFileError):
    code = "non-finite values"


def save_volume(v, path) -> None:
    """Write a VOL1 file; the file appears atomically."""
    a = as_volume(v)
    h, w, d, c = a.shape
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "xb") as fh:
        fh.write(_HEADER.pack(MAGIC, h, w, d, c))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_volume(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(raw) < _HEADER.size:
        raise BadDimsError(f"{path}: header too short")
    _, h, w, d, c = _HEADER.unpack_from(raw)
    if min(h, w, d, c) < 1:
        raise BadDimsError(f"{path}: bad dims {(h, w, d, c)}")
    n = h * w * d * c
    payload = raw[_HEADER.size:]
    if len(payload) < 4 * n:
        raise TruncatedPayloadError(f"{path}: truncated payload ({len(payload)} of {4 * n} bytes)")
    if len(payload) > 4 * n:
        raise BadDimsError(f"{path}: {len(payload) - 4 * n} trailing bytes after payload")
    a = np.frombuffer(payload, dtype="<f4").reshape(h, w, d, c).astype(np.float32)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{path}: non-finite values")
    return a


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and intensity ranges of a random ellipsoid phantom.

    The smooth background lives in ``background_range``; each ellipsoid is a
    constant in ``intensity_range`` painted over it (later ones on top).
    """

    shape: tuple[int, int, int] = (32, 32, 32)
    n_ellipsoids: tuple[int, int] = (4, 9)
    radius_range: tuple[float, float] = (2.5, 9.0)
    intensity_range: tuple[float, float] = (0.35, 1.0)
    background_range: tuple[float, float] = (0.0, 0.3)
    background_smoothness: float = 4.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("shape", "n_ellipsoids", "radius_range", "intensity_range", "background_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lo, hi = self.n_ellipsoids
        if lo < 0 or hi < lo:
            raise ValueError(f"bad n_ellipsoids range {self.n_ellipsoids}")
        for name in ("intensity_range", "background_range"):
            a, b = getattr(self, name)
            if not 0.0 <= a <= b <= 1.0:
                raise ValueError(f"{name} must be a subrange of [0, 1], got {(a, b)}")
        if self.noise_sigma < 0 or self.background_smoothness <= 0:
            raise ValueError("noise_sigma must be >= 0 and background_smoothness > 0")
        rmin, rmax = self.radius_range
        if hi > 0 and (rmin <= 0 or rmax < rmin or 2 * rmax + 2 > min(self.shape)):
            raise ValueError(f"radius range {self.radius_range} cannot fit inside {self.shape}")


def ellipsoid_masks(spec: PhantomSpec):
    """Yield ``(mask, intensity)`` for each ellipsoid, in painting order."""
    rng = np.random.default_rng([spec.seed, 1])
    n = int(rng.integers(spec.n_ellipsoids[0], spec.n_ellipsoids[1] + 1))
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in spec.shape], indexing="ij"), -1)
    for _ in range(n):
        radii = rng.uniform(*spec.radius_range, size=3)
        # random rotation via QR of a Gaussian matrix
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        ext = np.sqrt((q**2) @ radii**2)  # half-extent of the rotated ellipsoid per axis
        center = np.array([rng.uniform(e + 0.5, s - 1.5 - e) for e, s in zip(ext, spec.shape)])
        local = (grid - center) @ q
        mask = np.sum((local / radii) ** 2, axis=-1) <= 1.0
        yield mask, float(rng.uniform(*spec.intensity_range))


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    field = ndimage.gaussian_filter(rng.normal(size=spec.shape), spec.background_smoothness, mode="wrap")
    span = field.max() - field.min()
    field = (field - field.min()) / span if span > 0 else np.zeros(spec.shape)
    lo, hi = spec.background_range
    vol = lo + (hi - lo) * field
    for mask, value in ellipsoid_masks(spec):
        vol[mask] = value
    if spec.noise_sigma > 0:
        vol = vol + np.random.default_rng([spec.seed, 2]).normal(scale=spec.noise_sigma, size=vol.shape)
    return np.clip(vol, 0.0, 1.0).astype(np.float32)[..., None]


def phantom_seed(data_seed: int, index: int) -> int:
    """Independent per-volume phantom seed derived from the dataset seed."""
    return int(np.random.SeedSequence([data_seed, index]).generate_state(1)[0])


def split_assignment(n: int, seed: int, train_fraction: float = 0.8) -> list[str]:
    """Seeded train/test labels for ``n`` volumes."""
    if n < 1:
        raise DataError("empty dataset")
    n_train = int(round(train_fraction * n))
    order = np.random.default_rng([seed, 3]).permutation(n)
    labels = ["test"] * n
    for i in order[:n_train]:
        labels[i] = "train"
    return labels


def write_manifest(entries, path) -> None:
    """``entries``: iterable of ``(relative_path, split)``."""
    lines = [f"{p},{s}\n" for p, s in entries]
    Path(path).write_text("".join(lines))


def read_manifest(path) -> list[tuple[Path, str]]:
    """Return ``(absolute_path, split)`` pairs; paths resolve against the manifest dir."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    out = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rel, split = line.rsplit(",", 1)
        except ValueError:
            raise DataError(f"{path}:{n}: expected 'path,split'") from None
        split = split.strip()
        if split not in ("train", "test"):
            raise DataError(f"{path}:{n}: unknown split {split!r}")
        out.append((path.parent / rel.strip(), split))
    return out


def load_split(dataset_dir, split: str) -> list[tuple[str, np.ndarray]]:
    """``(volume_id, volume)`` for every manifest entry in ``split``, in manifest order."""
    entries = read_manifest(Path(dataset_dir) / MANIFEST)
    out = []
    for p, s in entries:
        if s != split:
            continue
        if not p.is_file():
            raise DataError(f"missing volume file {p}")
        out.append((p.stem, load_volume(p)))
    if not out:
        raise DataError(f"empty {split} split in {dataset_dir}")
    return out
