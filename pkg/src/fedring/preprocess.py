"""Volume preprocessing: isotropic resampling, intensity clipping and
rescaling, balanced patch sampling, and flat-file volume I/O.

A Volume is a 3-D scalar grid with per-axis voxel spacing in millimeters
and an optional integer label grid (0 background, 1 organ, 2 tumor).
Voxel index i on an axis with spacing s sits at physical position i*s mm,
so resampling to spacing t maps output index o to input index o*t/s,
clamped to the valid range at the borders (clamp-to-edge, no zero halo).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DegenerateRange,
    EmptyVolume,
    InvariantViolation,
    LengthMismatch,
    NoForegroundVoxels,
    TruncatedFrame,
)

VOL_MAGIC = b"FVOL"
VOL_SUFFIX = ".vol"
PAD_INTENSITY = -1.0
MAX_LABEL = 2


@dataclass
class Volume:
    intensities: np.ndarray
    spacing_mm: tuple[float, float, float]
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.intensities = np.ascontiguousarray(self.intensities, dtype=np.float64)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.intensities.ndim != 3 or self.intensities.size == 0:
            raise EmptyVolume(f"need a non-empty 3-D grid, got {self.intensities.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise EmptyVolume(f"spacing must be three positive values: {self.spacing_mm}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
            if self.labels.shape != self.intensities.shape:
                raise InvariantViolation(
                    f"label grid {self.labels.shape} != intensity grid {self.intensities.shape}"
                )
            if self.labels.max(initial=0) > MAX_LABEL:
                raise InvariantViolation(f"labels must be in 0..{MAX_LABEL}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.intensities.shape

    def copy(self) -> "Volume":
        return Volume(
            self.intensities.copy(),
            self.spacing_mm,
            None if self.labels is None else self.labels.copy(),
        )


@dataclass(frozen=True)
class PatchSpec:
    size: tuple[int, int, int]
    fg_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "size", tuple(int(p) for p in self.size))
        if any(p < 1 for p in self.size):
            raise InvariantViolation(f"patch size {self.size} must be positive")
        if not 0.0 <= self.fg_fraction <= 1.0:
            raise InvariantViolation("fg_fraction must be in [0, 1]")


# -- resampling ----------------------------------------------------------------

def _axis_coords(n_in: int, scale: float, n_out: int):
    pos = np.clip(np.arange(n_out) * scale, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    frac = pos - i0
    upper = np.minimum(i0 + 1, n_in - 1)  # unused where frac == 0
    return i0, upper, frac


def _interp_axis(arr, axis: int, i0: np.ndarray, upper: np.ndarray, frac: np.ndarray):
    lower = np.take(arr, i0, axis=axis)
    high = np.take(arr, upper, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = len(frac)
    f = frac.reshape(shape)
    # lower + f*(high-lower) is exact at f == 0, which makes resampling at
    # the current spacing the bit-level identity.
    return lower + f * (high - lower)


def resample_isotropic(v: Volume, target_mm: float = 1.0) -> Volume:
    """Resample to isotropic spacing; trilinear intensities, nearest-neighbor
    labels.  Output dims are round(n_i * s_i / target), at least 1."""
    if target_mm <= 0:
        raise InvariantViolation("target spacing must be positive")
    n_out = tuple(
        max(1, int(np.floor(n * s / target_mm + 0.5)))
        for n, s in zip(v.dims, v.spacing_mm)
    )
    out = v.intensities
    scales = []
    for axis in range(3):
        scale = target_mm / v.spacing_mm[axis]
        scales.append(scale)
        i0, upper, frac = _axis_coords(v.dims[axis], scale, n_out[axis])
        out = _interp_axis(out, axis, i0, upper, frac)

    labels = None
    if v.labels is not None:
        labels = v.labels
        for axis, scale in enumerate(scales):
            pos = np.clip(np.arange(n_out[axis]) * scale, 0.0, v.dims[axis] - 1.0)
            nearest = np.minimum(np.floor(pos + 0.5), v.dims[axis] - 1).astype(np.intp)
            labels = np.take(labels, nearest, axis=axis)
    return Volume(out, (target_mm,) * 3, labels)


def clip_and_rescale(v: Volume, hu_min: float = -200.0, hu_max: float = 250.0) -> Volume:
    """Clamp intensities to [hu_min, hu_max] and map that range onto [-1, 1]."""
    if hu_min >= hu_max:
        raise DegenerateRange(f"hu_min {hu_min} >= hu_max {hu_max}")
    clipped = np.clip(v.intensities, hu_min, hu_max)
    scaled = 2.0 * (clipped - hu_min) / (hu_max - hu_min) - 1.0
    return Volume(scaled, v.spacing_mm, None if v.labels is None else v.labels.copy())


def preprocess_volume(
    v: Volume,
    target_mm: float = 1.0,
    hu_min: float = -200.0,
    hu_max: float = 250.0,
) -> Volume:
    """Standard pipeline: resample to isotropic spacing, then clip+rescale."""
    return clip_and_rescale(resample_isotropic(v, target_mm), hu_min, hu_max)


# -- patch sampling -------------------------------------------------------------

def _padded(v: Volume, size: tuple[int, int, int]):
    pads = [max(0, p - d) for p, d in zip(size, v.dims)]
    if not any(pads):
        return v.intensities, v.labels
    widths = [(0, p) for p in pads]
    intensities = np.pad(v.intensities, widths, constant_values=PAD_INTENSITY)
    labels = np.pad(v.labels, widths, constant_values=0)
    return intensities, labels


class VolumeSampler:
    """Patch sampler with the padded grids and center pools precomputed,
    for use in training loops that draw from the same volume repeatedly."""

    def __init__(self, v: Volume, spec: PatchSpec):
        if v.labels is None:
            raise InvariantViolation("patch sampling needs a labeled volume")
        self.spec = spec
        self.intensities, self.labels = _padded(v, spec.size)
        self.dims = self.intensities.shape
        flat = self.labels.ravel()
        self.fg_idx = np.flatnonzero(flat > 0)
        self.bg_idx = np.flatnonzero(flat == 0)
        self._half = [p // 2 for p in spec.size]

    @property
    def has_foreground(self) -> bool:
        return self.fg_idx.size > 0

    def draw(self, n: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
        patches = []
        size = self.spec.size
        for _ in range(n):
            want_fg = self.has_foreground and rng.random() < self.spec.fg_fraction
            pool = self.fg_idx if want_fg else self.bg_idx
            if pool.size == 0:
                pool = self.fg_idx if self.fg_idx.size else self.bg_idx
            center = np.unravel_index(pool[rng.integers(pool.size)], self.dims)
            starts = [
                int(np.clip(c - h, 0, d - p))
                for c, h, d, p in zip(center, self._half, self.dims, size)
            ]
            sl = tuple(slice(s, s + p) for s, p in zip(starts, size))
            patches.append(
                (
                    np.ascontiguousarray(self.intensities[sl]),
                    np.ascontiguousarray(self.labels[sl]),
                )
            )
        return patches


def sample_patches(
    v: Volume,
    spec: PatchSpec,
    n: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw n random patches, an expected fg_fraction of them centered on a
    labeled voxel; centers are uniform over the qualifying voxel set.

    Patches whose window would overrun the volume are shifted inside, and
    volumes smaller than the patch are padded (intensity -1, label 0).
    Warns NoForegroundVoxels and samples background only when the volume
    has no labeled voxels at all.
    """
    sampler = VolumeSampler(v, spec)
    if not sampler.has_foreground:
        warnings.warn(
            "volume has no foreground voxels; sampling background patches only",
            NoForegroundVoxels,
        )
    return sampler.draw(n, rng)


# -- .vol container --------------------------------------------------------------

def write_vol(path: str | Path, v: Volume) -> None:
    parts = [
        VOL_MAGIC,
        struct.pack("<3i", *v.dims),
        struct.pack("<3d", *v.spacing_mm),
        struct.pack("<B", 1 if v.labels is not None else 0),
        v.intensities.astype("<f8", copy=False).tobytes(),
    ]
    if v.labels is not None:
        parts.append(v.labels.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_vol_bytes(data: bytes) -> Volume:
    if len(data) < 4:
        raise TruncatedFrame("shorter than the magic")
    if data[:4] != VOL_MAGIC:
        raise BadMagic(f"expected {VOL_MAGIC!r}, got {data[:4]!r}")
    header = 4 + 12 + 24 + 1
    if len(data) < header:
        raise TruncatedFrame("header incomplete")
    dims = struct.unpack_from("<3i", data, 4)
    spacing = struct.unpack_from("<3d", data, 16)
    has_labels = data[40]
    if any(d <= 0 for d in dims):
        raise EmptyVolume(f"dims {dims}")
    n = int(np.prod(dims))
    need = header + 8 * n + (n if has_labels else 0)
    if len(data) < need:
        raise TruncatedFrame(f"need {need} bytes, got {len(data)}")
    if len(data) > need:
        raise LengthMismatch(f"{len(data) - need} trailing bytes")
    intensities = np.frombuffer(data, dtype="<f8", count=n, offset=header).reshape(dims)
    labels = None
    if has_labels:
        labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=header + 8 * n)
        labels = labels.reshape(dims)
    return Volume(intensities.copy(), spacing, None if labels is None else labels.copy())


def read_vol(path: str | Path) -> Volume:
    return read_vol_bytes(Path(path).read_bytes())


def load_volume_dir(path: str | Path) -> list[Volume]:
    """Load every .vol file in a directory, sorted by filename."""
    files = sorted(Path(path).glob(f"*{VOL_SUFFIX}"))
    if not files:
        raise EmptyVolume(f"no {VOL_SUFFIX} files in {path}")
    return [read_vol(f) for f in files]
