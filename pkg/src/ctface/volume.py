"""Dense CT volumes with physical spacing: CTV1 file I/O, resampling, ROI cropping.

Voxel indexing convention: ``voxels[i, j, k]`` samples physical position
``origin + (i*sx, j*sy, k*sz)`` (voxel centers). Index order is (x, y, z);
the CTV1 file payload is x-fastest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

CTV1_MAGIC = "CTV1"


class VolumeFormatError(ValueError):
    """A CTV1 file could not be parsed into a valid Volume."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar volume of Hounsfield units on an axis-aligned anisotropic grid."""

    voxels: np.ndarray                      # (nx, ny, nz) float64
    spacing: tuple[float, float, float]     # mm per voxel, > 0
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float64)
        if vox.ndim != 3:
            raise ValueError(f"voxels must be a 3D array, got ndim={vox.ndim}")
        if min(vox.shape) < 1:
            raise ValueError(f"all dims must be >= 1, got {vox.shape}")
        if not np.isfinite(vox).all():
            raise ValueError("voxel values must be finite (no NaN/Inf)")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or any(s <= 0 or not np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing components must be positive finite, got {spacing}")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise ValueError(f"origin components must be finite, got {origin}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical extent dims * spacing per axis."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class RoiBox:
    """Inclusive voxel-index box [min_corner, max_corner]."""

    min_corner: tuple[int, int, int]
    max_corner: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(c) for c in self.min_corner)
        hi = tuple(int(c) for c in self.max_corner)
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"min_corner {lo} exceeds max_corner {hi}")
        if any(a < 0 for a in lo):
            raise ValueError(f"min_corner {lo} has negative components")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(b - a + 1 for a, b in zip(self.min_corner, self.max_corner))


def save_volume(volume: Volume, path) -> None:
    """Write a Volume as CTV1: text header, then int32-LE voxels, x-fastest.

    The format stores whole Hounsfield units; fractional voxel values are
    rounded to the nearest integer on write.
    """
    nx, ny, nz = volume.dims
    header = " ".join(
        [CTV1_MAGIC, str(nx), str(ny), str(nz)]
        + [repr(s) for s in volume.spacing]
        + [repr(o) for o in volume.origin]
    )
    payload = np.rint(volume.voxels).astype("<i4").transpose(2, 1, 0).tobytes()
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(b"\n")
        f.write(payload)


def load_volume(path) -> Volume:
    """Read a CTV1 file written by save_volume."""
    with open(path, "rb") as f:
        header = f.readline()
        payload = f.read()
    try:
        fields = header.decode("ascii").split()
    except UnicodeDecodeError as e:
        raise VolumeFormatError(f"{path}: header is not ASCII text") from e
    if len(fields) != 10 or fields[0] != CTV1_MAGIC:
        raise VolumeFormatError(f"{path}: malformed CTV1 header: {fields[:4]}...")
    try:
        nx, ny, nz = (int(v) for v in fields[1:4])
        spacing = tuple(float(v) for v in fields[4:7])
        origin = tuple(float(v) for v in fields[7:10])
    except ValueError as e:
        raise VolumeFormatError(f"{path}: non-numeric header field") from e
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: header dims ({nx},{ny},{nz}) invalid")
    if any(s <= 0 or not np.isfinite(s) for s in spacing):
        raise VolumeFormatError(f"{path}: header spacing {spacing} invalid")
    if any(not np.isfinite(o) for o in origin):
        raise VolumeFormatError(f"{path}: header origin {origin} invalid")
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload holds {len(payload) // 4} voxels, header says {nx * ny * nz}"
        )
    flat = np.frombuffer(payload, dtype="<i4")
    vox = flat.reshape((nz, ny, nx)).transpose(2, 1, 0).astype(np.float64)
    return Volume(vox, spacing, origin)


def resample_spacing(volume: Volume, target_spacing) -> Volume:
    """Trilinearly resample onto a grid with the given spacing.

    New dims are round(extent / target) per axis (clamped to >= 1, with a
    warning when rounding alone would give 0). Sample positions outside the
    source grid clamp to the nearest edge voxel.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(t <= 0 or not np.isfinite(t) for t in target):
        raise ValueError(f"target spacing must be positive finite, got {target}")

    new_dims = []
    for axis, (n, s, t) in enumerate(zip(volume.dims, volume.spacing, target)):
        m = int(round(n * s / t))
        if m < 1:
            log.warning(
                "resample axis %d: extent %.3g mm rounds to 0 voxels at spacing %.3g, clamping to 1",
                axis, n * s, t,
            )
            m = 1
        new_dims.append(m)

    # Source index of output voxel i is i * t / s per axis (shared origin).
    scale = [t / s for s, t in zip(volume.spacing, target)]
    xs = np.arange(new_dims[0]) * scale[0]
    ys = np.arange(new_dims[1]) * scale[1]
    out = np.empty(tuple(new_dims), dtype=np.float64)
    # Process in z-slabs to bound the coordinate-array memory.
    slab = max(1, int(2e6 / (new_dims[0] * new_dims[1] + 1)))
    for z0 in range(0, new_dims[2], slab):
        z1 = min(z0 + slab, new_dims[2])
        zs = np.arange(z0, z1) * scale[2]
        ci, cj, ck = np.meshgrid(xs, ys, zs, indexing="ij")
        out[:, :, z0:z1] = ndimage.map_coordinates(
            volume.voxels, [ci, cj, ck], order=1, mode="nearest"
        )
    return Volume(out, target, volume.origin)


def landmark_roi_box(volume: Volume, landmarks, margin_factor: float) -> RoiBox:
    """Bounding box of the landmarks expanded by margin_factor * inter-eye distance.

    Distances are measured in voxel index units; the box is clamped to the
    volume bounds.
    """
    pts = landmarks.points
    dims = volume.dims
    if (pts < 0).any() or (pts > np.array(dims, dtype=float) - 1).any():
        raise ValueError(f"landmarks {pts.tolist()} outside volume bounds {dims}")
    margin = float(margin_factor) * landmarks.eye_distance
    lo = np.floor(pts.min(axis=0) - margin).astype(int)
    hi = np.ceil(pts.max(axis=0) + margin).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.array(dims) - 1)
    if (lo > hi).any():
        raise ValueError("empty ROI box after clamping")
    return RoiBox(tuple(lo), tuple(hi))


def crop_roi(volume: Volume, landmarks, margin_factor: float = 0.5) -> Volume:
    """Extract the landmark ROI sub-volume; voxels are copied verbatim.

    The origin is shifted so retained voxels keep their physical coordinates.
    """
    box = landmark_roi_box(volume, landmarks, margin_factor)
    (x0, y0, z0), (x1, y1, z1) = box.min_corner, box.max_corner
    sub = volume.voxels[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1].copy()
    origin = tuple(
        o + c * s for o, c, s in zip(volume.origin, box.min_corner, volume.spacing)
    )
    return Volume(sub, volume.spacing, origin)
