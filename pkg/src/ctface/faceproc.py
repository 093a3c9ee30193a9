"""Face separation and depth-value normalization for rendered depth images.

The face mask here is a deterministic geometric baseline (largest connected
foreground blob, holes filled); a learned segmenter can be swapped in through
the same mask-producing call signature.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .render import DepthImage, STAGE_NORMALIZED, STAGE_SEGMENTED

DEFAULT_SCALE = 255.0
DEFAULT_THRESHOLD_PERCENTILE = 1.0

# 4-connectivity for both component labelling and hole filling.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True, eq=False)
class FaceMask:
    """Boolean face-support mask matching a depth image's size."""

    mask: np.ndarray  # (height, width) bool

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.ndim != 2:
            raise ValueError("mask must be a 2D boolean array")
        object.__setattr__(self, "mask", m)

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def baseline_face_mask(image: DepthImage) -> FaceMask:
    """Largest 4-connected foreground component with interior holes filled.

    Drops disconnected blobs (neck, hands, noise speckles) so only the face
    region survives.
    """
    fg = image.depth > 0
    if not fg.any():
        raise ValueError("image has no foreground to segment")
    labels, n = ndimage.label(fg, structure=_CROSS)
    if n > 1:
        counts = np.bincount(labels.ravel())
        counts[0] = 0
        fg = labels == counts.argmax()
    fg = ndimage.binary_fill_holes(fg, structure=_CROSS)
    return FaceMask(fg)


def apply_mask(image: DepthImage, face: FaceMask) -> DepthImage:
    """Zero depth outside the mask; the result is tagged as segmented."""
    if (face.height, face.width) != (image.height, image.width):
        raise ValueError(
            f"mask size ({face.height}, {face.width}) does not match image "
            f"({image.height}, {image.width})"
        )
    depth = np.where(face.mask, image.depth, 0.0)
    return dataclasses.replace(image, depth=depth, stage=STAGE_SEGMENTED)


@dataclass(frozen=True, eq=False)
class Histogram:
    """256-bin histogram of depth values after an affine map onto [0, 255]."""

    bin_edges: np.ndarray  # (257,)
    counts: np.ndarray     # (256,) int64
    foreground_only: bool

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if edges.shape != (257,) or counts.shape != (256,):
            raise ValueError("expected 257 bin edges and 256 counts")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def depth_histogram(image: DepthImage, foreground_only: bool = True,
                    display_range: tuple[float, float] | None = None) -> Histogram:
    """Histogram of depth values mapped affinely onto [0, 255].

    display_range fixes the (low, high) depth values mapped to 0 and 255;
    by default the counted pixels' own min/max are used. Mapped values are
    clipped into [0, 255], so counts always sum to the counted pixel total.
    """
    values = image.depth[image.depth > 0] if foreground_only else image.depth.ravel()
    if foreground_only and values.size == 0:
        raise ValueError("image has no foreground pixels to histogram")
    if display_range is None:
        lo, hi = (values.min(), values.max()) if values.size else (0.0, 0.0)
    else:
        lo, hi = display_range
    span = hi - lo
    mapped = np.zeros_like(values) if span <= 0 else (values - lo) * (255.0 / span)
    mapped = np.clip(mapped, 0.0, 255.0)
    edges = np.linspace(0.0, 255.0, 257)
    counts, _ = np.histogram(mapped, bins=edges)
    return Histogram(edges, counts, foreground_only)


def save_histogram_csv(hist: Histogram, path) -> None:
    """Two columns: bin_low, count."""
    with open(path, "w") as f:
        f.write("bin_low,count\n")
        for low, count in zip(hist.bin_edges[:-1], hist.counts):
            f.write(f"{float(low)!r},{int(count)}\n")


def suggest_threshold(images, percentile: float = DEFAULT_THRESHOLD_PERCENTILE) -> float:
    """Low-percentile foreground depth, the default normalization threshold."""
    if isinstance(images, DepthImage):
        images = [images]
    values = np.concatenate([img.depth[img.depth > 0].ravel() for img in images])
    if values.size == 0:
        raise ValueError("no foreground depth values to derive a threshold from")
    return float(np.percentile(values, percentile))


def normalize_depth(image: DepthImage, threshold: float,
                    scale: float = DEFAULT_SCALE) -> DepthImage:
    """Affine depth normalization: scale * (d - threshold) / (max - threshold).

    Applied to foreground pixels only, clamped below at 0; the foreground
    maximum maps exactly to `scale`. Raises when the foreground maximum does
    not exceed the threshold (degenerate contrast).
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    fg = image.depth > 0
    if not fg.any():
        raise ValueError("image has no foreground pixels to normalize")
    peak = image.depth[fg].max()
    if peak <= threshold:
        raise ValueError(
            f"foreground maximum {peak:.6g} does not exceed threshold {threshold:.6g}"
        )
    out = np.zeros_like(image.depth)
    out[fg] = np.maximum(scale * (image.depth[fg] - threshold) / (peak - threshold), 0.0)
    return dataclasses.replace(image, depth=out, stage=STAGE_NORMALIZED)
