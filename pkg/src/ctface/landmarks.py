"""Facial landmarks as 3D Gaussian heatmaps: encoding, decoding, regression loss.

The four landmarks are fixed by name and order. Heatmap prediction is an
interface (``HeatmapPredictor``); a ground-truth-backed oracle implementation
is provided so the downstream pipeline runs without a trained network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

LANDMARK_NAMES = ("left-eye-center", "right-eye-center", "nose-tip", "left-mouth-corner")


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    """Four named facial points in (real-valued) voxel coordinates."""

    points: np.ndarray  # (4, 3) float64, rows ordered as LANDMARK_NAMES

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (4, 3):
            raise ValueError(f"expected 4 points of 3 coordinates, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("landmark coordinates must be finite")
        if np.array_equal(pts[0], pts[1]):
            raise ValueError("left and right eye centers must be distinct")
        object.__setattr__(self, "points", pts)

    @property
    def left_eye(self) -> np.ndarray:
        return self.points[0]

    @property
    def right_eye(self) -> np.ndarray:
        return self.points[1]

    @property
    def nose_tip(self) -> np.ndarray:
        return self.points[2]

    @property
    def mouth_corner(self) -> np.ndarray:
        return self.points[3]

    @property
    def eye_distance(self) -> float:
        return float(np.linalg.norm(self.points[0] - self.points[1]))

    def scaled(self, factors) -> "LandmarkSet":
        """Per-axis rescale of voxel coordinates (e.g. after grid resampling)."""
        return LandmarkSet(self.points * np.asarray(factors, dtype=np.float64))

    def shifted(self, offset) -> "LandmarkSet":
        return LandmarkSet(self.points + np.asarray(offset, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    """One Gaussian-blob volume per landmark, values in [0, 1]."""

    maps: np.ndarray  # (4, nx, ny, nz) float32
    sigma: float

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float32)
        if maps.ndim != 4 or maps.shape[0] != 4:
            raise ValueError(f"expected maps of shape (4, nx, ny, nz), got {maps.shape}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        mx = maps.reshape(4, -1).max(axis=1)
        mn = maps.reshape(4, -1).min(axis=1)
        if (mn < 0).any() or (mx > 1).any():
            raise ValueError("heatmap values must lie in [0, 1]")
        if (mx <= 0).any():
            raise ValueError("each heatmap must have a positive maximum")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "sigma", float(self.sigma))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.maps.shape[1:]


class HeatmapPredictor(Protocol):
    """Anything that maps a Volume to a landmark HeatmapStack of matching dims."""

    def predict(self, volume) -> HeatmapStack: ...


def encode_heatmaps(landmarks: LandmarkSet, dims, sigma: float = 2.0) -> HeatmapStack:
    """Encode each landmark as exp(-|v - p|^2 / (2 sigma^2)) over voxel centers."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    dims = tuple(int(d) for d in dims)
    pts = landmarks.points
    bound = np.array(dims, dtype=np.float64) - 1
    if (pts < 0).any() or (pts > bound).any():
        raise ValueError(f"landmark outside grid {dims}")
    gx = np.arange(dims[0], dtype=np.float64)[:, None, None]
    gy = np.arange(dims[1], dtype=np.float64)[None, :, None]
    gz = np.arange(dims[2], dtype=np.float64)[None, None, :]
    inv = 1.0 / (2.0 * sigma * sigma)
    maps = np.empty((4,) + dims, dtype=np.float32)
    for j, p in enumerate(pts):
        d2 = (gx - p[0]) ** 2 + (gy - p[1]) ** 2 + (gz - p[2]) ** 2
        maps[j] = np.exp(-d2 * inv)
    return HeatmapStack(maps, sigma)


def decode_heatmaps(stack: HeatmapStack, rel_threshold: float = 0.25) -> LandmarkSet:
    """Recover sub-voxel points as the value-weighted centroid of each map's
    support above rel_threshold * per-map maximum."""
    if not (0.0 < rel_threshold < 1.0):
        raise ValueError(f"rel_threshold must be in (0, 1), got {rel_threshold}")
    pts = np.empty((4, 3), dtype=np.float64)
    for j in range(4):
        m = stack.maps[j]
        peak = float(m.max())
        if peak <= 0.0:
            raise ValueError(f"heatmap {j} ({LANDMARK_NAMES[j]}) is all zero")
        sel = m >= rel_threshold * peak
        w = m[sel].astype(np.float64)
        idx = np.argwhere(sel).astype(np.float64)
        pts[j] = (idx * w[:, None]).sum(axis=0) / w.sum()
    return LandmarkSet(pts)


def landmark_loss(truth: LandmarkSet, pred: LandmarkSet) -> float:
    """Mean-square landmark regression loss: sum |p - p_hat|^2 / (2 * 4)."""
    d = truth.points - pred.points
    return float((d * d).sum() / (2.0 * len(LANDMARK_NAMES)))


@dataclass(frozen=True)
class OracleLandmarkPredictor:
    """Stand-in predictor that re-encodes a stored ground truth for any input."""

    truth: LandmarkSet
    sigma: float = 2.0

    def predict(self, volume) -> HeatmapStack:
        return encode_heatmaps(self.truth, volume.dims, self.sigma)


def oracle_predictor(truth: LandmarkSet, sigma: float = 2.0) -> OracleLandmarkPredictor:
    return OracleLandmarkPredictor(truth, sigma)


def save_landmarks(landmarks: LandmarkSet, path) -> None:
    """Annotation file: one `name x y z` line per landmark, fixed order."""
    with open(path, "w") as f:
        for name, p in zip(LANDMARK_NAMES, landmarks.points):
            f.write(f"{name} {float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def load_landmarks(path) -> LandmarkSet:
    pts = []
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if len(lines) != 4:
        raise ValueError(f"{path}: expected 4 landmark lines, got {len(lines)}")
    for expected, line in zip(LANDMARK_NAMES, lines):
        fields = line.split()
        if len(fields) != 4 or fields[0] != expected:
            raise ValueError(f"{path}: expected landmark '{expected}', got line {line!r}")
        pts.append([float(v) for v in fields[1:]])
    return LandmarkSet(np.array(pts))
