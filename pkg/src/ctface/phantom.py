"""Synthetic head phantoms with analytic ground-truth landmarks.

A phantom is a two-level (tissue 0 HU / air -1000 HU) CSG solid: a head
ellipsoid with a nose bump and mouth ridge added and two eye sockets carved
out, plus optional seeded voxel noise. Identity lives in the geometric
parameters, which is enough to exercise the full pipeline without clinical
data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .landmarks import LandmarkSet, save_landmarks
from .volume import Volume, save_volume

AIR_HU = -1000.0
TISSUE_HU = 0.0
EYE_SOCKET_RADIUS_MM = 9.0
VOLUME_PAD_MM = 8.0

# Cohort identities are rejection-sampled with two floors: one on the full
# parameter vector and a stricter one on the (head_ax, head_az) subvector.
# The head outline is the only identity cue that survives the pose sweep
# essentially unchanged (the in-plane roll spins the image about its center,
# so footprint size/aspect persist while relief details move), which is why
# the outline axes get their own guarantee. The cohort exists to validate
# pipeline plumbing, not to challenge the deliberately weak baseline embedder.
MIN_IDENTITY_SEPARATION_MM = 8.0
MIN_OUTLINE_SEPARATION_MM = 6.5

IDENTITY_RANGES = {
    "head_ax": (60.0, 86.0),
    "head_ay": (78.0, 92.0),
    "head_az": (62.0, 88.0),
    "nose_height": (8.0, 14.0),
    "nose_width": (18.0, 30.0),
    "eye_depth": (2.0, 3.5),
    "mouth_offset": (16.0, 26.0),
}


@dataclass(frozen=True)
class PhantomSpec:
    """Identity geometry (mm), noise level (HU), and the generation seed."""

    head_ax: float = 70.0        # half-width (x)
    head_ay: float = 88.0        # half-depth (y, face toward -y)
    head_az: float = 95.0        # half-height (z)
    nose_height: float = 16.0    # protrusion beyond the local head surface
    nose_width: float = 26.0
    eye_depth: float = 4.0       # socket carve depth
    mouth_offset: float = 22.0   # nose line to mouth line, along -z
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        geo = (self.head_ax, self.head_ay, self.head_az, self.nose_height,
               self.nose_width, self.eye_depth, self.mouth_offset)
        if any(g <= 0 for g in geo):
            raise ValueError("all geometric parameters must be positive")
        for ax in (self.head_ax, self.head_ay, self.head_az):
            if not (60.0 <= ax <= 120.0):
                raise ValueError(f"head semi-axis {ax} outside [60, 120] mm")
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")

    @property
    def identity_vector(self) -> np.ndarray:
        return np.array([self.head_ax, self.head_ay, self.head_az,
                         self.nose_height, self.nose_width, self.eye_depth,
                         self.mouth_offset])


def _head_surface_y(spec: PhantomSpec, x: float, z: float) -> float:
    """Front (-y) head-ellipsoid surface at lateral/vertical offsets from center."""
    q = 1.0 - (x / spec.head_ax) ** 2 - (z / spec.head_az) ** 2
    return -spec.head_ay * np.sqrt(max(q, 0.0))


# Feature placement as fractions of the head semi-axes. Eyes sit wide and
# high so the landmark box (plus the default half-inter-eye ROI margin)
# covers the whole head: the rendered silhouette is then the head outline,
# which is far more stable under the pose sweep than a box-clipped patch.
EYE_X_FRAC = 0.55
EYE_Z_FRAC = 0.45
NOSE_Z_FRAC = -0.15


def _feature_frame(spec: PhantomSpec) -> dict:
    """Analytic feature anchor points in head-centered physical mm."""
    z_eye = EYE_Z_FRAC * spec.head_az
    z_nose = NOSE_Z_FRAC * spec.head_az
    z_mouth = z_nose - spec.mouth_offset
    x_eye = EYE_X_FRAC * spec.head_ax
    mouth_w = 1.2 * spec.nose_width + 10.0
    return {
        "z_eye": z_eye, "z_nose": z_nose, "z_mouth": z_mouth, "x_eye": x_eye,
        "mouth_w": mouth_w,
        "y_eye": _head_surface_y(spec, x_eye, z_eye),
        "y_nose": _head_surface_y(spec, 0.0, z_nose),
        "y_mouth": _head_surface_y(spec, 0.0, z_mouth),
    }


def landmark_positions_mm(spec: PhantomSpec) -> np.ndarray:
    """Ground-truth landmarks in head-centered physical mm, fixed order."""
    f = _feature_frame(spec)
    return np.array([
        [+f["x_eye"], f["y_eye"] + spec.eye_depth, f["z_eye"]],      # left eye
        [-f["x_eye"], f["y_eye"] + spec.eye_depth, f["z_eye"]],      # right eye
        [0.0, f["y_nose"] - spec.nose_height, f["z_nose"]],          # nose tip
        [+f["mouth_w"] / 2.0, f["y_mouth"], f["z_mouth"]],           # left mouth corner
    ])


def solid_indicator(spec: PhantomSpec, xs, ys, zs) -> np.ndarray:
    """Boolean tissue membership on the open grid xs x ys x zs (head-centered mm)."""
    f = _feature_frame(spec)
    x = np.asarray(xs, float)[:, None, None]
    y = np.asarray(ys, float)[None, :, None]
    z = np.asarray(zs, float)[None, None, :]

    head = (x / spec.head_ax) ** 2 + (y / spec.head_ay) ** 2 + (z / spec.head_az) ** 2 <= 1.0
    nw = spec.nose_width / 2.0
    nose = ((x / nw) ** 2 + ((y - f["y_nose"]) / spec.nose_height) ** 2
            + ((z - f["z_nose"]) / nw) ** 2 <= 1.0)
    mouth = (((x / (f["mouth_w"] / 2.0)) ** 2 + ((y - f["y_mouth"]) / 4.0) ** 2
              + ((z - f["z_mouth"]) / 6.0) ** 2) <= 1.0)
    solid = head | nose | mouth

    r2 = EYE_SOCKET_RADIUS_MM ** 2
    yc = f["y_eye"] - (EYE_SOCKET_RADIUS_MM - spec.eye_depth)
    for sx in (+1.0, -1.0):
        socket = ((x - sx * f["x_eye"]) ** 2 + (y - yc) ** 2
                  + (z - f["z_eye"]) ** 2) <= r2
        solid &= ~socket
    return solid


def generate_phantom(spec: PhantomSpec, spacing=(1.0, 1.0, 1.0)) -> tuple[Volume, LandmarkSet]:
    """Sample the phantom solid onto a voxel grid around the head.

    Returns the volume (integer HU, tissue 0 / air -1000 plus rounded seeded
    Gaussian noise) and the ground-truth landmarks in its voxel coordinates.
    """
    spacing = tuple(float(s) for s in spacing)
    if any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    pad = VOLUME_PAD_MM
    lo = np.array([-(spec.head_ax + pad),
                   -(spec.head_ay + spec.nose_height + pad),
                   -(spec.head_az + pad)])
    hi = np.array([spec.head_ax + pad, spec.head_ay + pad, spec.head_az + pad])
    dims = np.ceil((hi - lo) / spacing).astype(int) + 1
    axes = [lo[a] + np.arange(dims[a]) * spacing[a] for a in range(3)]

    solid = solid_indicator(spec, *axes)
    hu = np.where(solid, TISSUE_HU, AIR_HU)
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        hu = hu + rng.normal(0.0, spec.noise_std, size=hu.shape)
    hu = np.rint(hu)

    pts_mm = landmark_positions_mm(spec)
    pts_vox = (pts_mm - lo) / np.asarray(spacing)
    return Volume(hu, spacing, tuple(lo)), LandmarkSet(pts_vox)


@dataclass(frozen=True)
class ScanEntry:
    """One manifest row; paths are relative to the manifest directory."""

    subject: str
    scan: str
    path: str
    spacing: tuple[float, float, float]
    seed: int

    @property
    def landmarks_path(self) -> str:
        return os.path.splitext(self.path)[0] + ".lmk"


@dataclass(frozen=True)
class CohortManifest:
    root: str
    entries: tuple[ScanEntry, ...]

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject for e in self.entries})


def save_manifest(manifest: CohortManifest, path) -> None:
    with open(path, "w") as f:
        f.write("# subject scan path sx sy sz seed\n")
        for e in manifest.entries:
            sx, sy, sz = (float(s) for s in e.spacing)
            f.write(f"{e.subject} {e.scan} {e.path} {sx!r} {sy!r} {sz!r} {e.seed}\n")


def load_manifest(path) -> CohortManifest:
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 7:
                raise ValueError(f"{path}: malformed manifest line {line!r}")
            entries.append(ScanEntry(fields[0], fields[1], fields[2],
                                     tuple(float(v) for v in fields[3:6]),
                                     int(fields[6])))
    return CohortManifest(str(Path(path).parent), tuple(entries))


def sample_identities(n_subjects: int, rng: np.random.Generator) -> list[dict]:
    """Rejection-sample identity parameter sets separated by the documented floor."""
    names = list(IDENTITY_RANGES)
    chosen: list[np.ndarray] = []
    for _ in range(n_subjects):
        for _attempt in range(10_000):
            draw = np.array([rng.uniform(*IDENTITY_RANGES[k]) for k in names])
            if all(np.linalg.norm(draw - prev) >= MIN_IDENTITY_SEPARATION_MM
                   for prev in chosen):
                chosen.append(draw)
                break
        else:
            raise RuntimeError(
                f"could not place {n_subjects} identities at separation "
                f">= {MIN_IDENTITY_SEPARATION_MM} mm"
            )
    return [dict(zip(names, v)) for v in chosen]


def generate_cohort(n_subjects: int, scans_per_subject: int, seed: int,
                    out_dir, noise_std: float = 12.0) -> CohortManifest:
    """Write a desk-scale cohort: CTV1 volumes, landmark files, and a manifest.

    Each subject gets `scans_per_subject` volumes with fresh noise seeds and
    per-scan anisotropic spacing (in-plane 1-2 mm, slice 1-4 mm).
    """
    if n_subjects < 2:
        raise ValueError(f"cohort needs >= 2 subjects, got {n_subjects}")
    if scans_per_subject < 1:
        raise ValueError("each subject needs at least one scan")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    identities = sample_identities(n_subjects, rng)
    entries = []
    for si, identity in enumerate(identities):
        subject = f"s{si:03d}"
        for ci in range(scans_per_subject):
            scan = f"c{ci}"
            sxy = float(rng.uniform(1.0, 2.0))
            sz = float(rng.uniform(1.0, 4.0))
            scan_seed = int(rng.integers(0, 2**31 - 1))
            spec = PhantomSpec(**identity, noise_std=noise_std, seed=scan_seed)
            volume, marks = generate_phantom(spec, (sxy, sxy, sz))
            rel = f"volumes/{subject}_{scan}.ctv"
            save_volume(volume, out / rel)
            save_landmarks(marks, out / f"volumes/{subject}_{scan}.lmk")
            entries.append(ScanEntry(subject, scan, rel, (sxy, sxy, sz), scan_seed))
    manifest = CohortManifest(str(out), tuple(entries))
    save_manifest(manifest, out / "manifest.txt")
    return manifest
