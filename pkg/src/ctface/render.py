"""Iso-surface meshing and orthographic depth rendering.

The renderer is self-contained: triangle meshes come from marching cubes (with
vertices re-interpolated in float64 onto exact level crossings), and depth
images come from a deterministic z-buffer rasterizer with a documented
boundary rule, not from an external visualization toolkit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from .volume import Volume

DEFAULT_ISO_LEVEL_HU = -350.0     # midpoint of the skin/air band [-400, -300]
DEFAULT_CULL_ANGLE_DEG = 60.0
DEPTH_SCALE = 100.0               # PGM stores round(depth_mm * 100)

STAGE_PROJECTED = "projected"
STAGE_SEGMENTED = "segmented"
STAGE_NORMALIZED = "normalized"
STAGES = (STAGE_PROJECTED, STAGE_SEGMENTED, STAGE_NORMALIZED)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Triangle mesh in physical mm with per-triangle outward unit normals.

    Normals point toward decreasing field value (air side, out of the body).
    """

    vertices: np.ndarray   # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int32
    normals: np.ndarray    # (T, 3) float64, unit length

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.asarray(self.triangles, dtype=np.int32).reshape(-1, 3)
        norms = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(tris) != len(norms):
            raise ValueError("one normal per triangle required")
        if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle indices out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "normals", norms)

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def centroid(self) -> np.ndarray:
        """Mean of vertices (the camera aim point)."""
        if len(self.vertices) == 0:
            return np.zeros(3)
        return self.vertices.mean(axis=0)

    def bounding_radius(self, center) -> float:
        if len(self.vertices) == 0:
            return 0.0
        return float(np.sqrt(((self.vertices - center) ** 2).sum(axis=1).max()))

    def translated(self, offset) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices + np.asarray(offset, float), self.triangles, self.normals)


def empty_mesh() -> SurfaceMesh:
    return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int32), np.zeros((0, 3)))


def _snap_to_crossings(verts_idx: np.ndarray, field: np.ndarray, level: float) -> np.ndarray:
    """Re-derive vertex positions in float64 exactly on cell-edge level crossings.

    Marching cubes places every vertex on a grid edge (two index coordinates
    integral); re-interpolating the crossing from the field removes the
    extractor's float32 rounding.
    """
    dims = np.array(field.shape)
    v = np.asarray(verts_idx, dtype=np.float64)
    out = v.copy()
    rounded = np.round(v)
    fr = v - rounded
    free = np.abs(fr).argmax(axis=1)
    on_edge = np.abs(fr[np.arange(len(v)), free]) >= 1e-6

    base = rounded.astype(np.int64)
    base = np.clip(base, 0, dims - 1)
    out[~on_edge] = base[~on_edge]

    if on_edge.any():
        sel = np.nonzero(on_edge)[0]
        ax = free[sel]
        lo = base[sel].copy()
        lo[np.arange(len(sel)), ax] = np.clip(
            np.floor(v[sel, ax]).astype(np.int64), 0, dims[ax] - 2
        )
        hi = lo.copy()
        hi[np.arange(len(sel)), ax] += 1
        f0 = field[lo[:, 0], lo[:, 1], lo[:, 2]]
        f1 = field[hi[:, 0], hi[:, 1], hi[:, 2]]
        denom = f1 - f0
        safe = denom != 0
        t = np.where(safe, (level - f0) / np.where(safe, denom, 1.0), v[sel, ax] - lo[np.arange(len(sel)), ax])
        t = np.clip(t, 0.0, 1.0)
        snapped = lo.astype(np.float64)
        snapped[np.arange(len(sel)), ax] += t
        out[sel] = snapped
    return out


def _field_gradient_at(field: np.ndarray, pts_idx: np.ndarray, spacing) -> np.ndarray:
    """Central-difference gradient of the trilinear interpolant, in physical mm."""
    h = 0.5
    g = np.empty_like(pts_idx)
    for a in range(3):
        lo = pts_idx.copy()
        hi = pts_idx.copy()
        lo[:, a] -= h
        hi[:, a] += h
        flo = ndimage.map_coordinates(field, lo.T, order=1, mode="nearest")
        fhi = ndimage.map_coordinates(field, hi.T, order=1, mode="nearest")
        g[:, a] = (fhi - flo) / (2.0 * h)
    return g / np.asarray(spacing, dtype=np.float64)


def extract_isosurface(volume: Volume, level: float = DEFAULT_ISO_LEVEL_HU) -> SurfaceMesh:
    """Marching-cubes surface of the level set, in physical coordinates.

    Returns an empty mesh when the level is outside the volume's value range.
    Degenerate (zero-area) triangles are dropped; winding and normals are
    oriented so normals point toward decreasing values.
    """
    if not np.isfinite(level):
        raise ValueError(f"iso level must be finite, got {level}")
    if min(volume.dims) < 2:
        raise ValueError(f"volume dims {volume.dims} too small for surface extraction")
    field = volume.voxels
    vmin, vmax = float(field.min()), float(field.max())
    if not (vmin < level < vmax):
        return empty_mesh()

    verts32, faces, _, _ = measure.marching_cubes(field, level=level)
    verts_idx = _snap_to_crossings(verts32, field, level)
    verts = verts_idx * np.asarray(volume.spacing) + np.asarray(volume.origin)

    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    n_raw = np.cross(b - a, c - a)
    area2 = np.sqrt((n_raw ** 2).sum(axis=1))
    keep = area2 > 0
    faces = faces[keep].astype(np.int32)
    n = n_raw[keep] / area2[keep, None]

    cent_idx = (verts_idx[faces[:, 0]] + verts_idx[faces[:, 1]] + verts_idx[faces[:, 2]]) / 3.0
    grad = _field_gradient_at(field, cent_idx, volume.spacing)
    flip = (n * grad).sum(axis=1) > 0
    gmag = np.sqrt((grad ** 2).sum(axis=1))
    flip &= gmag > 1e-12 * max(abs(vmin), abs(vmax), 1.0)
    if flip.any():
        faces[flip] = faces[flip][:, [0, 2, 1]]
        n[flip] = -n[flip]
    return SurfaceMesh(verts, faces, n)


def cull_by_normal(mesh: SurfaceMesh, view_dir, max_angle_deg: float = DEFAULT_CULL_ANGLE_DEG) -> SurfaceMesh:
    """Keep triangles whose normal is within max_angle_deg of the surface-to-camera
    direction (-view_dir). max_angle_deg = 180 keeps everything."""
    if not (0.0 < max_angle_deg <= 180.0):
        raise ValueError(f"cull angle must be in (0, 180], got {max_angle_deg}")
    vd = np.asarray(view_dir, dtype=np.float64)
    norm = np.linalg.norm(vd)
    if norm == 0:
        raise ValueError("view direction must be nonzero")
    vd = vd / norm
    cos_lim = math.cos(math.radians(max_angle_deg))
    keep = (mesh.normals @ (-vd)) >= cos_lim - 1e-12
    return SurfaceMesh(mesh.vertices, mesh.triangles[keep], mesh.normals[keep])


def _rotation_about(axis, deg: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    x, y, z = axis
    c = math.cos(math.radians(deg))
    s = math.sin(math.radians(deg))
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]], dtype=np.float64)
    return np.eye(3) + s * k + (1 - c) * (k @ k)


@dataclass(frozen=True)
class CameraPose:
    """Orthographic camera on a sphere around a target point.

    The neutral view axis is +y of the volume (facing the face); pitch
    elevates it toward +z, yaw swings it about +z, and roll spins the image
    about the view axis. view_width_mm physical units span the image width.
    """

    pitch_deg: float
    roll_deg: float
    yaw_deg: float
    target: tuple[float, float, float]
    view_width_mm: float = 180.0
    width: int = 256
    height: int = 256
    center_px: tuple[float, float] = (128.0, 128.0)
    distance: float | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.view_width_mm <= 0:
            raise ValueError("view width must be positive")
        if not (-90.0 <= self.pitch_deg <= 90.0):
            raise ValueError(f"pitch must lie in [-90, 90], got {self.pitch_deg}")
        vals = (self.pitch_deg, self.roll_deg, self.yaw_deg, *self.target, *self.center_px)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("camera parameters must be finite")
        if self.distance is not None and not (self.distance > 0):
            raise ValueError(f"camera distance must be positive, got {self.distance}")
        object.__setattr__(self, "target", tuple(float(t) for t in self.target))
        object.__setattr__(self, "center_px", tuple(float(c) for c in self.center_px))

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) orthonormal camera axes; forward looks at the target."""
        m = _rotation_about((1.0, 0.0, 0.0), self.pitch_deg) @ _rotation_about(
            (0.0, 0.0, 1.0), self.yaw_deg
        )
        fwd = m @ np.array([0.0, 1.0, 0.0])
        up0 = m @ np.array([0.0, 0.0, 1.0])
        up = _rotation_about(tuple(fwd), self.roll_deg) @ up0
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        return fwd, right, up

    @property
    def view_dir(self) -> np.ndarray:
        return self.basis()[0]

    @property
    def location(self) -> np.ndarray:
        if self.distance is None:
            raise ValueError("camera distance not resolved yet")
        return np.asarray(self.target) - self.distance * self.view_dir

    def with_distance(self, distance: float) -> "CameraPose":
        return dataclasses.replace(self, distance=float(distance))

    @property
    def px_per_mm(self) -> float:
        return self.width / self.view_width_mm


def pose_camera(pitch_deg: float, roll_deg: float, yaw_deg: float, target,
                view_width_mm: float = 180.0, width: int = 256, height: int = 256,
                center_px=(128.0, 128.0), distance: float | None = None) -> CameraPose:
    return CameraPose(pitch_deg, roll_deg, yaw_deg, tuple(np.asarray(target, float)),
                      view_width_mm, int(width), int(height), tuple(center_px), distance)


def project_points(pose: CameraPose, pts) -> np.ndarray:
    """Project mm points to (x_px, y_px, depth_mm from the camera plane)."""
    fwd, right, up = pose.basis()
    q = np.asarray(pts, dtype=np.float64).reshape(-1, 3) - pose.location
    ppmm = pose.px_per_mm
    u0, v0 = pose.center_px
    out = np.empty((len(q), 3))
    out[:, 0] = q @ right * ppmm + u0
    out[:, 1] = -(q @ up) * ppmm + v0
    out[:, 2] = q @ fwd
    return out


@dataclass(frozen=True, eq=False)
class DepthImage:
    """2D camera-plane-to-surface distances in mm; 0 marks background."""

    depth: np.ndarray  # (height, width) float64
    pose: CameraPose
    stage: str = STAGE_PROJECTED
    patient: str = ""
    scan: str = ""
    pose_index: int = 0

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError("depth must be a 2D array")
        if not np.isfinite(d).all():
            raise ValueError("depth values must be finite")
        if (d < 0).any():
            raise ValueError("depth values must be non-negative (0 = background)")
        if d.shape != (self.pose.height, self.pose.width):
            raise ValueError(
                f"depth shape {d.shape} does not match pose size "
                f"({self.pose.height}, {self.pose.width})"
            )
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        object.__setattr__(self, "depth", d)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def foreground(self) -> np.ndarray:
        return self.depth > 0


def _rasterize(pts2: np.ndarray, pdepth: np.ndarray, tris: np.ndarray,
               width: int, height: int) -> np.ndarray:
    """Z-buffer fill of triangles over integer pixel centers.

    Coverage rule: a pixel center strictly inside fills; centers exactly on an
    edge fill only when the edge (in positive-area winding) runs downward
    (dy > 0) or is horizontal running left (dy == 0, dx < 0), so shared edges
    fill exactly once.
    """
    zflat = np.full(width * height, np.inf)
    if len(tris) == 0:
        return zflat.reshape(height, width)

    v = pts2[tris]                       # (T, 3, 2)
    z = pdepth[tris]                     # (T, 3)
    area2 = (v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1]) - \
            (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0])
    swap = area2 < 0
    v[swap] = v[swap][:, [0, 2, 1]]
    z[swap] = z[swap][:, [0, 2, 1]]
    area2 = np.abs(area2)

    xmin = v[:, :, 0].min(axis=1)
    xmax = v[:, :, 0].max(axis=1)
    ymin = v[:, :, 1].min(axis=1)
    ymax = v[:, :, 1].max(axis=1)
    ix0 = np.clip(np.ceil(xmin), 0, width - 1).astype(np.int64)
    ix1 = np.clip(np.floor(xmax), 0, width - 1).astype(np.int64)
    iy0 = np.clip(np.ceil(ymin), 0, height - 1).astype(np.int64)
    iy1 = np.clip(np.floor(ymax), 0, height - 1).astype(np.int64)
    ok = (area2 > 0) & (ix0 <= ix1) & (iy0 <= iy1) & (xmax >= 0) & (xmin <= width - 1) \
        & (ymax >= 0) & (ymin <= height - 1)
    if not ok.any():
        return zflat.reshape(height, width)
    v, z, area2 = v[ok], z[ok], area2[ok]
    ix0, ix1, iy0, iy1 = ix0[ok], ix1[ok], iy0[ok], iy1[ok]
    bw = ix1 - ix0 + 1
    bh = iy1 - iy0 + 1

    # Edge k runs a->b; E_k(p) = dx_k*(py-ay) - dy_k*(px-ax). Barycentric
    # weights use the edge opposite each vertex: (E12, E20, E01).
    ea = v[:, [1, 2, 0], :]
    eb = v[:, [2, 0, 1], :]
    dx = eb[:, :, 0] - ea[:, :, 0]
    dy = eb[:, :, 1] - ea[:, :, 1]
    topleft = (dy > 0) | ((dy == 0) & (dx < 0))
    ax = ea[:, :, 0]
    ay = ea[:, :, 1]

    def splat(idx: np.ndarray, px: np.ndarray, py: np.ndarray) -> None:
        e = dx[idx] * (py[:, None] - ay[idx]) - dy[idx] * (px[:, None] - ax[idx])
        inside = ((e > 0) | ((e == 0) & topleft[idx])).all(axis=1)
        if not inside.any():
            return
        w = e[inside] / area2[idx][inside, None]
        dep = (w * z[idx][inside]).sum(axis=1)
        pos = dep > 0
        if not pos.any():
            return
        flat = py[inside][pos] * width + px[inside][pos]
        np.minimum.at(zflat, flat, dep[pos])

    done = np.zeros(len(v), dtype=bool)
    for side in (2, 4, 8):
        grp = ~done & (bw <= side) & (bh <= side)
        done |= grp
        gi = np.nonzero(grp)[0]
        if len(gi) == 0:
            continue
        gx0, gy0 = ix0[gi], iy0[gi]
        gbw, gbh = bw[gi], bh[gi]
        for oy in range(side):
            for ox in range(side):
                act = (ox < gbw) & (oy < gbh)
                if not act.any():
                    continue
                sel = gi[act]
                splat(sel, gx0[act] + ox, gy0[act] + oy)

    for ti in np.nonzero(~done)[0]:
        xs = np.arange(ix0[ti], ix1[ti] + 1)
        ys = np.arange(iy0[ti], iy1[ti] + 1)
        px, py = np.meshgrid(xs, ys)
        idx = np.full(px.size, ti)
        splat(idx, px.ravel(), py.ravel())

    return zflat.reshape(height, width)


def render_depth(mesh: SurfaceMesh, pose: CameraPose,
                 cull_angle_deg: float = DEFAULT_CULL_ANGLE_DEG,
                 patient: str = "", scan: str = "", pose_index: int = 0) -> DepthImage:
    """Rasterize the normal-culled mesh into an orthographic depth image.

    An unresolved pose distance is set to 2x the mesh bounding-sphere radius
    about the pose target, which keeps all depths strictly positive.
    """
    if pose.distance is None:
        rb = mesh.bounding_radius(np.asarray(pose.target))
        pose = pose.with_distance(2.0 * rb if rb > 0 else 1.0)
    if mesh.is_empty:
        depth = np.zeros((pose.height, pose.width))
    else:
        visible = cull_by_normal(mesh, pose.view_dir, cull_angle_deg)
        proj = project_points(pose, visible.vertices)
        z = _rasterize(proj[:, :2], proj[:, 2], visible.triangles, pose.width, pose.height)
        depth = np.where(np.isinf(z), 0.0, z)
    return DepthImage(depth, pose, STAGE_PROJECTED, patient, scan, pose_index)


@dataclass(frozen=True)
class SweepConfig:
    """Grid of camera poses: the cartesian product of pitch and roll values."""

    pitch_range: tuple[float, float] = (-20.0, 20.0)
    pitch_count: int = 9
    roll_range: tuple[float, float] = (-25.0, 25.0)
    roll_count: int = 10
    yaw_deg: float = 0.0
    view_width_mm: float = 180.0
    width: int = 256
    height: int = 256
    center_px: tuple[float, float] = (128.0, 128.0)
    cull_angle_deg: float = DEFAULT_CULL_ANGLE_DEG

    def __post_init__(self):
        if self.pitch_count < 1 or self.roll_count < 1:
            raise ValueError("sweep must contain at least one pitch and one roll value")

    @property
    def pitches(self) -> np.ndarray:
        return np.linspace(*self.pitch_range, self.pitch_count)

    @property
    def rolls(self) -> np.ndarray:
        return np.linspace(*self.roll_range, self.roll_count)

    @property
    def count(self) -> int:
        return self.pitch_count * self.roll_count


def pose_sweep(mesh: SurfaceMesh, config: SweepConfig | None = None,
               patient: str = "", scan: str = "") -> list[DepthImage]:
    """Render one depth image per configured pose (default 9 x 10 = 90).

    The camera distance is resolved once per mesh so the whole sweep shares
    one scale; pose_index enumerates the grid pitch-major.
    """
    config = config or SweepConfig()
    target = tuple(mesh.centroid())
    rb = mesh.bounding_radius(np.asarray(target))
    dist = 2.0 * rb if rb > 0 else 1.0
    images = []
    rolls = config.rolls
    for i, rp in enumerate(config.pitches):
        for j, rr in enumerate(rolls):
            pose = pose_camera(float(rp), float(rr), config.yaw_deg, target,
                               config.view_width_mm, config.width, config.height,
                               config.center_px, dist)
            images.append(render_depth(mesh, pose, config.cull_angle_deg,
                                       patient, scan, i * len(rolls) + j))
    return images


def edge_incidence_counts(mesh: SurfaceMesh) -> np.ndarray:
    """Per-edge triangle counts (a closed surface has every count equal to 2)."""
    t = mesh.triangles
    if len(t) == 0:
        return np.zeros(0, dtype=np.int64)
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


def save_depth_pgm(image: DepthImage, path) -> None:
    """16-bit binary PGM (maxval 65535) storing round(depth_mm * 100), plus a
    text sidecar (same stem, .txt) with ids, pose angles, and stage."""
    q = np.rint(image.depth * DEPTH_SCALE)
    if q.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 655.35 mm PGM range")
    data = q.astype(">u2").tobytes()
    path = str(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{image.width} {image.height}\n65535\n".encode("ascii"))
        f.write(data)
    p = image.pose
    meta = (
        f"patient={image.patient} scan={image.scan} pose={image.pose_index} "
        f"rp={p.pitch_deg!r} rr={p.roll_deg!r} ry={p.yaw_deg!r} "
        f"sc={p.view_width_mm!r} u0={p.center_px[0]!r} v0={p.center_px[1]!r} "
        f"stage={image.stage}\n"
    )
    with open(_sidecar_path(path), "w") as f:
        f.write(meta)


def _sidecar_path(path: str) -> str:
    return path[:-4] + ".txt" if path.endswith(".pgm") else path + ".txt"


def load_depth_pgm(path) -> DepthImage:
    """Read a PGM depth image and its sidecar.

    The reconstructed pose carries image-plane geometry (size, angles, view
    width, principal point); the 3D camera anchor is not serialized.
    """
    path = str(path)
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM (P5) file")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated PGM header")
            text = line.split(b"#", 1)[0]
            fields.extend(int(v) for v in text.split())
        w, h, maxval = fields[:3]
        if maxval != 65535:
            raise ValueError(f"{path}: expected maxval 65535, got {maxval}")
        data = f.read(w * h * 2)
    if len(data) != w * h * 2:
        raise ValueError(f"{path}: payload size mismatch")
    depth = np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.float64) / DEPTH_SCALE

    meta = {"patient": "", "scan": "", "pose": "0", "rp": "0", "rr": "0", "ry": "0",
            "sc": "180.0", "u0": str(w / 2), "v0": str(h / 2), "stage": STAGE_PROJECTED}
    try:
        with open(_sidecar_path(path)) as f:
            for token in f.read().split():
                key, _, val = token.partition("=")
                meta[key] = val
    except FileNotFoundError:
        pass
    pose = pose_camera(float(meta["rp"]), float(meta["rr"]), float(meta["ry"]),
                       (0.0, 0.0, 0.0), float(meta["sc"]), w, h,
                       (float(meta["u0"]), float(meta["v0"])))
    return DepthImage(depth, pose, meta["stage"], meta["patient"], meta["scan"],
                      int(meta["pose"]))
