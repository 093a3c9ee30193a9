"""Embeddings, triplet losses, and the grouped batch-sampling strategy.

Batches are built from L identities, one random E-sized subgroup each, so
every batch carries intra- and inter-identity structure (default 15 x 18 =
270 members). The embedder is pluggable; the deterministic baseline here
block-averages a depth image into a 256-dim unit vector.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from .render import DepthImage

log = logging.getLogger(__name__)

DEFAULT_GROUP_SIZE = 15     # E: images per subgroup
DEFAULT_LABEL_COUNT = 18    # L: identities per batch
DEFAULT_MARGIN = 0.2
EMBED_SIDE = 16             # baseline embedding is a 16 x 16 block average


class ImageRef(NamedTuple):
    """Identity of one depth image within a cohort."""

    patient: str
    scan: str
    pose_index: int


@dataclass(frozen=True, eq=False)
class Embedding:
    vector: np.ndarray
    patient: str = ""
    scan: str = ""
    pose_index: int = 0

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).ravel()
        if not np.isfinite(v).all():
            raise ValueError("embedding vector must be finite")
        object.__setattr__(self, "vector", v)

    @property
    def ref(self) -> ImageRef:
        return ImageRef(self.patient, self.scan, self.pose_index)


@dataclass(frozen=True)
class Subgroup:
    """Fixed-size set of one patient's image references."""

    patient: str
    members: tuple[ImageRef, ...]

    def __post_init__(self):
        if any(m.patient != self.patient for m in self.members):
            raise ValueError("subgroup members must share the patient id")


@dataclass(frozen=True)
class Batch:
    """One subgroup from each of L distinct patients."""

    subgroups: tuple[Subgroup, ...]

    def __post_init__(self):
        labels = [g.patient for g in self.subgroups]
        if len(set(labels)) != len(labels):
            raise ValueError("batch patients must be pairwise distinct")

    @property
    def members(self) -> tuple[ImageRef, ...]:
        return tuple(m for g in self.subgroups for m in g.members)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(m.patient for g in self.subgroups for m in g.members)

    def __len__(self) -> int:
        return sum(len(g.members) for g in self.subgroups)


def _crop_at(image: DepthImage, oy: int, ox: int, size: int) -> DepthImage:
    depth = image.depth[oy:oy + size, ox:ox + size].copy()
    pose = dataclasses.replace(
        image.pose, width=size, height=size,
        center_px=(image.pose.center_px[0] - ox, image.pose.center_px[1] - oy),
    )
    return dataclasses.replace(image, depth=depth, pose=pose)


def random_crop(image: DepthImage, size: int, seed) -> DepthImage:
    """Seeded uniform square crop; corner offsets are drawn (row, then column)."""
    size = int(size)
    if size > image.height or size > image.width:
        raise ValueError(f"crop size {size} exceeds image size "
                         f"({image.height}, {image.width})")
    rng = np.random.default_rng(seed)
    oy = int(rng.integers(0, image.height - size + 1))
    ox = int(rng.integers(0, image.width - size + 1))
    return _crop_at(image, oy, ox, size)


def center_crop(image: DepthImage, size: int) -> DepthImage:
    """Deterministic centered square crop (the evaluation-time counterpart of
    the training-time random crop)."""
    size = int(size)
    if size > image.height or size > image.width:
        raise ValueError(f"crop size {size} exceeds image size "
                         f"({image.height}, {image.width})")
    return _crop_at(image, (image.height - size) // 2, (image.width - size) // 2, size)


def baseline_embed(image: DepthImage) -> Embedding:
    """Deterministic stand-in embedder: 16x16 block average, mean-centered,
    L2-normalized (constant images fall back to the first-axis unit vector)."""
    d = image.depth
    rows = (np.arange(EMBED_SIDE) * d.shape[0]) // EMBED_SIDE
    cols = (np.arange(EMBED_SIDE) * d.shape[1]) // EMBED_SIDE
    sums = np.add.reduceat(np.add.reduceat(d, rows, axis=0), cols, axis=1)
    h = np.diff(np.append(rows, d.shape[0]))
    w = np.diff(np.append(cols, d.shape[1]))
    v = (sums / np.outer(h, w)).ravel()
    v = v - v.mean()
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        v = np.zeros(EMBED_SIDE * EMBED_SIDE)
        v[0] = 1.0
    else:
        v = v / norm
    return Embedding(v, image.patient, image.scan, image.pose_index)


def _vec(x) -> np.ndarray:
    return x.vector if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64)


def triplet_loss_paper(anchor, positive, negative, margin: float = DEFAULT_MARGIN) -> float:
    """Per-triple loss |d(a,p) - d(a,n)| + margin (never below the margin)."""
    a, p, n = _vec(anchor), _vec(positive), _vec(negative)
    if not (a.shape == p.shape == n.shape):
        raise ValueError("embedding dimensions differ")
    return float(abs(np.linalg.norm(a - p) - np.linalg.norm(a - n)) + margin)


def triplet_loss_hinge(anchor, positive, negative, margin: float = DEFAULT_MARGIN) -> float:
    """Standard hinge form max(0, d(a,p) - d(a,n) + margin)."""
    a, p, n = _vec(anchor), _vec(positive), _vec(negative)
    if not (a.shape == p.shape == n.shape):
        raise ValueError("embedding dimensions differ")
    return float(max(0.0, np.linalg.norm(a - p) - np.linalg.norm(a - n) + margin))


def make_subgroups(refs: Iterable[ImageRef], group_size: int = DEFAULT_GROUP_SIZE,
                   shuffle_across_scans: bool = True, seed=0) -> list[Subgroup]:
    """Chunk each patient's (seeded-shuffled) images into size-E subgroups.

    With shuffle_across_scans a subgroup may mix images from the patient's
    different scans; otherwise images are shuffled and chunked within each
    scan. Leftovers after chunking are dropped; patients with fewer than E
    images are skipped with a warning.
    """
    if group_size < 2:
        raise ValueError(f"subgroup size must be >= 2, got {group_size}")
    by_patient: dict[str, list[ImageRef]] = {}
    for r in refs:
        by_patient.setdefault(r.patient, []).append(r)

    rng = np.random.default_rng(seed)
    groups: list[Subgroup] = []
    for patient in sorted(by_patient):
        items = sorted(by_patient[patient])
        if len(items) < group_size:
            log.warning("patient %s has %d images (< E=%d), skipped",
                        patient, len(items), group_size)
            continue
        if shuffle_across_scans:
            pools = [items]
        else:
            by_scan: dict[str, list[ImageRef]] = {}
            for r in items:
                by_scan.setdefault(r.scan, []).append(r)
            pools = [by_scan[s] for s in sorted(by_scan)]
        for pool in pools:
            order = rng.permutation(len(pool))
            shuffled = [pool[i] for i in order]
            for k in range(len(shuffled) // group_size):
                members = tuple(shuffled[k * group_size:(k + 1) * group_size])
                groups.append(Subgroup(patient, members))
    return groups


def make_batches(subgroups: list[Subgroup], label_count: int = DEFAULT_LABEL_COUNT,
                 seed=0) -> list[Batch]:
    """Assemble batches of one subgroup from each of L randomly drawn patients.

    Each subgroup is consumed at most once; batches are emitted until fewer
    than L patients still have unused subgroups.
    """
    patients = sorted({g.patient for g in subgroups})
    if len(patients) < label_count:
        raise ValueError(
            f"need >= {label_count} distinct patients, got {len(patients)}"
        )
    pools: dict[str, list[Subgroup]] = {p: [] for p in patients}
    for g in subgroups:
        pools[g.patient].append(g)

    rng = np.random.default_rng(seed)
    batches: list[Batch] = []
    while True:
        available = sorted(p for p, gs in pools.items() if gs)
        if len(available) < label_count:
            break
        chosen = rng.choice(len(available), size=label_count, replace=False)
        picked = []
        for ci in sorted(int(i) for i in chosen):
            patient = available[ci]
            gi = int(rng.integers(0, len(pools[patient])))
            picked.append(pools[patient].pop(gi))
        batches.append(Batch(tuple(picked)))
    return batches


def mine_triplets(batch: Batch, embeddings, mode: str = "all") -> list[tuple[int, int, int]]:
    """Triplet indices into the batch's flattened member list.

    mode 'all': every ordered same-patient (anchor, positive) pair crossed
    with every other-patient negative. mode 'batch-hard': per anchor, the
    farthest positive and the nearest negative, ties to the lowest index.
    """
    labels = np.array(batch.labels)
    if len(set(labels.tolist())) < 2:
        raise ValueError("triplet mining requires at least two labels in the batch")
    if isinstance(embeddings, (list, tuple)):
        emb = np.stack([_vec(e) for e in embeddings])
    else:
        emb = np.asarray(embeddings, dtype=np.float64)
    if len(emb) != len(labels):
        raise ValueError(f"{len(emb)} embeddings for {len(labels)} batch members")

    same = labels[:, None] == labels[None, :]
    if mode == "all":
        triplets = []
        for a in range(len(labels)):
            pos = np.nonzero(same[a])[0]
            neg = np.nonzero(~same[a])[0]
            for p in pos:
                if p == a:
                    continue
                for n in neg:
                    triplets.append((a, int(p), int(n)))
        return triplets
    if mode == "batch-hard":
        diff = emb[:, None, :] - emb[None, :, :]
        dist = np.sqrt((diff * diff).sum(axis=2))
        triplets = []
        for a in range(len(labels)):
            pos_mask = same[a].copy()
            pos_mask[a] = False
            if not pos_mask.any():
                continue
            dp = np.where(pos_mask, dist[a], -np.inf)
            dn = np.where(~same[a], dist[a], np.inf)
            triplets.append((a, int(dp.argmax()), int(dn.argmin())))
        return triplets
    raise ValueError(f"unknown mining mode {mode!r}")


def save_embeddings(embeddings: Iterable[Embedding], path) -> None:
    """One text record per image: `patient scan pose v1 ... vD`."""
    with open(path, "w") as f:
        for e in embeddings:
            coords = " ".join(f"{x:.17g}" for x in e.vector)
            f.write(f"{e.patient} {e.scan} {e.pose_index} {coords}\n")


def load_embeddings(path) -> list[Embedding]:
    out = []
    with open(path) as f:
        for line in f:
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 4:
                raise ValueError(f"{path}: malformed embedding record {line!r}")
            vec = np.array([float(v) for v in fields[3:]])
            out.append(Embedding(vec, fields[0], fields[1], int(fields[2])))
    return out


def save_batches(batches: Iterable[Batch], path) -> None:
    """Batch manifest: one `batch_idx patient scan pose` line per member."""
    with open(path, "w") as f:
        for bi, batch in enumerate(batches):
            for m in batch.members:
                f.write(f"{bi} {m.patient} {m.scan} {m.pose_index}\n")
