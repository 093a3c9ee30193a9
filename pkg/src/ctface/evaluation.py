"""Biometric evaluation: 1:N identification, 1:1 verification, splits and folds.

Verification similarity is the negative Euclidean distance between
embeddings; the operating threshold for VACC maximizes Youden's J (ties go to
the lower threshold).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .recognition import Embedding

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True, eq=False)
class GalleryProbeSplit:
    """One enrolled embedding per class plus labelled probe embeddings."""

    gallery_vectors: np.ndarray   # (G, D)
    gallery_labels: tuple[str, ...]
    probe_vectors: np.ndarray     # (P, D)
    probe_labels: tuple[str, ...]

    def __post_init__(self):
        gv = np.asarray(self.gallery_vectors, dtype=np.float64)
        pv = np.asarray(self.probe_vectors, dtype=np.float64)
        gl = tuple(self.gallery_labels)
        pl = tuple(self.probe_labels)
        if len(gl) != len(set(gl)):
            raise ValueError("gallery labels must be pairwise distinct")
        if not set(pl) <= set(gl):
            raise ValueError("every probe label must appear in the gallery")
        if len(gv) != len(gl) or len(pv) != len(pl):
            raise ValueError("labels and vectors must align")
        # Keep the gallery sorted so argmin tie-breaking hits the lowest class.
        order = np.argsort(np.array(gl))
        object.__setattr__(self, "gallery_vectors", gv[order])
        object.__setattr__(self, "gallery_labels", tuple(gl[i] for i in order))
        object.__setattr__(self, "probe_vectors", pv)
        object.__setattr__(self, "probe_labels", pl)


def gallery_probe_split(embeddings: Sequence[Embedding], seed=0) -> GalleryProbeSplit:
    """Enroll one seeded-random image per class; the rest become probes."""
    by_label: dict[str, list[Embedding]] = {}
    for e in embeddings:
        by_label.setdefault(e.patient, []).append(e)
    rng = np.random.default_rng(seed)
    g_vec, g_lab, p_vec, p_lab = [], [], [], []
    for label in sorted(by_label):
        group = sorted(by_label[label], key=lambda e: (e.scan, e.pose_index))
        pick = int(rng.integers(0, len(group)))
        g_vec.append(group[pick].vector)
        g_lab.append(label)
        for i, e in enumerate(group):
            if i != pick:
                p_vec.append(e.vector)
                p_lab.append(label)
    return GalleryProbeSplit(np.stack(g_vec), tuple(g_lab), np.stack(p_vec), tuple(p_lab))


def identify(split: GalleryProbeSplit) -> tuple[list[str], float]:
    """Nearest-gallery classification of every probe; returns labels and accuracy."""
    if len(split.probe_labels) == 0:
        raise ValueError("probe set is empty")
    g = split.gallery_vectors
    p = split.probe_vectors
    d2 = (p * p).sum(1)[:, None] - 2.0 * (p @ g.T) + (g * g).sum(1)[None, :]
    nearest = d2.argmin(axis=1)  # first minimum = lowest class index
    predicted = [split.gallery_labels[i] for i in nearest]
    correct = sum(a == b for a, b in zip(predicted, split.probe_labels))
    return predicted, correct / len(predicted)


class PairSet(NamedTuple):
    """Index pairs for verification; genuine marks same-subject pairs."""

    first: np.ndarray    # (N,) int
    second: np.ndarray   # (N,) int
    genuine: np.ndarray  # (N,) bool


def make_pairs(labels: Sequence[str], impostor_ratio: float = 1.0, seed=0) -> PairSet:
    """All genuine pairs plus a seeded sample of impostor pairs.

    The impostor count is round(ratio * genuine count), sampled without
    replacement from all cross-label pairs; requesting more than exist is an
    error.
    """
    lab = np.array(labels)
    if len(set(lab.tolist())) < 2:
        raise ValueError("verification pairs require at least two labels")
    if impostor_ratio < 0:
        raise ValueError(f"impostor ratio must be >= 0, got {impostor_ratio}")
    i, j = np.triu_indices(len(lab), k=1)
    same = lab[i] == lab[j]
    gi, gj = i[same], j[same]
    ii, ij = i[~same], j[~same]
    wanted = int(round(impostor_ratio * len(gi)))
    if wanted > len(ii):
        raise ValueError(f"requested {wanted} impostor pairs, only {len(ii)} exist")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(ii), size=wanted, replace=False))
    first = np.concatenate([gi, ii[pick]])
    second = np.concatenate([gj, ij[pick]])
    genuine = np.zeros(len(first), dtype=bool)
    genuine[: len(gi)] = True
    return PairSet(first, second, genuine)


def pair_similarities(vectors: np.ndarray, pairs: PairSet) -> np.ndarray:
    """Verification score per pair: negative Euclidean distance."""
    v = np.asarray(vectors, dtype=np.float64)
    return -np.sqrt(((v[pairs.first] - v[pairs.second]) ** 2).sum(axis=1))


@dataclass(frozen=True, eq=False)
class RocCurve:
    points: np.ndarray        # (M, 2) of (fpr, tpr), (0,0) .. (1,1)
    auc: float
    vacc_threshold: float
    vacc: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if (np.diff(pts[:, 0]) < 0).any() or (np.diff(pts[:, 1]) < 0).any():
            raise ValueError("ROC points must be monotone nondecreasing")
        if not (np.allclose(pts[0], (0, 0)) and np.allclose(pts[-1], (1, 1))):
            raise ValueError("ROC must run from (0,0) to (1,1)")
        if abs(_trapezoid(pts[:, 1], pts[:, 0]) - self.auc) > 1e-12:
            raise ValueError("auc must equal the trapezoidal integral of the points")
        object.__setattr__(self, "points", pts)


def roc(scores, genuine=None) -> RocCurve:
    """ROC over all distinct score thresholds (decision: similarity >= t).

    Accepts an iterable of (similarity, genuine) pairs, or separate score and
    label arrays. AUC is the trapezoidal integral; VACC is the accuracy at
    the Youden-optimal threshold.
    """
    if genuine is None:
        items = list(scores)
        sims = np.array([s for s, _ in items], dtype=np.float64)
        gen = np.array([bool(g) for _, g in items])
    else:
        sims = np.asarray(scores, dtype=np.float64)
        gen = np.asarray(genuine, dtype=bool)
    n_gen = int(gen.sum())
    n_imp = int(len(gen) - n_gen)
    if n_gen == 0 or n_imp == 0:
        raise ValueError("ROC requires at least one genuine and one impostor score")

    order = np.argsort(-sims, kind="mergesort")
    s = sims[order]
    g = gen[order]
    # Cumulative counts at each distinct threshold (last index of each run).
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(g)[last]
    fp = np.cumsum(~g)[last]
    tpr = tp / n_gen
    fpr = fp / n_imp
    points = np.concatenate([[[0.0, 0.0]], np.column_stack([fpr, tpr])])
    auc = float(_trapezoid(points[:, 1], points[:, 0]))

    j = tpr - fpr
    best = int(np.nonzero(j == j.max())[0].max())  # ties -> lowest threshold
    thr = float(s[last][best])
    vacc = float((tp[best] + (n_imp - fp[best])) / len(gen))
    return RocCurve(points, auc, thr, vacc)


def split_per_class(refs_by_class: Mapping[str, Sequence], ratio: float = 0.8,
                    seed=0) -> tuple[list, list]:
    """Seeded per-class split at round(ratio * count), both sides non-empty."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in sorted(refs_by_class):
        items = list(refs_by_class[label])
        if len(items) < 2:
            raise ValueError(f"class {label!r} has {len(items)} images, needs >= 2")
        order = rng.permutation(len(items))
        cut = min(max(int(round(ratio * len(items))), 1), len(items) - 1)
        train.extend(items[k] for k in order[:cut])
        test.extend(items[k] for k in order[cut:])
    return train, test


def kfold_subjects(subjects: Sequence[str], k: int = 5, seed=0) -> list[tuple[list[str], list[str]]]:
    """Seeded partition into k near-equal folds; fold i is the test set."""
    ids = sorted(set(subjects))
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the {len(ids)} available subjects")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    folds = np.array_split(order, k)
    out = []
    for i in range(k):
        test = [ids[j] for j in folds[i]]
        train = [ids[j] for f in folds[:i] + folds[i + 1:] for j in f]
        out.append((train, test))
    return out


@dataclass(frozen=True)
class FoldMetrics:
    acc: float
    vacc: float
    auc: float

    def __post_init__(self):
        for name in ("acc", "vacc", "auc"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class EvalReport:
    """Per-fold metrics with their means and population standard deviations."""

    folds: tuple[FoldMetrics, ...]
    mean: FoldMetrics
    std: tuple[float, float, float]


def aggregate(folds: Sequence[FoldMetrics]) -> EvalReport:
    if len(folds) == 0:
        raise ValueError("at least one fold is required")
    m = np.array([[f.acc, f.vacc, f.auc] for f in folds])
    mean = m.mean(axis=0)
    std = m.std(axis=0)  # population std
    return EvalReport(tuple(folds), FoldMetrics(*mean), tuple(float(s) for s in std))
