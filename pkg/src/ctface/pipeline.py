"""Whole-pipeline orchestration: volumes to depth stages to embeddings to metrics.

Every step is deterministic given the configuration seed; scans are processed
independently (optionally in a worker pool) and aggregated in a fixed sort
order, so results do not depend on scheduling.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import faceproc, render
from .evaluation import (EvalReport, FoldMetrics, RocCurve, aggregate,
                         gallery_probe_split, identify, kfold_subjects,
                         make_pairs, pair_similarities, roc)
from .landmarks import decode_heatmaps, load_landmarks, oracle_predictor, save_landmarks
from .phantom import CohortManifest, ScanEntry, load_manifest
from .recognition import Embedding, baseline_embed, center_crop, save_embeddings
from .volume import crop_roi, landmark_roi_box, load_volume, resample_spacing, save_volume

log = logging.getLogger(__name__)

STAGE_ALIASES = {
    "projected": render.STAGE_PROJECTED,
    "segmented": render.STAGE_SEGMENTED,
    "final": render.STAGE_NORMALIZED,
    "normalized": render.STAGE_NORMALIZED,
}
STAGE_DIRS = {
    render.STAGE_PROJECTED: "projected",
    render.STAGE_SEGMENTED: "segmented",
    render.STAGE_NORMALIZED: "final",
}


class ConfigError(ValueError):
    """Invalid pipeline configuration (bad key, value, or combination)."""


def parse_sweep_range(text: str) -> tuple[float, float, int]:
    """Parse an `a:b:n` sweep specification."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise ConfigError(f"sweep range must be a:b:n, got {text!r}")
    try:
        a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError as e:
        raise ConfigError(f"sweep range must be a:b:n with numeric fields: {text!r}") from e
    if n < 1:
        raise ConfigError(f"sweep must have at least one step, got {text!r}")
    return a, b, n


@dataclass(frozen=True)
class PipelineConfig:
    """Flat pipeline settings; precedence is CLI > config file > defaults."""

    spacing: float = 1.0            # resampled voxel pitch, mm isotropic
    sigma: float = 2.0              # landmark heatmap blob width, voxels
    decode_tau: float = 0.25        # heatmap decode threshold fraction
    margin_factor: float = 0.5      # ROI margin in inter-eye distances
    gamma: float = -350.0           # iso-surface level, HU
    theta: float = 60.0             # surface-normal cull angle, degrees
    sweep_pitch: str = "-20:20:9"
    sweep_roll: str = "-25:25:10"
    yaw: float = 0.0
    sc: float = 180.0               # physical mm spanned by the image width
    image_size: int = 256
    u0: float | None = None         # principal point (default: image center)
    v0: float | None = None
    theta_norm: str = "auto"        # depth-normalization threshold ('auto' = 1st pct)
    scale_c: float = 255.0
    stage: str = "final"            # which stage feeds the embedder
    crop_size: int = 224
    group_size: int = 15            # E
    label_count: int = 18           # L
    margin: float = 0.2
    loss: str = "hinge"             # 'hinge' or 'paper'
    folds: int = 5
    impostor_ratio: float = 1.0
    seed: int = 42
    workers: int = 0                # 0 = auto (min(8, cpu count))
    keep_stages: bool = False

    def validate(self) -> "PipelineConfig":
        if self.spacing <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not (0 < self.decode_tau < 1):
            raise ConfigError(f"decode_tau must be in (0, 1), got {self.decode_tau}")
        if not (0 < self.theta <= 180):
            raise ConfigError(f"theta must be in (0, 180], got {self.theta}")
        if self.sc <= 0 or self.image_size <= 0:
            raise ConfigError("sc and image_size must be positive")
        if self.theta_norm != "auto":
            try:
                float(self.theta_norm)
            except ValueError:
                raise ConfigError(f"theta_norm must be 'auto' or a number, got {self.theta_norm!r}")
        if self.scale_c <= 0:
            raise ConfigError(f"scale_c must be positive, got {self.scale_c}")
        if self.stage not in STAGE_ALIASES:
            raise ConfigError(f"stage must be one of {sorted(STAGE_ALIASES)}, got {self.stage!r}")
        if self.crop_size <= 0 or self.crop_size > self.image_size:
            raise ConfigError("crop_size must be in (0, image_size]")
        if self.loss not in ("hinge", "paper"):
            raise ConfigError(f"loss must be 'hinge' or 'paper', got {self.loss!r}")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if self.impostor_ratio < 0:
            raise ConfigError("impostor_ratio must be >= 0")
        parse_sweep_range(self.sweep_pitch)
        parse_sweep_range(self.sweep_roll)
        return self

    @property
    def embed_stage(self) -> str:
        return STAGE_ALIASES[self.stage]

    def sweep_config(self) -> render.SweepConfig:
        p = parse_sweep_range(self.sweep_pitch)
        r = parse_sweep_range(self.sweep_roll)
        size = self.image_size
        u0 = size / 2.0 if self.u0 is None else self.u0
        v0 = size / 2.0 if self.v0 is None else self.v0
        return render.SweepConfig((p[0], p[1]), p[2], (r[0], r[1]), r[2],
                                  self.yaw, self.sc, size, size, (u0, v0), self.theta)


_BOOL_KEYS = {"keep_stages"}
_INT_KEYS = {"image_size", "crop_size", "group_size", "label_count", "folds",
             "seed", "workers"}
_FLOAT_KEYS = {"spacing", "sigma", "decode_tau", "margin_factor", "gamma", "theta",
               "yaw", "sc", "u0", "v0", "scale_c", "margin", "impostor_ratio"}
_STR_KEYS = {"sweep_pitch", "sweep_roll", "theta_norm", "stage", "loss"}


def _coerce(key: str, value: str):
    if key in _BOOL_KEYS:
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as e:
        raise ConfigError(f"{key}: bad numeric value {value!r}") from e
    if key in _STR_KEYS:
        return str(value)
    raise ConfigError(f"unknown config key {key!r}")


def load_config(path) -> PipelineConfig:
    """Flat `key = value` text file; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = _coerce(key.strip(), val.strip())
    return dataclasses.replace(PipelineConfig(), **values).validate()


def apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Overlay non-None override values (CLI flags) onto a config."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(config, **clean).validate()


def crop_seed(seed: int, patient: str, scan: str, pose_index: int) -> tuple:
    """Stable per-image seed material for the random crop."""
    return (seed, zlib.crc32(patient.encode()), zlib.crc32(scan.encode()), pose_index)


@dataclass
class ScanOutput:
    entry: ScanEntry
    embeddings: list[Embedding]
    n_images: int


def process_scan(config: PipelineConfig, root: str, entry: ScanEntry,
                 out_dir: str | None = None) -> ScanOutput:
    """Run one scan through resample -> landmarks -> ROI -> mesh -> sweep ->
    mask -> normalize -> embed. Raises RuntimeError tagged with the failing stage."""
    stage = "load"
    try:
        volume = load_volume(os.path.join(root, entry.path))
        marks = load_landmarks(os.path.join(root, entry.landmarks_path))

        stage = "resample"
        target = (config.spacing,) * 3
        resampled = resample_spacing(volume, target)
        scaled = marks.scaled([s / t for s, t in zip(volume.spacing, target)])

        stage = "landmarks"
        predictor = oracle_predictor(scaled, config.sigma)
        heat = predictor.predict(resampled)
        decoded = decode_heatmaps(heat, config.decode_tau)

        stage = "crop"
        box = landmark_roi_box(resampled, decoded, config.margin_factor)
        roi = crop_roi(resampled, decoded, config.margin_factor)

        stage = "isosurface"
        mesh = render.extract_isosurface(roi, config.gamma)
        if mesh.is_empty:
            raise ValueError(f"iso level {config.gamma} produced an empty surface")

        stage = "render"
        images = render.pose_sweep(mesh, config.sweep_config(),
                                   patient=entry.subject, scan=entry.scan)

        stage = "segment"
        segmented = [faceproc.apply_mask(im, faceproc.baseline_face_mask(im))
                     for im in images]

        stage = "normalize"
        finals = []
        for im in segmented:
            if config.theta_norm == "auto":
                thr = faceproc.suggest_threshold(im)
            else:
                thr = float(config.theta_norm)
            finals.append(faceproc.normalize_depth(im, thr, config.scale_c))

        stage = "embed"
        by_stage = {render.STAGE_PROJECTED: images,
                    render.STAGE_SEGMENTED: segmented,
                    render.STAGE_NORMALIZED: finals}
        # Evaluation-time crops are deterministic center crops; the seeded
        # random crop is a training-side augmentation.
        embeddings = [baseline_embed(center_crop(im, config.crop_size))
                      for im in by_stage[config.embed_stage]]

        if out_dir is not None and config.keep_stages:
            stage = "persist"
            out = Path(out_dir)
            roi_dir = out / "roi"
            roi_dir.mkdir(parents=True, exist_ok=True)
            stem = f"{entry.subject}_{entry.scan}"
            save_volume(roi, roi_dir / f"{stem}.ctv")
            save_landmarks(decoded.shifted(-np.array(box.min_corner)),
                           roi_dir / f"{stem}.lmk")
            for tag, imgs in by_stage.items():
                d = out / STAGE_DIRS[tag]
                d.mkdir(parents=True, exist_ok=True)
                for im in imgs:
                    render.save_depth_pgm(im, d / f"{stem}_p{im.pose_index:03d}.pgm")
        return ScanOutput(entry, embeddings, len(images))
    except Exception as e:
        raise RuntimeError(
            f"scan {entry.subject}/{entry.scan} failed at stage '{stage}': {e}"
        ) from e


def evaluate_embeddings(embeddings: list[Embedding], folds: int = 5, seed: int = 42,
                        impostor_ratio: float = 1.0) -> tuple[EvalReport, list[RocCurve]]:
    """Subject-level k-fold evaluation: rank-1 identification plus verification."""
    subjects = sorted({e.patient for e in embeddings})
    fold_splits = kfold_subjects(subjects, folds, seed)
    metrics, curves = [], []
    for fi, (_train, test) in enumerate(fold_splits):
        test_set = set(test)
        fold_embs = [e for e in embeddings if e.patient in test_set]
        split = gallery_probe_split(fold_embs, seed=(seed, fi))
        _, acc = identify(split)
        labels = [e.patient for e in fold_embs]
        vectors = np.stack([e.vector for e in fold_embs])
        pairs = make_pairs(labels, impostor_ratio, seed=(seed, fi))
        curve = roc(pair_similarities(vectors, pairs), pairs.genuine)
        metrics.append(FoldMetrics(acc, curve.vacc, curve.auc))
        curves.append(curve)
    return aggregate(metrics), curves


@dataclass
class PipelineResult:
    report: EvalReport
    curves: list[RocCurve]
    embeddings_path: str
    report_dir: str
    n_images: int
    failures: list[str]


def run_pipeline(config: PipelineConfig, manifest: CohortManifest | str | Path,
                 out_dir) -> PipelineResult:
    """Process every manifest scan, evaluate, and write the report tree.

    Failed scans are logged and skipped; their messages are returned in
    `failures` (callers surface this as a nonzero exit status).
    """
    config.validate()
    if not isinstance(manifest, CohortManifest):
        manifest = load_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    outputs: list[ScanOutput] = []
    failures: list[str] = []
    workers = config.workers or min(8, os.cpu_count() or 1)
    if workers > 1 and len(manifest.entries) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(process_scan, config, manifest.root, e, str(out))
                       for e in manifest.entries]
            for entry, fut in zip(manifest.entries, futures):
                try:
                    outputs.append(fut.result())
                except Exception as e:
                    log.error("%s", e)
                    failures.append(str(e))
    else:
        for entry in manifest.entries:
            try:
                outputs.append(process_scan(config, manifest.root, entry, str(out)))
            except Exception as e:
                log.error("%s", e)
                failures.append(str(e))

    embeddings = [emb for o in outputs for emb in o.embeddings]
    embeddings.sort(key=lambda e: (e.patient, e.scan, e.pose_index))
    if not embeddings:
        raise RuntimeError("no scan produced embeddings; nothing to evaluate")
    emb_path = out / f"embeddings_{STAGE_DIRS[config.embed_stage]}.txt"
    save_embeddings(embeddings, emb_path)

    report, curves = evaluate_embeddings(embeddings, config.folds, config.seed,
                                         config.impostor_ratio)
    report_dir = out / "report"
    from . import report as report_io
    report_io.write_report_tree(report, curves, report_dir)
    return PipelineResult(report, curves, str(emb_path), str(report_dir),
                          sum(o.n_images for o in outputs), failures)


@dataclass(frozen=True)
class StageComparisonRow:
    stage: str
    mean_acc: float
    mean_vacc: float
    mean_auc: float
    delta_acc: float
    delta_vacc: float
    delta_auc: float


def compare_stages(reports, names=None) -> list[StageComparisonRow]:
    """Per-metric deltas between consecutive stage reports.

    Rows follow the column order stage, mean_acc, mean_vacc, mean_auc,
    delta_acc, delta_vacc, delta_auc; the first row's deltas are 0.
    """
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("stage comparison needs at least two reports")
    n_folds = len(reports[0].folds)
    if any(len(r.folds) != n_folds for r in reports):
        raise ValueError("reports have mismatched fold structure")
    names = list(names) if names else [f"stage{i}" for i in range(len(reports))]
    if len(names) != len(reports):
        raise ValueError("one name per report required")
    rows = []
    prev = None
    for name, rep in zip(names, reports):
        m = rep.mean
        if prev is None:
            deltas = (0.0, 0.0, 0.0)
        else:
            deltas = (m.acc - prev.acc, m.vacc - prev.vacc, m.auc - prev.auc)
        rows.append(StageComparisonRow(name, m.acc, m.vacc, m.auc, *deltas))
        prev = m
    return rows
