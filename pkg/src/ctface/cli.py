"""Command-line interface for the CT face depth pipeline.

Exit codes: 0 success, 1 partial failures (some scans/images skipped),
2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import faceproc, render
from .landmarks import decode_heatmaps, load_landmarks, oracle_predictor, save_landmarks
from .phantom import CohortManifest, ScanEntry, generate_cohort, load_manifest, save_manifest
from .pipeline import (ConfigError, PipelineConfig, apply_overrides, compare_stages,
                       crop_seed, evaluate_embeddings, load_config, run_pipeline)
from .recognition import (ImageRef, baseline_embed, center_crop, load_embeddings,
                          make_batches, make_subgroups, mine_triplets, random_crop,
                          save_batches, save_embeddings, triplet_loss_hinge,
                          triplet_loss_paper)
from .volume import crop_roi, landmark_roi_box, load_volume, resample_spacing, save_volume

log = logging.getLogger("ctface")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


def _add_render_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=None, help="iso-surface level in HU")
    p.add_argument("--theta", type=float, default=None, help="surface-normal cull angle, degrees")
    p.add_argument("--sweep-pitch", default=None, metavar="a:b:n", help="pitch sweep grid")
    p.add_argument("--sweep-roll", default=None, metavar="a:b:n", help="roll sweep grid")
    p.add_argument("--yaw", type=float, default=None)
    p.add_argument("--sc", type=float, default=None, help="mm spanned by the image width")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--u0", type=float, default=None)
    p.add_argument("--v0", type=float, default=None)


def _collect_overrides(args: argparse.Namespace, keys: dict[str, str]) -> dict:
    return {cfg: getattr(args, attr) for attr, cfg in keys.items() if hasattr(args, attr)}


_RENDER_KEYS = {"gamma": "gamma", "theta": "theta", "sweep_pitch": "sweep_pitch",
                "sweep_roll": "sweep_roll", "yaw": "yaw", "sc": "sc",
                "image_size": "image_size", "u0": "u0", "v0": "v0"}


def _sorted_pgms(dir_path: Path) -> list[Path]:
    return sorted(dir_path.glob("*.pgm"))


def cmd_phantom_gen(args) -> int:
    manifest = generate_cohort(args.subjects, args.scans, args.seed, args.out,
                               noise_std=args.noise_std)
    print(f"wrote {len(manifest.entries)} scans for {args.subjects} subjects "
          f"under {args.out} (manifest.txt)")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    config = apply_overrides(PipelineConfig(), {
        "spacing": args.spacing, "sigma": args.sigma, "decode_tau": args.tau,
        "margin_factor": args.margin_factor,
    })
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    (out / "roi").mkdir(parents=True, exist_ok=True)
    entries, failures = [], []
    for e in manifest.entries:
        try:
            volume = load_volume(Path(manifest.root) / e.path)
            marks = load_landmarks(Path(manifest.root) / e.landmarks_path)
            target = (config.spacing,) * 3
            resampled = resample_spacing(volume, target)
            scaled = marks.scaled([s / t for s, t in zip(volume.spacing, target)])
            heat = oracle_predictor(scaled, config.sigma).predict(resampled)
            decoded = decode_heatmaps(heat, config.decode_tau)
            box = landmark_roi_box(resampled, decoded, config.margin_factor)
            roi = crop_roi(resampled, decoded, config.margin_factor)
            rel = f"roi/{e.subject}_{e.scan}.ctv"
            save_volume(roi, out / rel)
            import numpy as np
            save_landmarks(decoded.shifted(-np.array(box.min_corner)),
                           out / f"roi/{e.subject}_{e.scan}.lmk")
            entries.append(ScanEntry(e.subject, e.scan, rel, target, e.seed))
        except Exception as exc:
            log.error("preprocess %s/%s failed: %s", e.subject, e.scan, exc)
            failures.append(f"{e.subject}/{e.scan}")
    save_manifest(CohortManifest(str(out), tuple(entries)), out / "manifest.txt")
    print(f"preprocessed {len(entries)}/{len(manifest.entries)} scans into {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_render(args) -> int:
    config = apply_overrides(PipelineConfig(), _collect_overrides(args, _RENDER_KEYS))
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    n = 0
    for e in manifest.entries:
        try:
            roi = load_volume(Path(manifest.root) / e.path)
            mesh = render.extract_isosurface(roi, config.gamma)
            if mesh.is_empty:
                raise ValueError(f"iso level {config.gamma} produced an empty surface")
            for im in render.pose_sweep(mesh, config.sweep_config(), e.subject, e.scan):
                render.save_depth_pgm(im, out / f"{e.subject}_{e.scan}_p{im.pose_index:03d}.pgm")
                n += 1
        except Exception as exc:
            log.error("render %s/%s failed: %s", e.subject, e.scan, exc)
            failures.append(f"{e.subject}/{e.scan}")
    print(f"rendered {n} depth images into {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_segment(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    files = _sorted_pgms(Path(args.input))
    for p in files:
        try:
            im = render.load_depth_pgm(p)
            seg = faceproc.apply_mask(im, faceproc.baseline_face_mask(im))
            render.save_depth_pgm(seg, out / p.name)
        except Exception as exc:
            log.error("segment %s failed: %s", p.name, exc)
            failures.append(p.name)
    print(f"segmented {len(files) - len(failures)}/{len(files)} images into {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_normalize(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    files = _sorted_pgms(Path(args.input))
    for p in files:
        try:
            im = render.load_depth_pgm(p)
            thr = (faceproc.suggest_threshold(im) if args.theta_norm == "auto"
                   else float(args.theta_norm))
            render.save_depth_pgm(faceproc.normalize_depth(im, thr, args.scale_c),
                                  out / p.name)
        except Exception as exc:
            log.error("normalize %s failed: %s", p.name, exc)
            failures.append(p.name)
    print(f"normalized {len(files) - len(failures)}/{len(files)} images into {out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_embed(args) -> int:
    files = _sorted_pgms(Path(args.input))
    embeddings, failures = [], []
    for p in files:
        try:
            im = render.load_depth_pgm(p)
            if args.crop_mode == "random":
                seed = crop_seed(args.seed, im.patient, im.scan, im.pose_index)
                cropped = random_crop(im, args.crop, seed)
            else:
                cropped = center_crop(im, args.crop)
            embeddings.append(baseline_embed(cropped))
        except Exception as exc:
            log.error("embed %s failed: %s", p.name, exc)
            failures.append(p.name)
    embeddings.sort(key=lambda e: (e.patient, e.scan, e.pose_index))
    save_embeddings(embeddings, args.out)
    print(f"embedded {len(embeddings)}/{len(files)} images -> {args.out}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_sample(args) -> int:
    embeddings = load_embeddings(args.embeddings)
    refs = [e.ref for e in embeddings]
    groups = make_subgroups(refs, args.group_size,
                            shuffle_across_scans=not args.within_scan, seed=args.seed)
    batches = make_batches(groups, args.label_count, seed=args.seed)
    save_batches(batches, args.out)

    by_ref = {e.ref: e.vector for e in embeddings}
    loss_fn = triplet_loss_hinge if args.loss == "hinge" else triplet_loss_paper
    import numpy as np
    losses = []
    for batch in batches:
        vecs = np.stack([by_ref[m] for m in batch.members])
        for a, p, n in mine_triplets(batch, vecs, mode="batch-hard"):
            losses.append(loss_fn(vecs[a], vecs[p], vecs[n], args.margin))
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    print(f"{len(batches)} batches of {args.group_size}x{args.label_count} "
          f"-> {args.out}; mean batch-hard {args.loss} loss {mean_loss:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    embeddings = load_embeddings(args.embeddings)
    report, curves = evaluate_embeddings(embeddings, args.folds, args.seed,
                                         args.impostor_ratio)
    from . import report as report_io
    report_io.write_report_tree(report, curves, args.out)
    m, s = report.mean, report.std
    print(f"ACC {m.acc:.4f} (±{s[0]:.4f})  VACC {m.vacc:.4f} (±{s[1]:.4f})  "
          f"AUC {m.auc:.4f} (±{s[2]:.4f})  [{len(report.folds)} folds]")
    print(f"report written to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from . import report as report_io
    reports = [report_io.load_report_csv(p) for p in args.reports]
    names = args.names.split(",") if args.names else None
    rows = compare_stages(reports, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_io.save_stage_comparison_csv(rows, out / "stage_comparison.csv")
    report_io.plot_stage_comparison(rows, out / "stage_comparison.svg")
    for r in rows:
        print(f"{r.stage}: ACC {r.mean_acc:.4f} ({r.delta_acc:+.4f})  "
              f"VACC {r.mean_vacc:.4f} ({r.delta_vacc:+.4f})  "
              f"AUC {r.mean_auc:.4f} ({r.delta_auc:+.4f})")
    return EXIT_OK


def cmd_run_all(args) -> int:
    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = _collect_overrides(args, _RENDER_KEYS)
    overrides.update({
        "spacing": args.spacing, "stage": args.stage, "theta_norm": args.theta_norm,
        "folds": args.folds, "seed": args.seed, "impostor_ratio": args.impostor_ratio,
        "workers": args.workers, "keep_stages": args.keep_stages or None,
        "crop_size": args.crop,
    })
    config = apply_overrides(config, overrides)

    if args.manifest:
        manifest = load_manifest(args.manifest)
    else:
        cohort_dir = Path(args.out) / "cohort"
        manifest = generate_cohort(args.subjects, args.scans, config.seed,
                                   cohort_dir, noise_std=args.noise_std)
        print(f"generated {len(manifest.entries)}-scan phantom cohort under {cohort_dir}")

    result = run_pipeline(config, manifest, args.out)
    m, s = result.report.mean, result.report.std
    print(f"{result.n_images} depth images embedded at stage '{config.stage}'")
    print(f"ACC {m.acc:.4f} (±{s[0]:.4f})  VACC {m.vacc:.4f} (±{s[1]:.4f})  "
          f"AUC {m.auc:.4f} (±{s[2]:.4f})  [{config.folds} folds]")
    print(f"outputs under {args.out}")
    if result.failures:
        print(f"{len(result.failures)} scan(s) failed:", file=sys.stderr)
        for msg in result.failures:
            print(f"  {msg}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctface",
                                 description="CT face depth-image pipeline and evaluation")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", help="generate a synthetic head cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--scans", type=int, default=2)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--noise-std", type=float, default=12.0)
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("preprocess", help="resample, locate landmarks, crop face ROI")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--margin-factor", type=float, default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("render", help="iso-surface + pose-swept depth images")
    p.add_argument("--manifest", required=True, help="ROI manifest from preprocess")
    p.add_argument("--out", required=True)
    _add_render_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("segment", help="apply the baseline face mask")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("normalize", help="depth-value normalization")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--theta-norm", default="auto")
    p.add_argument("--scale-c", type=float, default=255.0)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("embed", help="crop + baseline-embed depth images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crop", type=int, default=224)
    p.add_argument("--crop-mode", choices=("center", "random"), default="center",
                   help="random crop is the training-side augmentation")
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("sample", help="group-sampled batch manifests + loss summary")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--group-size", type=int, default=15, help="E, images per subgroup")
    p.add_argument("--label-count", type=int, default=18, help="L, identities per batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--loss", choices=("hinge", "paper"), default="hinge")
    p.add_argument("--within-scan", action="store_true",
                   help="do not mix scans inside a subgroup")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="k-fold identification + verification")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--impostor-ratio", type=float, default=1.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="compare stage reports")
    p.add_argument("reports", nargs="+", help="report.csv files in stage order")
    p.add_argument("--out", required=True)
    p.add_argument("--names", default=None, help="comma-separated stage names")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-all", help="full pipeline: cohort to evaluation report")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--manifest", default=None, help="existing cohort manifest")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--scans", type=int, default=2)
    p.add_argument("--noise-std", type=float, default=12.0)
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--stage", choices=("projected", "segmented", "final"), default=None)
    p.add_argument("--theta-norm", default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--impostor-ratio", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--keep-stages", action="store_true")
    _add_render_flags(p)
    p.set_defaults(func=cmd_run_all)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
