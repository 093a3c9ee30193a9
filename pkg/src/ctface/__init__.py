"""ctface: 3D CT head volumes to aligned 2D face depth images, with biometric
identification/verification evaluation over pluggable embedders."""

from .volume import Volume, RoiBox, load_volume, save_volume, resample_spacing, crop_roi
from .landmarks import (LandmarkSet, HeatmapStack, HeatmapPredictor, encode_heatmaps,
                        decode_heatmaps, landmark_loss, oracle_predictor)
from .render import (SurfaceMesh, CameraPose, DepthImage, SweepConfig,
                     extract_isosurface, cull_by_normal, pose_camera, render_depth,
                     pose_sweep, save_depth_pgm, load_depth_pgm)
from .faceproc import (FaceMask, Histogram, baseline_face_mask, apply_mask,
                       depth_histogram, normalize_depth, suggest_threshold)
from .recognition import (Embedding, Subgroup, Batch, ImageRef, random_crop,
                          baseline_embed, triplet_loss_paper, triplet_loss_hinge,
                          make_subgroups, make_batches, mine_triplets)
from .evaluation import (GalleryProbeSplit, RocCurve, EvalReport, FoldMetrics,
                         gallery_probe_split, identify, make_pairs, roc,
                         split_per_class, kfold_subjects, aggregate)
from .phantom import PhantomSpec, generate_phantom, generate_cohort
from .pipeline import PipelineConfig, run_pipeline, compare_stages, evaluate_embeddings

__version__ = "0.1.0"
