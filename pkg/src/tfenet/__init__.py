"""Direction-aware linear convolutions for 3D tube segmentation.

Pure-numpy encoder-decoder with hand-written gradients, deformable
line-kernel convolutions steered by per-voxel angles, class-imbalance
losses, tree-topology metrics with their own skeletonizer, a synthetic
tubular phantom generator, and a two-stage trainer, all behind one CLI.
"""

__version__ = "0.1.0"

from .errors import (ArgumentError, ConfigError, TfeNetError,
                     TrainingDiverged, VolumeFormatError)
from .geometry import Angles, Axis, KernelSpec, rotated_offsets, sampling_positions
from .volume import Volume, read_volume, write_volume
from .model import TfeNet, TfeNetConfig
from .params import ParamStore, SGD, load_checkpoint, save_checkpoint
from .losses import (GulParams, LibParams, TverskyParams, foreground_ratio,
                     gul_loss, lib_weight, tversky_loss)
from .skeleton import SkeletonGraph, skeletonize
from .metrics import (ConfusionCounts, MetricsReport, branch_detected,
                      composite_scores, confusion, dsc, evaluate_pair, iou,
                      leakage, precision, tree_length_detected)
from .phantom import TreeSpec, corpus, generate_tree
from .train import (StageConfig, TrainCase, load_corpus, preprocess_case,
                    run_two_stage, sample_patch, train_stage)
from .infer import (InferenceConfig, fuse_two_stage, load_model, postprocess,
                    predict_mask, sliding_window_predict)
from .gradcheck import GradCheckResult, run_all

__all__ = [name for name in dir() if not name.startswith("_")]
