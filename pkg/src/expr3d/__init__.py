"""Facial expression coefficients from images and landmarks.

The package models a face as a linear combination of identity and expression
basis shapes, fits the expression coefficients to 2D landmarks under a
pinhole camera with box constraints, trains a small pixel-to-coefficient
regressor as a faster alternative, and evaluates both routes with a
leave-one-clip-out emotion classification harness.
"""

__version__ = "0.1.0"

from .datagen import (EMOTION_CLASSES, EmotionPrototypeSet, PoseRanges,
                      SyntheticSubject, default_intrinsics, generate_labels,
                      make_emotion_clips, make_emotion_prototypes,
                      pool_shape_coefficients, render_frame, sample_frames)
from .dataset import (Clip, ClipDataset, FrameRecord, load_dataset, save_dataset,
                      scale_frame)
from .errors import (ContractError, Expr3dError, FormatError, FormatVersionError,
                     GeometryError, SolverError, ValidationError)
from .evaluate import (ConfusionMatrix, ExtractionStrategy, ScaleSweepResult,
                       clip_feature, confusion_to_rates, downscale_image,
                       ground_truth_strategy, knn_classify, landmark_fit_strategy,
                       leave_one_clip_out, regressor_strategy, scale_sweep)
from .fitter import FitResult, FitterConfig, batch_fit, fit_expression, residual_norm
from .model import (MorphableModel, landmark_positions, landmark_shape, load_model,
                    make_synthetic_model, save_model, synthesize)
from .projection import (CameraIntrinsics, Pose6DoF, landmark_jacobian, project,
                         project_landmarks, projection_matrix, rotation_matrix)
from .regressor import (RegressorNet, TrainConfig, build_default_net, forward,
                        load_checkpoint, loss_and_gradient, predict_dataset,
                        preprocess, save_checkpoint, train)

__all__ = [
    "__version__",
    "Expr3dError", "ContractError", "ValidationError", "GeometryError",
    "SolverError", "FormatError", "FormatVersionError",
    "MorphableModel", "synthesize", "landmark_positions", "landmark_shape",
    "make_synthetic_model", "save_model", "load_model",
    "Pose6DoF", "CameraIntrinsics", "rotation_matrix", "projection_matrix",
    "project", "project_landmarks", "landmark_jacobian",
    "FitterConfig", "FitResult", "fit_expression", "batch_fit", "residual_norm",
    "FrameRecord", "Clip", "ClipDataset", "save_dataset", "load_dataset",
    "scale_frame",
    "EMOTION_CLASSES", "PoseRanges", "SyntheticSubject", "EmotionPrototypeSet",
    "default_intrinsics", "render_frame", "sample_frames", "generate_labels",
    "pool_shape_coefficients", "make_emotion_prototypes", "make_emotion_clips",
    "RegressorNet", "TrainConfig", "build_default_net", "forward", "preprocess",
    "loss_and_gradient", "train", "predict_dataset", "save_checkpoint",
    "load_checkpoint",
    "ConfusionMatrix", "ExtractionStrategy", "ScaleSweepResult", "clip_feature",
    "confusion_to_rates", "downscale_image", "knn_classify", "leave_one_clip_out",
    "ground_truth_strategy", "landmark_fit_strategy", "regressor_strategy",
    "scale_sweep",
]
