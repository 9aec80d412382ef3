"""Synthetic frame and clip generation.

Frames are rendered by splatting every model vertex as a small Gaussian
blob onto a square canvas, depth-shaded so nearer vertices are
brighter.  The result is a float raster in [0, 1]; quantization to 8
bits happens only when a frame is saved to disk.

All sampling is driven by per-item generators derived from one base
seed, so output is independent of generation order and thread count.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import Clip, ClipDataset, FrameRecord
from .errors import GeometryError, ValidationError
from .fitter import FitterConfig, fit_expression
from .model import MorphableModel, synthesize
from .projection import CameraIntrinsics, Pose6DoF, projection_matrix
from .util import derive_seed, derived_rng

log = logging.getLogger(__name__)

EMOTION_CLASSES = ("anger", "contempt", "disgust", "fear",
                   "happy", "sadness", "surprise")

SPLAT_SIGMA = 1.5
SPLAT_RADIUS = 6  # pixels either side of the blob center
SHADE_FLOOR = 0.3  # brightness of the farthest vertex


@dataclass(frozen=True)
class PoseRanges:
    """Uniform sampling bounds for each pose component.

    Angles are radians; translations are model units.  The defaults
    keep a default synthetic face fully inside its frame at the default
    focal length (1.5x the image side).
    """

    pitch: tuple[float, float] = (-0.15, 0.15)
    yaw: tuple[float, float] = (-0.25, 0.25)
    roll: tuple[float, float] = (-0.10, 0.10)
    tx: tuple[float, float] = (-8.0, 8.0)
    ty: tuple[float, float] = (-8.0, 8.0)
    tz: tuple[float, float] = (340.0, 420.0)

    def draw(self, rng: np.random.Generator) -> Pose6DoF:
        # Draw order is part of the format: rotation triple, then translation.
        lo = [self.pitch[0], self.yaw[0], self.roll[0], self.tx[0], self.ty[0], self.tz[0]]
        hi = [self.pitch[1], self.yaw[1], self.roll[1], self.tx[1], self.ty[1], self.tz[1]]
        vals = rng.uniform(lo, hi)
        return Pose6DoF(vals[:3], vals[3:])


@dataclass
class SyntheticSubject:
    subject_id: str
    alpha_true: np.ndarray
    alpha_estimates: list[np.ndarray] = field(default_factory=list)


def default_intrinsics(image_size: int) -> CameraIntrinsics:
    return CameraIntrinsics(1.5 * image_size,
                            np.array([image_size / 2.0, image_size / 2.0]))


def render_frame(model: MorphableModel, alpha, eta, pose: Pose6DoF,
                 intrinsics: CameraIntrinsics, image_size: int) -> np.ndarray:
    """Render one frame as an (image_size, image_size) float raster in [0, 1]."""
    raster, _ = _render_with_uv(model, alpha, eta, pose, intrinsics, image_size)
    return raster


def _render_with_uv(model, alpha, eta, pose, intrinsics, image_size):
    """Splat rendering plus the projected vertex positions it used."""
    pts = synthesize(model, alpha, eta).reshape(-1, 3)
    pi = projection_matrix(pose, intrinsics)
    h = pts @ pi[:, :3].T + pi[:, 3]
    depth = h[:, 2]
    bad = np.flatnonzero(depth <= 1e-6)
    if bad.size:
        raise GeometryError("vertex behind camera during rendering",
                            point_index=int(bad[0]))
    uv = h[:, :2] / depth[:, None]

    # Near = bright: map depth linearly onto [SHADE_FLOOR, 1].
    zmin, zmax = depth.min(), depth.max()
    if zmax > zmin:
        weight = SHADE_FLOOR + (1.0 - SHADE_FLOOR) * (zmax - depth) / (zmax - zmin)
    else:
        weight = np.ones_like(depth)

    canvas = np.zeros((image_size, image_size))
    r = SPLAT_RADIUS
    inv = 1.0 / (2.0 * SPLAT_SIGMA ** 2)
    for (cx, cy), w in zip(uv, weight):
        x0 = int(np.floor(cx)) - r
        y0 = int(np.floor(cy)) - r
        xa, xb = max(x0, 0), min(x0 + 2 * r + 1, image_size)
        ya, yb = max(y0, 0), min(y0 + 2 * r + 1, image_size)
        if xa >= xb or ya >= yb:
            continue
        gx = np.exp(-((np.arange(xa, xb) - cx) ** 2) * inv)
        gy = np.exp(-((np.arange(ya, yb) - cy) ** 2) * inv)
        canvas[ya:yb, xa:xb] += w * np.outer(gy, gx)

    peak = canvas.max()
    if peak > 0.0:
        canvas /= peak
    return canvas, uv


def _bbox_from_points(uv: np.ndarray) -> tuple[float, float, float, float]:
    x0, y0 = uv.min(axis=0)
    x1, y1 = uv.max(axis=0)
    return (float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def _build_frame(model, frame_id, subject_id, alpha_true, eta, pose, intrinsics,
                 image_size, landmark_noise_sigma, alpha_noise_sigma, rng,
                 render: bool = True) -> FrameRecord:
    """Assemble one frame; noise draws come from ``rng`` in a fixed order."""
    pi = projection_matrix(pose, intrinsics)
    lm_shape = (model.lm_mean + model.lm_shape_basis @ np.asarray(alpha_true)
                + model.lm_expr_basis @ np.asarray(eta)).reshape(-1, 3)
    h = lm_shape @ pi[:, :3].T + pi[:, 3]
    if np.any(h[:, 2] <= 1e-6):
        raise GeometryError(f"frame {frame_id!r}: landmark behind camera")
    lm_true = h[:, :2] / h[:, 2:3]
    if (lm_true.min() < 0.0) or (lm_true.max() > image_size - 1.0):
        raise ValidationError(
            f"frame {frame_id!r}: noiseless landmarks fall outside the "
            f"{image_size}px image; shrink the pose ranges or enlarge the image")
    landmarks = lm_true
    if landmark_noise_sigma > 0.0:
        landmarks = lm_true + rng.normal(0.0, landmark_noise_sigma, lm_true.shape)
    alpha_est = np.asarray(alpha_true, dtype=np.float64) \
        + alpha_noise_sigma * rng.standard_normal(model.shape_dim)
    if render:
        image, uv = _render_with_uv(model, alpha_true, eta, pose, intrinsics, image_size)
        bbox = _bbox_from_points(uv)
    else:
        image = None
        bbox = _bbox_from_points(lm_true)
    return FrameRecord(frame_id, subject_id, landmarks, pose, intrinsics, bbox,
                       image=image, eta_true=np.asarray(eta, dtype=np.float64).copy(),
                       alpha_est=alpha_est)


def sample_frames(model: MorphableModel, n_subjects: int, frames_per_subject: int,
                  pose_ranges: PoseRanges = PoseRanges(), *, image_size: int = 64,
                  landmark_noise_sigma: float = 0.0, alpha_sigma: float = 1.0,
                  alpha_noise_sigma: float = 0.05, eta_box_fraction: float = 0.9,
                  seed: int = 0, render: bool = True) -> list[FrameRecord]:
    """Draw subjects and render independent expression frames for each.

    Expression coefficients are uniform inside ``eta_box_fraction`` of
    the coefficient box.  Returns a flat frame list; subject structure
    is recoverable from subject_id.  Zero subjects or zero frames per
    subject yields an empty list.
    """
    if n_subjects < 0 or frames_per_subject < 0:
        raise ValidationError("subject and frame counts must be non-negative")
    intr = default_intrinsics(image_size)
    bound = eta_box_fraction * 3.0 * model.expr_stddev
    frames = []
    for si in range(n_subjects):
        srng = derived_rng(seed, 0, si)
        subject = SyntheticSubject(f"s{si:03d}",
                                   alpha_sigma * srng.standard_normal(model.shape_dim))
        for k in range(frames_per_subject):
            rng = derived_rng(seed, 1, si * frames_per_subject + k)
            pose = pose_ranges.draw(rng)
            eta = rng.uniform(-1.0, 1.0, model.expr_dim) * bound
            fr = _build_frame(model, f"{subject.subject_id}_f{k:03d}",
                              subject.subject_id, subject.alpha_true, eta, pose,
                              intr, image_size, landmark_noise_sigma,
                              alpha_noise_sigma, rng, render=render)
            subject.alpha_estimates.append(fr.alpha_est)
            frames.append(fr)
    return frames


def pool_shape_coefficients(alphas) -> np.ndarray:
    """Average per-frame identity estimates into one vector."""
    arr = np.asarray(alphas, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValidationError("need a non-empty (k, s) stack of coefficient rows")
    return arr.mean(axis=0)


def generate_labels(model: MorphableModel, frames: list[FrameRecord],
                    config: FitterConfig = FitterConfig()):
    """Fit expression coefficients for every frame, pooling identity per subject.

    Returns (labels, skipped): labels is a list of (frame_id, eta)
    in input order, skipped a list of (frame_id, reason) for frames
    whose fit raised.  Frames lacking alpha_est fall back to the pooled
    estimate of their subject, or to zeros if the subject has none.
    """
    by_subject: dict[str, list[np.ndarray]] = {}
    for fr in frames:
        if fr.alpha_est is not None:
            by_subject.setdefault(fr.subject_id, []).append(fr.alpha_est)
    pooled = {sid: pool_shape_coefficients(stack) for sid, stack in by_subject.items()}
    zeros = np.zeros(model.shape_dim)

    labels = []
    skipped = []
    for fr in frames:
        alpha = pooled.get(fr.subject_id, zeros)
        pi = projection_matrix(fr.pose, fr.intrinsics)
        try:
            result = fit_expression(model, alpha, pi, fr.landmarks, config)
        except Exception as exc:  # noqa: BLE001 - every per-frame failure becomes a skip
            skipped.append((fr.frame_id, f"{type(exc).__name__}: {exc}"))
            continue
        labels.append((fr.frame_id, result.eta))
    return labels, skipped


@dataclass(frozen=True)
class EmotionPrototypeSet:
    """Anchor coefficients per emotion plus the spread knobs around them."""

    classes: tuple[str, ...]
    anchors: np.ndarray  # (n_classes, m)
    sigma_class: float
    sigma_jitter: float


def make_emotion_prototypes(model: MorphableModel, seed: int,
                            sigma_class: float | None = None,
                            sigma_jitter: float | None = None,
                            box_fraction: float = 0.6) -> EmotionPrototypeSet:
    """Place one anchor per emotion inside a fraction of the coefficient box.

    The default within-class spread is min-pairwise-distance / (6 *
    sqrt(2m)), which keeps the expected distance between same-class
    samples well under the anchor separation even in high dimension.
    """
    rng = np.random.default_rng(derive_seed(seed, "emotion-anchors"))
    bound = box_fraction * 3.0 * model.expr_stddev
    anchors = rng.uniform(-1.0, 1.0, (len(EMOTION_CLASSES), model.expr_dim)) * bound
    diffs = anchors[:, None, :] - anchors[None, :, :]
    dist = np.sqrt((diffs ** 2).sum(axis=2))
    d_min = dist[np.triu_indices(len(EMOTION_CLASSES), k=1)].min()
    if sigma_class is None:
        sigma_class = float(d_min / (6.0 * np.sqrt(2.0 * model.expr_dim)))
    if sigma_jitter is None:
        sigma_jitter = sigma_class
    if sigma_class > 0.0 and d_min <= 4.0 * sigma_class:
        log.warning("emotion anchors only %.3g apart at sigma_class %.3g; "
                    "classes may overlap", d_min, sigma_class)
    return EmotionPrototypeSet(EMOTION_CLASSES, anchors,
                               float(sigma_class), float(sigma_jitter))


def make_emotion_clips(model: MorphableModel, prototypes: EmotionPrototypeSet,
                       clips_per_class: int, frames_per_clip: int,
                       pose_ranges: PoseRanges = PoseRanges(), *,
                       image_size: int = 64, landmark_noise_sigma: float = 0.0,
                       alpha_sigma: float = 1.0, alpha_noise_sigma: float = 0.05,
                       seed: int = 0, protocol: str = "pooled",
                       render: bool = True) -> ClipDataset:
    """Generate labeled clips around the emotion anchors.

    Each clip gets a fresh subject and one class-level offset; each
    frame adds independent jitter.  Coefficients are clamped to the
    model's 3-sigma box, so samples always lie in the fittable domain.
    """
    if clips_per_class < 1 or frames_per_clip < 1:
        raise ValidationError("need at least one clip per class and one frame per clip")
    intr = default_intrinsics(image_size)
    lo, hi = -3.0 * model.expr_stddev, 3.0 * model.expr_stddev
    clips = []
    for ci, emotion in enumerate(prototypes.classes):
        anchor = prototypes.anchors[ci]
        for k in range(clips_per_class):
            clip_index = ci * clips_per_class + k
            crng = derived_rng(seed, 2, clip_index)
            alpha_true = alpha_sigma * crng.standard_normal(model.shape_dim)
            offset = prototypes.sigma_class * crng.standard_normal(model.expr_dim)
            clip_id = f"{emotion}_{k:03d}"
            frames = []
            for fi in range(frames_per_clip):
                frng = derived_rng(seed, 3, clip_index, fi)
                pose = pose_ranges.draw(frng)
                jitter = prototypes.sigma_jitter * frng.standard_normal(model.expr_dim)
                eta = np.clip(anchor + offset + jitter, lo, hi)
                frames.append(_build_frame(
                    model, f"{clip_id}_f{fi:03d}", f"c{clip_index:03d}",
                    alpha_true, eta, pose, intr, image_size,
                    landmark_noise_sigma, alpha_noise_sigma, frng, render=render))
            clips.append(Clip(clip_id, emotion, frames))
    return ClipDataset(clips, prototypes.classes, protocol)
