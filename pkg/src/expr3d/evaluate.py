"""Emotion classification protocol and the scale-robustness sweep.

Clips collapse to one feature vector each (mean of per-frame expression
coefficients, or the last frame under the "peak" protocol).  A
nearest-neighbor vote over those features gives the label; accuracy is
measured leave-one-clip-out.  The sweep repeats that evaluation while
shrinking the frames, once per coefficient-extraction strategy, to show
how each method degrades with resolution.

Tie handling is pinned down so results are reproducible: equal
distances rank by training order (stable sort), and a tied vote falls
to the class of the nearest neighbor among the tied classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import ClipDataset, FrameRecord, scale_frame
from .errors import ContractError, ValidationError
from .fitter import FitterConfig, fit_expression
from .images import resize_bilinear
from .model import MorphableModel
from .projection import projection_matrix
from .util import derived_rng

DEFAULT_SCALES = (1.0, 0.8, 0.6, 0.4, 0.2)
DEFAULT_K = 5
DETECTOR_NOISE_SIGMA0 = 0.5  # pixels at full resolution


def clip_feature(etas, protocol: str = "pooled") -> np.ndarray:
    """Collapse a (k, m) stack of per-frame coefficients to one vector."""
    arr = np.asarray(etas, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError("need a non-empty (k, m) stack of coefficient rows")
    if protocol == "pooled":
        return arr.mean(axis=0)
    if protocol == "peak":
        return arr[-1].copy()
    raise ValidationError(f"unknown protocol {protocol!r}")


def knn_classify(train_features: np.ndarray, train_labels, query: np.ndarray,
                 k: int = DEFAULT_K) -> str:
    """Majority vote over the k nearest training rows (Euclidean).

    Equal distances rank by training index; a tied vote resolves to the
    class of the nearest neighbor carrying one of the tied labels.
    """
    feats = np.asarray(train_features, dtype=np.float64)
    labels = list(train_labels)
    if feats.ndim != 2 or feats.shape[0] != len(labels):
        raise ContractError("train_features rows must match train_labels")
    if feats.shape[0] == 0:
        raise ValidationError("empty training set")
    if not (1 <= k <= feats.shape[0]):
        raise ContractError(f"k must be in [1, {feats.shape[0]}], got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != feats.shape[1]:
        raise ContractError("query dimension does not match training features")

    dist = np.sqrt(((feats - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:k]
    votes: dict[str, int] = {}
    for idx in order:
        lab = labels[idx]
        votes[lab] = votes.get(lab, 0) + 1
    top = max(votes.values())
    tied = {lab for lab, c in votes.items() if c == top}
    if len(tied) == 1:
        return tied.pop()
    for idx in order:  # nearest neighbor among the tied classes decides
        if labels[idx] in tied:
            return labels[idx]
    raise AssertionError("unreachable: tied classes came from the neighbor list")


@dataclass(frozen=True)
class ConfusionMatrix:
    """Row = true class, column = predicted class, entries are counts."""

    classes: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        c = len(self.classes)
        if counts.shape != (c, c):
            raise ContractError(f"counts must be ({c}, {c}), got {counts.shape}")
        if np.any(counts < 0):
            raise ValidationError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        if total == 0:
            return 0.0
        return float(np.trace(self.counts) / total)


def confusion_to_rates(cm: ConfusionMatrix) -> np.ndarray:
    """Row-normalize counts to rates; rows with no samples stay zero."""
    counts = cm.counts.astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    rates = np.zeros_like(counts)
    np.divide(counts, sums, out=rates, where=sums > 0)
    return rates


def leave_one_clip_out(ids, labels, features, k: int = DEFAULT_K,
                       classes: tuple[str, ...] | None = None):
    """Hold out each clip in turn and classify it against the rest.

    Clips are processed in sorted-id order, which makes the result
    independent of input ordering.  ``k`` is capped at the size of each
    round's training set.  Returns (accuracy, ConfusionMatrix).
    """
    ids = list(ids)
    labels = list(labels)
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    if not (len(ids) == len(labels) == len(feats)):
        raise ContractError("ids, labels and features must have equal length")
    if len(ids) < 2:
        raise ValidationError("need at least two clips for leave-one-clip-out")
    if len(set(ids)) != len(ids):
        raise ValidationError("clip ids must be unique")
    if k < 1:
        raise ContractError(f"k must be positive, got {k}")
    if classes is None:
        classes = tuple(sorted(set(labels)))
    unknown = set(labels) - set(classes)
    if unknown:
        raise ValidationError(f"labels {sorted(unknown)} not in class set {classes}")

    order = sorted(range(len(ids)), key=lambda i: ids[i])
    ids = [ids[i] for i in order]
    labels = [labels[i] for i in order]
    feats = np.stack([feats[i] for i in order])

    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for held in range(len(ids)):
        mask = np.ones(len(ids), dtype=bool)
        mask[held] = False
        train_feats = feats[mask]
        train_labels = [lab for i, lab in enumerate(labels) if i != held]
        k_round = min(k, train_feats.shape[0])
        pred = knn_classify(train_feats, train_labels, feats[held], k_round)
        counts[index[labels[held]], index[pred]] += 1
    cm = ConfusionMatrix(tuple(classes), counts)
    return cm.accuracy, cm


def downscale_image(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear downscale by ``factor`` in (0, 1]; factor 1.0 copies exactly."""
    if not (0.0 < factor <= 1.0):
        raise ValidationError(f"scale factor must be in (0, 1], got {factor}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ContractError(f"image must be 2-d, got shape {img.shape}")
    out_h = max(1, int(round(img.shape[0] * factor)))
    out_w = max(1, int(round(img.shape[1] * factor)))
    return resize_bilinear(img, out_h, out_w)


@dataclass(frozen=True)
class ExtractionStrategy:
    """A named way to turn one frame into expression coefficients.

    ``extract(frame, scale, rng)`` returns an (m,) vector or raises;
    raising marks the frame as skipped for that strategy.  ``scale`` is
    the resolution factor the frame was shrunk by (1.0 = native).
    """

    name: str
    extract: Callable[[FrameRecord, float, np.random.Generator], np.ndarray]


def ground_truth_strategy() -> ExtractionStrategy:
    def extract(frame: FrameRecord, scale, rng) -> np.ndarray:
        if frame.eta_true is None:
            raise ValidationError(f"frame {frame.frame_id!r} has no ground truth")
        return frame.eta_true
    return ExtractionStrategy("ground_truth", extract)


def landmark_fit_strategy(model: MorphableModel,
                          config: FitterConfig = FitterConfig(),
                          noise_sigma0: float = DETECTOR_NOISE_SIGMA0,
                          ) -> ExtractionStrategy:
    """Re-detect landmarks at the frame's scale, then run the solver.

    Detector error grows as the image shrinks: a frame at resolution
    factor f gets landmark noise of noise_sigma0 / f pixels (in the
    scaled image), drawn from the per-frame generator.  The frame's
    identity estimate is used when present, zeros otherwise.
    """
    def extract(frame: FrameRecord, scale, rng) -> np.ndarray:
        landmarks = frame.landmarks
        if noise_sigma0 > 0.0:
            landmarks = landmarks + rng.normal(
                0.0, noise_sigma0 / scale, landmarks.shape)
        alpha = frame.alpha_est
        if alpha is None:
            alpha = np.zeros(model.shape_dim)
        pi = projection_matrix(frame.pose, frame.intrinsics)
        return fit_expression(model, alpha, pi, landmarks, config).eta
    return ExtractionStrategy("landmark_fit", extract)


def regressor_strategy(net) -> ExtractionStrategy:
    """Crop around the frame's bbox and run the trained network."""
    from .regressor import forward, preprocess

    def extract(frame: FrameRecord, scale, rng) -> np.ndarray:
        if frame.image is None:
            raise ValidationError(f"frame {frame.frame_id!r} has no image")
        raster = preprocess(frame.image, frame.bbox, net.input_side,
                            net.dataset_mean)
        return forward(net, raster)
    return ExtractionStrategy("regressor", extract)


@dataclass(frozen=True)
class ScaleSweepResult:
    """Accuracy per (strategy, scale) plus how many frames each skipped."""

    scales: tuple[float, ...]
    methods: tuple[str, ...]
    accuracy: np.ndarray  # (n_methods, n_scales)
    skipped_frames: np.ndarray  # (n_methods, n_scales) ints

    def __post_init__(self):
        acc = np.asarray(self.accuracy, dtype=np.float64)
        if np.any(acc < 0.0) or np.any(acc > 1.0):
            raise ValidationError("accuracies must lie in [0, 1]")
        object.__setattr__(self, "accuracy", acc)
        object.__setattr__(self, "skipped_frames",
                           np.asarray(self.skipped_frames, dtype=np.int64))

    def accuracy_for(self, method: str) -> np.ndarray:
        return self.accuracy[self.methods.index(method)]


def scale_sweep(dataset: ClipDataset, strategies, scales=DEFAULT_SCALES,
                k: int = DEFAULT_K, seed: int = 0) -> ScaleSweepResult:
    """Evaluate every strategy at every scale with leave-one-clip-out.

    Scales are sorted descending and must start at 1.0 so each curve
    has a full-resolution baseline.  Noise draws are derived per
    (scale, clip, frame), shared across strategies, so adding a method
    never changes another method's numbers.
    """
    scales = tuple(sorted((float(s) for s in scales), reverse=True))
    if not scales or scales[0] != 1.0:
        raise ValidationError("scales must include 1.0 as the baseline")
    if len(set(scales)) != len(scales):
        raise ValidationError("scales must be distinct")
    if any(s <= 0.0 for s in scales):
        raise ValidationError("scales must be positive")
    strategies = list(strategies)
    if not strategies:
        raise ValidationError("need at least one extraction strategy")
    names = [st.name for st in strategies]
    if len(set(names)) != len(names):
        raise ValidationError("strategy names must be unique")
    labeled = [clip for clip in dataset.clips if clip.emotion]
    if len(labeled) < 2:
        raise ValidationError("need at least two labeled clips")

    accuracy = np.zeros((len(strategies), len(scales)))
    skipped = np.zeros((len(strategies), len(scales)), dtype=np.int64)
    for si, scale in enumerate(scales):
        scaled_clips = [[scale_frame(fr, scale) for fr in clip.frames]
                        for clip in labeled]
        for mi, strat in enumerate(strategies):
            ids, labels, features = [], [], []
            for ci, (clip, scaled) in enumerate(zip(labeled, scaled_clips)):
                etas = []
                for fi, frame in enumerate(scaled):
                    # Fresh generator per frame, same derivation for every
                    # strategy: methods see identical noise realizations and
                    # cannot perturb each other's streams.
                    rng = derived_rng(seed, si, ci, fi)
                    try:
                        etas.append(strat.extract(frame, scale, rng))
                    except Exception:  # noqa: BLE001 - any failure is a skip
                        skipped[mi, si] += 1
                if not etas:
                    raise ValidationError(
                        f"strategy {strat.name!r} skipped every frame of clip "
                        f"{clip.clip_id!r} at scale {scale}")
                ids.append(clip.clip_id)
                labels.append(clip.emotion)
                features.append(clip_feature(etas, dataset.protocol))
            acc, _ = leave_one_clip_out(ids, labels, features, k,
                                        classes=dataset.classes)
            accuracy[mi, si] = acc
    return ScaleSweepResult(scales, tuple(names), accuracy, skipped)
