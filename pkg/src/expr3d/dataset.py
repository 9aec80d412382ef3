"""Clip/frame containers and the on-disk dataset layout.

A dataset directory holds a ``manifest.json`` next to three sidecar
folders::

    manifest.json
    images/<frame_id>.pgm        rendered frame, 8-bit grayscale
    landmarks/<frame_id>.csv     one "x,y" row per landmark
    eta_true/<frame_id>.csv      single row of expression coefficients

The manifest carries everything else inline (pose, intrinsics, bbox,
per-frame shape-coefficient estimates, clip labels).  Frames without an
image or without ground-truth coefficients simply omit those keys.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, FormatError, FormatVersionError, ValidationError
from .images import load_pgm, save_pgm
from .projection import CameraIntrinsics, Pose6DoF
from .util import atomic_write_text, fmt_float

MANIFEST_FORMAT = "expr3d-dataset"
MANIFEST_VERSION = 1

PROTOCOLS = ("pooled", "peak")


@dataclass
class FrameRecord:
    """One observed frame: landmarks plus the camera that produced them.

    ``image`` is a float raster in [0, 1] or None when the frame exists
    only as geometry.  ``eta_true`` and ``alpha_est`` are optional
    ground truth / per-frame identity estimates.
    """

    frame_id: str
    subject_id: str
    landmarks: np.ndarray
    pose: Pose6DoF
    intrinsics: CameraIntrinsics
    bbox: tuple[float, float, float, float]
    image: np.ndarray | None = None
    eta_true: np.ndarray | None = None
    alpha_est: np.ndarray | None = None

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        if self.landmarks.ndim != 2 or self.landmarks.shape[1] != 2:
            raise ContractError(
                f"frame {self.frame_id!r}: landmarks must be (L, 2), got {self.landmarks.shape}")
        if not np.all(np.isfinite(self.landmarks)):
            raise ValidationError(f"frame {self.frame_id!r}: landmarks contain non-finite values")
        if len(self.bbox) != 4:
            raise ContractError(f"frame {self.frame_id!r}: bbox must have 4 entries")
        self.bbox = tuple(float(v) for v in self.bbox)
        if self.eta_true is not None:
            self.eta_true = np.asarray(self.eta_true, dtype=np.float64).reshape(-1)
        if self.alpha_est is not None:
            self.alpha_est = np.asarray(self.alpha_est, dtype=np.float64).reshape(-1)

    @property
    def n_landmarks(self) -> int:
        return self.landmarks.shape[0]


@dataclass
class Clip:
    """An ordered run of frames sharing one subject and one emotion label.

    Training-style material that carries no emotion uses the empty
    string as its label.
    """

    clip_id: str
    emotion: str
    frames: list[FrameRecord] = field(default_factory=list)

    def __post_init__(self):
        if not self.clip_id:
            raise ValidationError("clip_id must be non-empty")


@dataclass
class ClipDataset:
    """A set of clips plus the label vocabulary they draw from.

    ``protocol`` picks how a clip collapses to a single feature vector:
    "pooled" averages per-frame coefficients, "peak" takes the last
    frame.  Labels must be empty or members of ``classes``; evaluation
    functions additionally require at least two labeled clips.
    """

    clips: list[Clip]
    classes: tuple[str, ...] = ()
    protocol: str = "pooled"

    def __post_init__(self):
        self.classes = tuple(self.classes)
        if self.protocol not in PROTOCOLS:
            raise ValidationError(
                f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        seen_clips = set()
        seen_frames = set()
        for clip in self.clips:
            if clip.clip_id in seen_clips:
                raise ValidationError(f"duplicate clip_id {clip.clip_id!r}")
            seen_clips.add(clip.clip_id)
            if clip.emotion and clip.emotion not in self.classes:
                raise ValidationError(
                    f"clip {clip.clip_id!r} labeled {clip.emotion!r}, "
                    f"not in declared classes {self.classes}")
            for fr in clip.frames:
                if fr.frame_id in seen_frames:
                    raise ValidationError(f"duplicate frame_id {fr.frame_id!r}")
                seen_frames.add(fr.frame_id)

    @property
    def n_frames(self) -> int:
        return sum(len(c.frames) for c in self.clips)

    def all_frames(self) -> list[FrameRecord]:
        return [fr for clip in self.clips for fr in clip.frames]


def _write_row_csv(path: str, rows: np.ndarray):
    lines = [",".join(fmt_float(v) for v in row) for row in np.atleast_2d(rows)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_rows_csv(path: str) -> np.ndarray:
    with open(path, "r", encoding="ascii") as fh:
        rows = [[float(tok) for tok in line.split(",")]
                for line in fh.read().splitlines() if line.strip()]
    if not rows:
        raise FormatError(f"{path}: no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise FormatError(f"{path}: ragged rows")
    return np.array(rows, dtype=np.float64)


def save_dataset(ds: ClipDataset, out_dir: str):
    """Write ``ds`` under out_dir (created if needed) as manifest + sidecars."""
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "landmarks", "eta_true"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    clips_json = []
    for clip in ds.clips:
        frames_json = []
        for fr in clip.frames:
            lm_rel = f"landmarks/{fr.frame_id}.csv"
            _write_row_csv(os.path.join(out_dir, lm_rel), fr.landmarks)
            entry: dict = {
                "frame_id": fr.frame_id,
                "subject_id": fr.subject_id,
                "landmarks": lm_rel,
                "pose": {
                    "rotation": [float(v) for v in fr.pose.rotation],
                    "translation": [float(v) for v in fr.pose.translation],
                },
                "intrinsics": {
                    "focal": float(fr.intrinsics.focal),
                    "principal_point": [float(v) for v in fr.intrinsics.principal_point],
                },
                "bbox": list(fr.bbox),
            }
            if fr.image is not None:
                img_rel = f"images/{fr.frame_id}.pgm"
                save_pgm(os.path.join(out_dir, img_rel), fr.image)
                entry["image"] = img_rel
            if fr.eta_true is not None:
                eta_rel = f"eta_true/{fr.frame_id}.csv"
                _write_row_csv(os.path.join(out_dir, eta_rel), fr.eta_true[None, :])
                entry["eta_true"] = eta_rel
            if fr.alpha_est is not None:
                entry["alpha_est"] = [float(v) for v in fr.alpha_est]
            frames_json.append(entry)
        clips_json.append({
            "clip_id": clip.clip_id,
            "emotion": clip.emotion,
            "frames": frames_json,
        })

    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "protocol": ds.protocol,
        "classes": list(ds.classes),
        "clips": clips_json,
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"),
                      json.dumps(manifest, indent=2) + "\n")


def _frame_from_entry(entry: dict, base_dir: str, load_images: bool) -> FrameRecord:
    try:
        frame_id = entry["frame_id"]
        subject_id = entry["subject_id"]
        lm = _read_rows_csv(os.path.join(base_dir, entry["landmarks"]))
        pose = Pose6DoF(np.array(entry["pose"]["rotation"], dtype=np.float64),
                        np.array(entry["pose"]["translation"], dtype=np.float64))
        intr = CameraIntrinsics(float(entry["intrinsics"]["focal"]),
                                np.array(entry["intrinsics"]["principal_point"],
                                         dtype=np.float64))
        bbox = tuple(float(v) for v in entry["bbox"])
    except KeyError as exc:
        raise FormatError(f"frame entry missing key {exc}") from exc
    image = None
    if load_images and "image" in entry:
        image = load_pgm(os.path.join(base_dir, entry["image"]))
    eta_true = None
    if "eta_true" in entry:
        eta_true = _read_rows_csv(os.path.join(base_dir, entry["eta_true"]))[0]
    alpha_est = None
    if "alpha_est" in entry:
        alpha_est = np.array(entry["alpha_est"], dtype=np.float64)
    return FrameRecord(frame_id, subject_id, lm, pose, intr, bbox,
                       image=image, eta_true=eta_true, alpha_est=alpha_est)


def load_dataset(path: str, load_images: bool = True) -> ClipDataset:
    """Read a dataset written by save_dataset.

    ``path`` may point at the directory or at the manifest.json inside
    it.  Set load_images False to skip raster decoding when only the
    geometry is needed.
    """
    if os.path.isdir(path):
        manifest_path = os.path.join(path, "manifest.json")
    else:
        manifest_path = path
    base_dir = os.path.dirname(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{manifest_path}: unrecognized format tag "
                          f"{manifest.get('format')!r}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatVersionError(
            f"{manifest_path}: version {manifest.get('version')!r}, "
            f"expected {MANIFEST_VERSION}")
    try:
        clips = [Clip(c["clip_id"], c["emotion"],
                      [_frame_from_entry(e, base_dir, load_images) for e in c["frames"]])
                 for c in manifest["clips"]]
        return ClipDataset(clips, tuple(manifest["classes"]),
                           manifest.get("protocol", "pooled"))
    except KeyError as exc:
        raise FormatError(f"{manifest_path}: missing key {exc}") from exc


def scale_frame(frame: FrameRecord, factor: float) -> FrameRecord:
    """Geometry-consistent downscale of one frame by ``factor`` in (0, 1].

    The image is resampled to round(side * factor) per side; landmarks,
    bbox, focal length and principal point scale by the same factor, so
    the scaled landmarks still sit on the scaled image.  Pose and any
    coefficient annotations are unchanged.  factor == 1.0 returns an
    identical copy.
    """
    from .evaluate import downscale_image  # local import, avoids cycle

    if not (0.0 < factor <= 1.0):
        raise ValidationError(f"scale factor must be in (0, 1], got {factor}")
    image = None
    if frame.image is not None:
        image = downscale_image(frame.image, factor)
    intr = CameraIntrinsics(frame.intrinsics.focal * factor,
                            frame.intrinsics.principal_point * factor)
    x, y, w, h = frame.bbox
    return replace(frame,
                   landmarks=frame.landmarks * factor,
                   intrinsics=intr,
                   bbox=(x * factor, y * factor, w * factor, h * factor),
                   image=image)
