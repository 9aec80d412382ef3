"""Command-line toolkit.

Subcommands cover the whole pipeline: synthesize a model, generate
frame and clip datasets, produce coefficient labels, fit or predict
per-frame coefficients, evaluate emotion classification, run the
resolution sweep, and export meshes.

Conventions shared by every subcommand:

* relative output paths land under --out-dir (inputs resolve as given);
* a ``<command>-run.json`` manifest records the resolved arguments and
  tool versions, so a results directory is self-describing;
* wall-clock numbers go to separate ``*-timing.json`` files, never into
  data outputs, keeping the data byte-reproducible run to run;
* exit status is 0 on success, 1 for usage or input validation
  problems, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from .dataset import Clip, ClipDataset, load_dataset, save_dataset
from .datagen import (PoseRanges, generate_labels, make_emotion_clips,
                      make_emotion_prototypes, sample_frames)
from .errors import (ContractError, Expr3dError, FormatError, GeometryError,
                     SolverError, ValidationError)
from .evaluate import (clip_feature, ground_truth_strategy,
                       landmark_fit_strategy, leave_one_clip_out,
                       regressor_strategy, scale_sweep)
from .fitter import FitterConfig, batch_fit
from .model import load_model, make_synthetic_model, save_model
from .projection import projection_matrix
from .regressor import (TrainConfig, build_default_net, forward, load_checkpoint,
                        predict_dataset, preprocess, save_checkpoint, train,
                        write_history_csv)
from .util import atomic_write_json, atomic_write_text, fmt_float

log = logging.getLogger(__name__)

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class CliUsageError(Exception):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(f"{self.prog}: {message}")


def _out_path(args, path: str) -> str:
    if os.path.isabs(path):
        return path
    full = os.path.join(args.out_dir, path)
    parent = os.path.dirname(full)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return full


def _write_run_manifest(args, command: str):
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    for key, val in resolved.items():
        if isinstance(val, tuple):
            resolved[key] = list(val)
    manifest = {
        "command": command,
        "arguments": resolved,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
    }
    atomic_write_json(_out_path(args, f"{command}-run.json"), manifest)


def _write_timing(args, name: str, seconds):
    seconds = np.asarray(list(seconds), dtype=np.float64)
    payload = {
        "count": int(seconds.size),
        "total_seconds": float(seconds.sum()),
        "mean_seconds": float(seconds.mean()) if seconds.size else 0.0,
        "median_seconds": float(np.median(seconds)) if seconds.size else 0.0,
        "p95_seconds": float(np.percentile(seconds, 95)) if seconds.size else 0.0,
    }
    atomic_write_json(_out_path(args, name), payload)


def _eta_header(m: int, extra=()) -> str:
    return ",".join(["frame_id"] + [f"eta_{j}" for j in range(m)] + list(extra))


def _feature_rows_to_csv(rows, m: int, extra_cols=()) -> str:
    lines = [_eta_header(m, extra_cols)]
    for row in rows:
        lines.append(",".join([row[0]] + [fmt_float(v) for v in row[1]]
                              + [str(v) for v in row[2:]]))
    return "\n".join(lines) + "\n"


def read_feature_csv(path: str):
    """Read a frame_id -> coefficients mapping from a labels/fit/predict CSV."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = lines[0].split(",")
    eta_cols = [i for i, name in enumerate(header) if name.startswith("eta_")]
    if header[0] != "frame_id" or not eta_cols:
        raise FormatError(f"{path}: expected a frame_id,eta_* header")
    out = {}
    for ln in lines[1:]:
        toks = ln.split(",")
        if len(toks) != len(header):
            raise FormatError(f"{path}: row width does not match header")
        out[toks[0]] = np.array([float(toks[i]) for i in eta_cols])
    return out


def _add_pose_range_args(p: argparse.ArgumentParser):
    d = PoseRanges()
    for name, default in (("pitch", d.pitch), ("yaw", d.yaw), ("roll", d.roll),
                          ("tx", d.tx), ("ty", d.ty), ("tz", d.tz)):
        p.add_argument(f"--{name}-range", nargs=2, type=float, default=list(default),
                       metavar=("LO", "HI"), help=f"uniform {name} bounds")


def _pose_ranges_from(args) -> PoseRanges:
    return PoseRanges(pitch=tuple(args.pitch_range), yaw=tuple(args.yaw_range),
                      roll=tuple(args.roll_range), tx=tuple(args.tx_range),
                      ty=tuple(args.ty_range), tz=tuple(args.tz_range))


def _add_fitter_args(p: argparse.ArgumentParser):
    d = FitterConfig()
    p.add_argument("--max-iters", type=int, default=d.max_iters)
    p.add_argument("--damping", type=float, default=d.damping)
    p.add_argument("--step-tol", type=float, default=d.step_tol)
    p.add_argument("--residual-tol", type=float, default=d.residual_tol)


def _fitter_config_from(args) -> FitterConfig:
    return FitterConfig(max_iters=args.max_iters, damping=args.damping,
                        step_tol=args.step_tol, residual_tol=args.residual_tol)


# ---------------------------------------------------------------- commands


def cmd_synth_model(args) -> int:
    model = make_synthetic_model(args.n, args.s, args.m, args.landmarks,
                                 seed=args.seed, shape_scale=args.shape_scale,
                                 expr_scale=args.expr_scale, decay=args.decay)
    path = _out_path(args, args.output)
    save_model(model, path, fmt=args.format)
    log.info("wrote model with %d vertices to %s", model.n_vertices, path)
    _write_run_manifest(args, "synth-model")
    return 0


def cmd_gen_frames(args) -> int:
    model = load_model(args.model)
    frames = sample_frames(model, args.subjects, args.frames_per_subject,
                           _pose_ranges_from(args), image_size=args.image_size,
                           landmark_noise_sigma=args.landmark_noise,
                           alpha_sigma=args.alpha_sigma,
                           alpha_noise_sigma=args.alpha_noise,
                           eta_box_fraction=args.eta_box_fraction,
                           seed=args.seed, render=not args.no_render)
    by_subject: dict[str, list] = {}
    for fr in frames:
        by_subject.setdefault(fr.subject_id, []).append(fr)
    clips = [Clip(f"train_{sid}", "", frs) for sid, frs in by_subject.items()]
    ds = ClipDataset(clips)
    save_dataset(ds, _out_path(args, args.output))
    log.info("wrote %d frames over %d subjects", len(frames), len(clips))
    _write_run_manifest(args, "gen-frames")
    return 0


def cmd_gen_clips(args) -> int:
    model = load_model(args.model)
    protos = make_emotion_prototypes(model, seed=args.seed,
                                     sigma_class=args.sigma_class,
                                     sigma_jitter=args.sigma_jitter,
                                     box_fraction=args.box_fraction)
    ds = make_emotion_clips(model, protos, args.clips_per_class,
                            args.frames_per_clip, _pose_ranges_from(args),
                            image_size=args.image_size,
                            landmark_noise_sigma=args.landmark_noise,
                            alpha_sigma=args.alpha_sigma,
                            alpha_noise_sigma=args.alpha_noise,
                            seed=args.seed, protocol=args.protocol,
                            render=not args.no_render)
    save_dataset(ds, _out_path(args, args.output))
    log.info("wrote %d clips across %d classes", len(ds.clips), len(ds.classes))
    _write_run_manifest(args, "gen-clips")
    return 0


def cmd_label(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data, load_images=False)
    frames = ds.all_frames()
    labels, skipped = generate_labels(model, frames, _fitter_config_from(args))
    rows = [(fid, eta) for fid, eta in labels]
    atomic_write_text(_out_path(args, args.output),
                      _feature_rows_to_csv(rows, model.expr_dim))
    skip_lines = ["frame_id,reason"] + [f"{fid},{reason}" for fid, reason in skipped]
    atomic_write_text(_out_path(args, args.skip_report),
                      "\n".join(skip_lines) + "\n")
    if skipped:
        log.warning("%d of %d frames skipped", len(skipped), len(frames))
    _write_run_manifest(args, "label")
    return 0


def cmd_fit(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data, load_images=False)
    frames = ds.all_frames()
    items = []
    for fr in frames:
        alpha = fr.alpha_est if fr.alpha_est is not None else np.zeros(model.shape_dim)
        items.append((alpha, projection_matrix(fr.pose, fr.intrinsics), fr.landmarks))
    batch = batch_fit(model, items, _fitter_config_from(args), threads=args.threads)
    rows = []
    skip_lines = ["frame_id,reason"]
    for fr, res in zip(frames, batch.results):
        if res is None:
            continue
        rows.append((fr.frame_id, res.eta, fmt_float(res.objective),
                     res.iterations, res.converged))
    for err in batch.errors:
        skip_lines.append(f"{frames[err.index].frame_id},{err.kind}: {err.message}")
    atomic_write_text(
        _out_path(args, args.output),
        _feature_rows_to_csv(rows, model.expr_dim,
                             ("objective", "iterations", "converged")))
    atomic_write_text(_out_path(args, args.skip_report), "\n".join(skip_lines) + "\n")
    _write_timing(args, "fit-timing.json", batch.seconds)
    if batch.errors:
        log.warning("%d of %d frames failed to fit", len(batch.errors), len(frames))
    _write_run_manifest(args, "fit")
    return 0


def _training_pairs(ds: ClipDataset, labels_by_id, input_side: int):
    """Preprocessed crops plus targets, and the scalar mean that centers them."""
    crops, targets = [], []
    for fr in ds.all_frames():
        if fr.image is None:
            raise ValidationError(f"frame {fr.frame_id!r} has no image")
        target = labels_by_id.get(fr.frame_id) if labels_by_id is not None \
            else fr.eta_true
        if target is None:
            raise ValidationError(
                f"frame {fr.frame_id!r} has no training target; run the label "
                f"step or generate frames with ground truth")
        crops.append(preprocess(fr.image, fr.bbox, input_side, 0.0))
        targets.append(np.asarray(target, dtype=np.float64))
    mean = float(np.mean(crops))
    data = [(crop - mean, eta) for crop, eta in zip(crops, targets)]
    return data, mean


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    labels_by_id = read_feature_csv(args.labels) if args.labels else None
    data, mean = _training_pairs(ds, labels_by_id, args.input_side)
    output_dim = data[0][1].shape[0]
    conv_channels = tuple(int(c) for c in args.conv_channels.split(",") if c)
    net = build_default_net(args.input_side, output_dim, seed=args.seed,
                            conv_channels=conv_channels, kernel=args.kernel,
                            hidden=args.hidden)
    net.dataset_mean = mean
    config = TrainConfig(learning_rate=args.lr, momentum=args.momentum,
                         weight_decay=args.weight_decay,
                         batch_size=args.batch_size, max_epochs=args.epochs,
                         plateau_patience=args.patience,
                         val_fraction=args.val_fraction, seed=args.seed)
    t0 = time.perf_counter()
    net, history = train(net, data, config)
    wall = time.perf_counter() - t0
    save_checkpoint(net, _out_path(args, args.output))
    write_history_csv(_out_path(args, args.history), history)
    _write_timing(args, "train-timing.json", [wall])
    if history:
        log.info("trained %d epochs, final val loss %.6g",
                 len(history), history[-1].val_loss)
    _write_run_manifest(args, "train")
    return 0


def cmd_predict(args) -> int:
    net = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    frames = [fr for fr in ds.all_frames() if fr.image is not None]
    dropped = [fr.frame_id for fr in ds.all_frames() if fr.image is None]
    if dropped:
        log.warning("%d frames have no image and were skipped", len(dropped))
    rasters = [preprocess(fr.image, fr.bbox, net.input_side, net.dataset_mean)
               for fr in frames]
    result = predict_dataset(net, rasters, threads=args.threads)
    rows = [(fr.frame_id, eta) for fr, eta in zip(frames, result.etas)]
    atomic_write_text(_out_path(args, args.output),
                      _feature_rows_to_csv(rows, net.output_dim))
    _write_timing(args, "predict-timing.json", result.seconds)
    _write_run_manifest(args, "predict")
    return 0


def _clip_features(ds: ClipDataset, features_by_id, protocol: str):
    ids, labels, feats = [], [], []
    for clip in ds.clips:
        if not clip.emotion:
            continue
        etas = []
        for fr in clip.frames:
            if features_by_id is not None:
                eta = features_by_id.get(fr.frame_id)
            else:
                eta = fr.eta_true
            if eta is not None:
                etas.append(eta)
        if not etas:
            raise ValidationError(f"clip {clip.clip_id!r} has no usable frames")
        ids.append(clip.clip_id)
        labels.append(clip.emotion)
        feats.append(clip_feature(etas, protocol))
    return ids, labels, feats


def cmd_eval(args) -> int:
    ds = load_dataset(args.data, load_images=False)
    features_by_id = read_feature_csv(args.features) if args.features else None
    protocol = args.protocol or ds.protocol
    ids, labels, feats = _clip_features(ds, features_by_id, protocol)
    accuracy, cm = leave_one_clip_out(ids, labels, feats, k=args.k,
                                      classes=ds.classes or None)

    prefix = args.output_prefix
    counts_lines = ["true\\predicted," + ",".join(cm.classes)]
    for ci, cls in enumerate(cm.classes):
        counts_lines.append(cls + "," + ",".join(str(v) for v in cm.counts[ci]))
    atomic_write_text(_out_path(args, f"{prefix}-confusion-counts.csv"),
                      "\n".join(counts_lines) + "\n")

    from .evaluate import confusion_to_rates
    rates = confusion_to_rates(cm)
    rate_lines = ["true\\predicted," + ",".join(cm.classes)]
    for ci, cls in enumerate(cm.classes):
        rate_lines.append(cls + "," + ",".join(fmt_float(v) for v in rates[ci]))
    atomic_write_text(_out_path(args, f"{prefix}-confusion-rates.csv"),
                      "\n".join(rate_lines) + "\n")

    atomic_write_json(_out_path(args, f"{prefix}-accuracy.json"),
                      {"accuracy": accuracy, "k": args.k, "protocol": protocol,
                       "n_clips": len(ids)})
    if not args.no_figures:
        from .figures import save_confusion_png
        save_confusion_png(cm, _out_path(args, f"{prefix}-confusion.png"))
    log.info("leave-one-clip-out accuracy %.4f over %d clips", accuracy, len(ids))
    _write_run_manifest(args, "eval")
    return 0


def cmd_sweep(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data)
    method_names = [name for name in args.methods.split(",") if name]
    strategies = []
    for name in method_names:
        if name == "ground_truth":
            strategies.append(ground_truth_strategy())
        elif name == "landmark_fit":
            strategies.append(landmark_fit_strategy(
                model, noise_sigma0=args.noise_sigma0))
        elif name == "regressor":
            if not args.checkpoint:
                raise CliUsageError(
                    "method 'regressor' needs --checkpoint")
            strategies.append(regressor_strategy(load_checkpoint(args.checkpoint)))
        else:
            raise CliUsageError(f"unknown sweep method {name!r}")
    scales = tuple(float(s) for s in args.scales.split(",") if s)
    result = scale_sweep(ds, strategies, scales=scales, k=args.k, seed=args.seed)

    prefix = args.output_prefix
    lines = ["scale,method,accuracy,skipped_frames"]
    for si, scale in enumerate(result.scales):
        for mi, name in enumerate(result.methods):
            lines.append(f"{fmt_float(scale)},{name},"
                         f"{fmt_float(result.accuracy[mi, si])},"
                         f"{result.skipped_frames[mi, si]}")
    atomic_write_text(_out_path(args, f"{prefix}.csv"), "\n".join(lines) + "\n")

    from .figures import write_sweep_svg
    write_sweep_svg(result, _out_path(args, f"{prefix}.svg"))
    if not args.no_figures:
        from .figures import save_sweep_png
        save_sweep_png(result, _out_path(args, f"{prefix}.png"))
    _write_run_manifest(args, "sweep")
    return 0


def cmd_export_obj(args) -> int:
    model = load_model(args.model)
    alpha = np.zeros(model.shape_dim)
    eta = np.zeros(model.expr_dim)
    if args.alpha:
        from .util import read_vector_csv
        alpha = read_vector_csv(args.alpha)
    if args.eta:
        from .util import read_vector_csv
        eta = read_vector_csv(args.eta)
    from .model import synthesize
    pts = synthesize(model, alpha, eta).reshape(-1, 3)
    lines = [f"v {p[0]:.8f} {p[1]:.8f} {p[2]:.8f}" for p in pts]
    atomic_write_text(_out_path(args, args.output), "\n".join(lines) + "\n")
    log.info("wrote %d vertices", len(lines))
    _write_run_manifest(args, "export-obj")
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="expr3d",
                     description="3D facial expression coefficients: synthesis, "
                                 "fitting, regression, evaluation")
    parser.add_argument("--seed", type=int, default=0,
                        help="base seed for every stochastic step")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for batch fit/predict")
    parser.add_argument("--out-dir", default=".",
                        help="directory for relative output paths")
    parser.add_argument("--log-level",
                        default=os.environ.get("EXPR3D_LOG", "warning"),
                        choices=("debug", "info", "warning", "error"))
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth-model", help="create a synthetic morphable model")
    p.add_argument("--n", type=int, default=500, help="vertex count")
    p.add_argument("--s", type=int, default=20, help="identity basis size")
    p.add_argument("--m", type=int, default=29, help="expression basis size")
    p.add_argument("--landmarks", type=int, default=68)
    p.add_argument("--shape-scale", type=float, default=10.0)
    p.add_argument("--expr-scale", type=float, default=40.0)
    p.add_argument("--decay", type=float, default=0.93)
    p.add_argument("--format", choices=("binary", "json"), default="binary")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth_model)

    p = sub.add_parser("gen-frames", help="sample independent training frames")
    p.add_argument("--model", required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--frames-per-subject", type=int, required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--landmark-noise", type=float, default=0.5)
    p.add_argument("--alpha-sigma", type=float, default=1.0)
    p.add_argument("--alpha-noise", type=float, default=0.05)
    p.add_argument("--eta-box-fraction", type=float, default=0.9)
    p.add_argument("--no-render", action="store_true",
                   help="skip rasters; geometry only")
    _add_pose_range_args(p)
    p.add_argument("--output", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen_frames)

    p = sub.add_parser("gen-clips", help="generate labeled emotion clips")
    p.add_argument("--model", required=True)
    p.add_argument("--clips-per-class", type=int, required=True)
    p.add_argument("--frames-per-clip", type=int, required=True)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--landmark-noise", type=float, default=0.0)
    p.add_argument("--alpha-sigma", type=float, default=1.0)
    p.add_argument("--alpha-noise", type=float, default=0.05)
    p.add_argument("--sigma-class", type=float, default=None,
                   help="within-class anchor spread (default: auto)")
    p.add_argument("--sigma-jitter", type=float, default=None,
                   help="per-frame jitter (default: same as sigma-class)")
    p.add_argument("--box-fraction", type=float, default=0.6)
    p.add_argument("--protocol", choices=("pooled", "peak"), default="pooled")
    p.add_argument("--no-render", action="store_true")
    _add_pose_range_args(p)
    p.add_argument("--output", required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen_clips)

    p = sub.add_parser("label", help="fit coefficients with pooled identity "
                                     "to produce training labels")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_fitter_args(p)
    p.add_argument("--output", default="labels.csv")
    p.add_argument("--skip-report", default="label-skips.csv")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("fit", help="fit coefficients per frame")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    _add_fitter_args(p)
    p.add_argument("--output", default="fit.csv")
    p.add_argument("--skip-report", default="fit-skips.csv")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the direct regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--labels", default=None,
                   help="labels CSV; defaults to dataset ground truth")
    p.add_argument("--input-side", type=int, default=32)
    p.add_argument("--conv-channels", default="6,12")
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--batch-size", type=int, default=144)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--output", default="regressor.ckpt")
    p.add_argument("--history", default="history.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run the regressor over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--output", default="predictions.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="leave-one-clip-out emotion classification")
    p.add_argument("--data", required=True)
    p.add_argument("--features", default=None,
                   help="frame_id,eta_* CSV; defaults to dataset ground truth")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--protocol", choices=("pooled", "peak"), default=None,
                   help="override the dataset's pooling protocol")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--output-prefix", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy vs resolution for each method")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--methods", default="landmark_fit,regressor")
    p.add_argument("--scales", default="1.0,0.8,0.6,0.4,0.2")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--noise-sigma0", type=float, default=0.5,
                   help="detector noise in px at full resolution")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--output-prefix", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-obj", help="export a synthesized mesh")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", default=None, help="identity coefficients CSV")
    p.add_argument("--eta", default=None, help="expression coefficients CSV")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_export_obj)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as exc:
        print(str(exc), file=sys.stderr)
        return USAGE_EXIT
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    if args.threads < 1:
        print("expr3d: --threads must be at least 1", file=sys.stderr)
        return USAGE_EXIT
    try:
        return args.func(args)
    except CliUsageError as exc:
        print(str(exc), file=sys.stderr)
        return USAGE_EXIT
    except (ValidationError, ContractError, FormatError, FileNotFoundError,
            NotADirectoryError, IsADirectoryError) as exc:
        print(f"expr3d: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (SolverError, GeometryError, Expr3dError) as exc:
        print(f"expr3d: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except Exception as exc:  # noqa: BLE001 - last resort, still a clean exit
        log.exception("unhandled failure")
        print(f"expr3d: internal error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
