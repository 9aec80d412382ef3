"""Direct pixel-to-expression regression.

A small convolutional network maps a preprocessed face raster straight to the
expression coefficient vector, replacing the landmark-plus-optimization route
with one forward pass.  Everything is plain numpy: layers implement forward
and reverse-mode backward passes explicitly, and training is minibatch SGD
with classical momentum

    v <- momentum * v - lr * grad,    W <- W + v

plus an L2 penalty 0.5 * weight_decay * ||W||^2 on weight matrices (never on
biases), and a reduce-on-plateau learning-rate schedule.  No data
augmentation is applied anywhere.

Preprocessing mirrors the usual face-crop recipe: the detection box is
expanded by 1.25 about its center, clipped to the image, cropped, bilinearly
resized to a square input raster, and mean-subtracted.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, FormatError, FormatVersionError, ValidationError
from .images import resample_region

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EXPNETCK"
CHECKPOINT_FORMAT_VERSION = 1
BBOX_EXPANSION = 1.25


# ---------------------------------------------------------------------------
# Layers.  forward(x, cache) returns the activation; when a dict is passed as
# cache it stores what backward needs, so inference calls (cache=None) share
# no mutable state and are safe to run concurrently.
# ---------------------------------------------------------------------------

class Dense:
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        self.n_in, self.n_out = int(n_in), int(n_out)
        if rng is None:
            self.weight = np.zeros((n_out, n_in))
        else:
            limit = np.sqrt(3.0 / n_in)
            self.weight = rng.uniform(-limit, limit, size=(n_out, n_in))
        self.bias = np.zeros(n_out)

    def descriptor(self):
        return {"kind": self.kind, "n_in": self.n_in, "n_out": self.n_out}

    def forward(self, x, cache=None):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.n_in:
            raise ContractError(f"dense layer expects {self.n_in} inputs, got {flat.shape[1]}")
        if cache is not None:
            cache["x"] = flat
            cache["shape"] = x.shape
        return flat @ self.weight.T + self.bias

    def backward(self, grad, cache):
        grads = {"weight": grad.T @ cache["x"], "bias": grad.sum(axis=0)}
        return (grad @ self.weight).reshape(cache["shape"]), grads


class Conv:
    kind = "conv"

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator | None = None):
        self.c_in, self.c_out, self.kernel = int(c_in), int(c_out), int(kernel)
        fan_in = c_in * kernel * kernel
        if rng is None:
            self.weight = np.zeros((c_out, c_in, kernel, kernel))
        else:
            limit = np.sqrt(3.0 / fan_in)
            self.weight = rng.uniform(-limit, limit, size=(c_out, c_in, kernel, kernel))
        self.bias = np.zeros(c_out)

    def descriptor(self):
        return {"kind": self.kind, "c_in": self.c_in, "c_out": self.c_out, "kernel": self.kernel}

    def forward(self, x, cache=None):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ContractError(f"conv layer expects (B, {self.c_in}, H, W), got {x.shape}")
        k = self.kernel
        if x.shape[2] < k or x.shape[3] < k:
            raise ContractError(f"spatial input {x.shape[2:]} smaller than kernel {k}")
        windows = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, H', W', k, k)
        out = np.tensordot(windows, self.weight, axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + self.bias[None, :, None, None]
        if cache is not None:
            cache["windows"] = windows
        return out

    def backward(self, grad, cache):
        k = self.kernel
        windows = cache["windows"]
        grad_w = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grads = {"weight": grad_w, "bias": grad.sum(axis=(0, 2, 3))}
        padded = np.pad(grad, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        gw = sliding_window_view(padded, (k, k), axis=(2, 3))   # (B, O, H, W, k, k)
        flipped = self.weight[:, :, ::-1, ::-1]
        grad_x = np.tensordot(gw, flipped, axes=([1, 4, 5], [0, 2, 3]))
        return np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), grads


class AvgPool:
    kind = "pool"

    def __init__(self, size: int = 2):
        self.size = int(size)

    def descriptor(self):
        return {"kind": self.kind, "size": self.size}

    def forward(self, x, cache=None):
        s = self.size
        b, c, h, w = x.shape
        h2, w2 = (h // s) * s, (w // s) * s
        cropped = x[:, :, :h2, :w2]
        out = cropped.reshape(b, c, h2 // s, s, w2 // s, s).mean(axis=(3, 5))
        if cache is not None:
            cache["shape"] = x.shape
        return out

    def backward(self, grad, cache):
        s = self.size
        b, c, h, w = cache["shape"]
        up = np.repeat(np.repeat(grad, s, axis=2), s, axis=3) / (s * s)
        grad_x = np.zeros((b, c, h, w))
        grad_x[:, :, :up.shape[2], :up.shape[3]] = up
        return grad_x, {}


class Relu:
    kind = "rectifier"

    def descriptor(self):
        return {"kind": self.kind}

    def forward(self, x, cache=None):
        if cache is not None:
            cache["mask"] = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad, cache):
        return grad * cache["mask"], {}


_LAYER_KINDS = {"dense": Dense, "conv": Conv, "pool": AvgPool, "rectifier": Relu}


def _layer_from_descriptor(desc: dict):
    kind = desc.get("kind")
    if kind == "dense":
        return Dense(desc["n_in"], desc["n_out"])
    if kind == "conv":
        return Conv(desc["c_in"], desc["c_out"], desc["kernel"])
    if kind == "pool":
        return AvgPool(desc["size"])
    if kind == "rectifier":
        return Relu()
    raise FormatError(f"unknown layer kind {kind!r}")


class RegressorNet:
    """Layer stack plus the preprocessing mean it was trained with."""

    def __init__(self, layers: list, input_side: int, output_dim: int, dataset_mean=0.0):
        self.layers = list(layers)
        self.input_side = int(input_side)
        self.output_dim = int(output_dim)
        self.dataset_mean = dataset_mean

    def forward_batch(self, x: np.ndarray, caches=None) -> np.ndarray:
        if x.ndim == 3:
            x = x[:, None, :, :]
        if x.ndim != 4 or x.shape[2] != self.input_side or x.shape[3] != self.input_side:
            raise ContractError(
                f"input batch must be (B, {self.input_side}, {self.input_side}), got {x.shape}")
        out = x
        for i, layer in enumerate(self.layers):
            out = layer.forward(out, caches[i] if caches is not None else None)
        if out.ndim != 2 or out.shape[1] != self.output_dim:
            raise ContractError(f"network produced shape {out.shape}, expected (B, {self.output_dim})")
        return out

    def parametric_layers(self):
        return [l for l in self.layers if hasattr(l, "weight")]

    def parameter_count(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.parametric_layers())


def build_default_net(input_side: int, output_dim: int, seed: int,
                      conv_channels: tuple[int, ...] = (6, 12), kernel: int = 5,
                      hidden: int = 64) -> RegressorNet:
    """Two conv+pool blocks, then two dense layers.

    At the default input_side=64, output_dim=29 this lands near 1.3e5
    parameters; smaller input sides shrink the first dense layer accordingly.
    """
    layers = []
    side = input_side
    c_prev = 1
    layer_idx = 0
    for c in conv_channels:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), layer_idx]))
        layers.append(Conv(c_prev, c, kernel, rng))
        layers.append(Relu())
        layers.append(AvgPool(2))
        side = (side - kernel + 1) // 2
        if side < 1:
            raise ContractError(f"input_side {input_side} too small for {len(conv_channels)} conv blocks")
        c_prev = c
        layer_idx += 1
    flat = side * side * c_prev
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), layer_idx]))
    layers.append(Dense(flat, hidden, rng))
    layers.append(Relu())
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), layer_idx + 1]))
    layers.append(Dense(hidden, output_dim, rng))
    return RegressorNet(layers, input_side, output_dim)


# ---------------------------------------------------------------------------
# Preprocessing.
# ---------------------------------------------------------------------------

def expand_bbox(bbox, factor: float = BBOX_EXPANSION) -> tuple[float, float, float, float]:
    """Scale an (x, y, w, h) box about its center."""
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise ContractError(f"bbox must have positive size, got {bbox}")
    cx, cy = x + w / 2.0, y + h / 2.0
    return cx - factor * w / 2.0, cy - factor * h / 2.0, factor * w, factor * h


def preprocess(image: np.ndarray, bbox, input_side: int, dataset_mean=0.0) -> np.ndarray:
    """Crop the expanded face box and resize to the network input raster.

    The box is expanded by 1.25 about its center, intersected with the image
    extent, cropped with bilinear sampling and mean-subtracted.  Raises
    ValidationError when the expanded box misses the image entirely.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ContractError(f"image must be 2-d grayscale, got shape {image.shape}")
    if image.size and (image.min() < -1e-9 or image.max() > 1.0 + 1e-9):
        raise ValidationError("image intensities must lie in [0, 1]")
    x, y, w, h = expand_bbox(bbox)
    x0, y0 = max(x, 0.0), max(y, 0.0)
    x1, y1 = min(x + w, float(image.shape[1])), min(y + h, float(image.shape[0]))
    if x1 <= x0 or y1 <= y0:
        raise ValidationError(f"expanded bbox {(x, y, w, h)} does not intersect the image")
    crop = resample_region(image, x0, y0, x1 - x0, y1 - y0, input_side, input_side)
    return crop - dataset_mean


# ---------------------------------------------------------------------------
# Forward / loss / gradient.
# ---------------------------------------------------------------------------

def forward(net: RegressorNet, raster: np.ndarray) -> np.ndarray:
    """Single-raster forward pass; pure function of (net, raster)."""
    raster = np.asarray(raster, dtype=float)
    if raster.shape != (net.input_side, net.input_side):
        raise ContractError(
            f"raster must be ({net.input_side}, {net.input_side}), got {raster.shape}")
    return net.forward_batch(raster[None])[0]


def _stack_batch(net: RegressorNet, batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, y = batch
    else:
        pairs = list(batch)
        if not pairs:
            raise ContractError("batch is empty")
        x = np.stack([np.asarray(p[0], dtype=float) for p in pairs])
        y = np.stack([np.asarray(p[1], dtype=float) for p in pairs])
    if x.ndim != 3 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ContractError(f"batch arrays have incompatible shapes {x.shape} / {y.shape}")
    if y.shape[1] != net.output_dim:
        raise ContractError(f"targets have dimension {y.shape[1]}, expected {net.output_dim}")
    return x, y


def loss_and_gradient(net: RegressorNet, batch, weight_decay: float = 0.0):
    """Mean squared-norm loss and its gradient for every parameter.

    loss = mean_b ||f(x_b) - y_b||^2 + 0.5 * weight_decay * sum_W ||W||^2.
    Returns (loss, grads) with grads a per-layer list of dicts keyed
    "weight"/"bias" (empty for parameterless layers).
    """
    x, y = _stack_batch(net, batch)
    caches = [dict() for _ in net.layers]
    out = net.forward_batch(x, caches)
    diff = out - y
    loss = float((diff * diff).sum() / x.shape[0])
    grad = 2.0 * diff / x.shape[0]
    grads: list[dict] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grad, layer_grads = net.layers[i].backward(grad, caches[i])
        grads[i] = layer_grads
    if weight_decay:
        for layer, layer_grads in zip(net.layers, grads):
            if "weight" in layer_grads:
                loss += 0.5 * weight_decay * float((layer.weight ** 2).sum())
                layer_grads["weight"] = layer_grads["weight"] + weight_decay * layer.weight
    return loss, grads


def batch_loss(net: RegressorNet, x: np.ndarray, y: np.ndarray, chunk: int = 256) -> float:
    """Data-term loss over a whole set, evaluated in chunks."""
    if x.shape[0] == 0:
        raise ContractError("empty evaluation set")
    total = 0.0
    for lo in range(0, x.shape[0], chunk):
        out = net.forward_batch(x[lo:lo + chunk])
        d = out - y[lo:lo + chunk]
        total += float((d * d).sum())
    return total / x.shape[0]


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 144
    max_epochs: int = 30
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    min_lr: float = 1e-6
    improvement_tol: float = 1e-6
    val_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


def train(net: RegressorNet, dataset, config: TrainConfig = TrainConfig()):
    """Train in place; returns (net, history).

    ``dataset`` is a list of (raster, eta) pairs or an (X, Y) array tuple.  A
    deterministic shuffle carves off the validation split; the learning rate
    drops by plateau_factor whenever validation loss fails to improve by more
    than improvement_tol for plateau_patience consecutive epochs, and training
    stops early once a plateau is hit at min_lr.
    """
    x, y = _stack_batch(net, dataset)
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0]))
    order = rng.permutation(x.shape[0])
    n_val = int(round(config.val_fraction * x.shape[0]))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        raise ContractError("validation split leaves no training samples")
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = x[val_idx], y[val_idx]
    if n_val == 0:
        log.warning("no validation split; plateau schedule follows training loss")

    velocity = [{k: np.zeros_like(getattr(l, k)) for k in ("weight", "bias")}
                for l in net.layers if hasattr(l, "weight")]
    lr = config.learning_rate
    best_val = np.inf
    stall = 0
    history: list[EpochStats] = []
    epoch_rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 1]))

    for epoch in range(1, config.max_epochs + 1):
        perm = epoch_rng.permutation(x_train.shape[0])
        running = 0.0
        for lo in range(0, perm.size, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            loss, grads = loss_and_gradient(net, (x_train[idx], y_train[idx]), config.weight_decay)
            running += loss * idx.size
            vi = 0
            for layer, layer_grads in zip(net.layers, grads):
                if "weight" not in layer_grads:
                    continue
                for key in ("weight", "bias"):
                    v = velocity[vi][key]
                    v *= config.momentum
                    v -= lr * layer_grads[key]
                    getattr(layer, key).__iadd__(v)
                vi += 1
        train_loss = running / perm.size
        val_loss = batch_loss(net, x_val, y_val) if n_val else train_loss
        history.append(EpochStats(epoch, train_loss, val_loss, lr))

        if val_loss < best_val - config.improvement_tol:
            best_val = val_loss
            stall = 0
        else:
            stall += 1
        if stall >= config.plateau_patience:
            # The multiplicative decay can overshoot min_lr by a few ulps, so
            # the floor test carries a relative tolerance.
            if lr <= config.min_lr * (1.0 + 1e-9):
                log.info("plateau at min_lr after epoch %d; stopping", epoch)
                break
            lr = max(lr * config.plateau_factor, config.min_lr)
            stall = 0
            log.info("validation plateau; learning rate -> %g", lr)
    return net, history


def write_history_csv(path: str, history) -> None:
    from .util import atomic_write_text, fmt_float

    lines = ["epoch,train_loss,val_loss,lr"]
    for row in history:
        lines.append(f"{row.epoch},{fmt_float(row.train_loss)},{fmt_float(row.val_loss)},{fmt_float(row.lr)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Prediction.
# ---------------------------------------------------------------------------

@dataclass
class PredictResult:
    etas: list
    seconds: list[float] = field(default_factory=list)


def predict_dataset(net: RegressorNet, rasters, threads: int = 1) -> PredictResult:
    """Elementwise forward over a raster list with per-item wall time."""
    rasters = list(rasters)

    def run(r):
        start = time.perf_counter()
        eta = forward(net, r)
        return eta, time.perf_counter() - start

    if threads > 1 and len(rasters) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(run, rasters))
    else:
        pairs = [run(r) for r in rasters]
    return PredictResult(etas=[p[0] for p in pairs], seconds=[p[1] for p in pairs])


# ---------------------------------------------------------------------------
# Checkpoints: magic "EXPNETCK" | version u32 | header length u32 | UTF-8
# JSON header (layer descriptor table, input/output dims, dataset mean) |
# float64 little-endian payloads (optional raster mean, then per parametric
# layer weight and bias in layer order).
# ---------------------------------------------------------------------------

def save_checkpoint(net: RegressorNet, path: str) -> None:
    from .util import atomic_write_bytes

    mean = net.dataset_mean
    if mean is None:
        mean_kind, mean_scalar = "none", 0.0
    elif np.isscalar(mean) or getattr(mean, "ndim", 1) == 0:
        mean_kind, mean_scalar = "scalar", float(mean)
    else:
        mean_kind, mean_scalar = "raster", 0.0
    header = {
        "input_side": net.input_side,
        "output_dim": net.output_dim,
        "dataset_mean_kind": mean_kind,
        "dataset_mean": mean_scalar,
        "layers": [l.descriptor() for l in net.layers],
    }
    blob = json.dumps(header).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<2I", CHECKPOINT_FORMAT_VERSION, len(blob)), blob]
    if mean_kind == "raster":
        parts.append(np.asarray(mean, dtype="<f8").tobytes())
    for layer in net.parametric_layers():
        parts.append(layer.weight.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path: str) -> RegressorNet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header")
    version, header_len = struct.unpack_from("<2I", blob, 8)
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, supported {CHECKPOINT_FORMAT_VERSION}")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    layers = [_layer_from_descriptor(d) for d in header["layers"]]
    net = RegressorNet(layers, header["input_side"], header["output_dim"])

    off = 16 + header_len

    def take(count, shape):
        nonlocal off
        need = 8 * count
        if off + need > len(blob):
            raise FormatError(f"{path}: payload truncated")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += need
        return arr

    kind = header.get("dataset_mean_kind", "scalar")
    if kind == "raster":
        net.dataset_mean = take(net.input_side ** 2, (net.input_side, net.input_side))
    elif kind == "none":
        net.dataset_mean = None
    else:
        net.dataset_mean = float(header.get("dataset_mean", 0.0))
    for layer in net.parametric_layers():
        layer.weight = take(layer.weight.size, layer.weight.shape)
        layer.bias = take(layer.bias.size, layer.bias.shape)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return net
