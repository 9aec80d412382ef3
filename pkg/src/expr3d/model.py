"""Linear morphable face model.

A face shape is a 3n vector of interleaved vertex coordinates
(x0, y0, z0, x1, y1, z1, ...).  Shapes are synthesized as an affine
combination of a mean shape, an identity basis S (3n x s) and an
expression basis E (3n x m):

    shape = mean + S @ alpha + E @ eta

``expr_stddev`` holds the per-component spread of the expression
coefficients; downstream fitting constrains |eta_j| to a multiple of it.
A subset of vertices (``landmark_indices``) acts as the sparse landmark
set, and the rows of the bases belonging to those vertices are cached at
construction so per-landmark work never touches the full mesh.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError, FormatVersionError, ValidationError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"EXPR3DMM"
MODEL_FORMAT_VERSION = 1


def _frozen_array(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class MorphableModel:
    mean_shape: np.ndarray        # (3n,)
    shape_basis: np.ndarray       # (3n, s)
    expr_basis: np.ndarray        # (3n, m)
    expr_stddev: np.ndarray       # (m,)
    landmark_indices: np.ndarray  # (L,) vertex indices
    # Landmark-restricted copies, derived in __post_init__.
    lm_mean: np.ndarray = field(init=False, repr=False)
    lm_shape_basis: np.ndarray = field(init=False, repr=False)
    lm_expr_basis: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = _frozen_array(self.mean_shape, float).ravel()
        if mean.size == 0 or mean.size % 3 != 0:
            raise ContractError(f"mean_shape length {mean.size} is not a positive multiple of 3")
        n = mean.size // 3
        sb = _frozen_array(self.shape_basis, float)
        eb = _frozen_array(self.expr_basis, float)
        for name, b in (("shape_basis", sb), ("expr_basis", eb)):
            if b.ndim != 2:
                raise ContractError(f"{name} must be 2-d, got {b.ndim}-d")
            if b.shape[0] != 3 * n:
                raise ContractError(f"{name} has {b.shape[0]} rows, expected 3*n_vertices={3 * n}")
        sd = _frozen_array(self.expr_stddev, float).ravel()
        if sd.size != eb.shape[1]:
            raise ContractError(f"expr_stddev length {sd.size} != expression basis columns {eb.shape[1]}")
        if not np.all(np.isfinite(sd)) or np.any(sd <= 0.0):
            raise ValidationError("expr_stddev entries must be finite and strictly positive")
        lm = _frozen_array(self.landmark_indices, np.int64).ravel()
        if lm.size == 0:
            raise ContractError("landmark_indices is empty")
        if np.any(lm < 0) or np.any(lm >= n):
            raise ValidationError(f"landmark_indices out of range [0, {n})")
        if np.unique(lm).size != lm.size:
            raise ValidationError("landmark_indices contains duplicates")
        if lm.size < eb.shape[1]:
            # Well-posed fitting at default settings wants L >= m.  Smaller
            # landmark sets stay constructible (the fitter enforces its own
            # weaker 2L >= m bound), but flag the imbalance.
            log.warning("model has %d landmarks for %d expression components; "
                        "landmark fitting may be ill-conditioned", lm.size, eb.shape[1])

        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "shape_basis", sb)
        object.__setattr__(self, "expr_basis", eb)
        object.__setattr__(self, "expr_stddev", sd)
        object.__setattr__(self, "landmark_indices", lm)

        rows = (3 * lm[:, None] + np.arange(3)[None, :]).ravel()  # (3L,)
        object.__setattr__(self, "lm_mean", _frozen_array(mean[rows], float))
        object.__setattr__(self, "lm_shape_basis", _frozen_array(sb[rows, :], float))
        object.__setattr__(self, "lm_expr_basis", _frozen_array(eb[rows, :], float))

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def shape_dim(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def expr_dim(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.size


def _check_coeffs(model: MorphableModel, alpha, eta) -> tuple[np.ndarray, np.ndarray]:
    alpha = np.asarray(alpha, dtype=float).ravel()
    eta = np.asarray(eta, dtype=float).ravel()
    if alpha.size != model.shape_dim:
        raise ContractError(f"alpha has length {alpha.size}, expected s={model.shape_dim}")
    if eta.size != model.expr_dim:
        raise ContractError(f"eta has length {eta.size}, expected m={model.expr_dim}")
    return alpha, eta


def synthesize(model: MorphableModel, alpha, eta) -> np.ndarray:
    """Full 3n shape vector for the given identity and expression coefficients."""
    alpha, eta = _check_coeffs(model, alpha, eta)
    return model.mean_shape + model.shape_basis @ alpha + model.expr_basis @ eta


def landmark_positions(model: MorphableModel, shape: np.ndarray) -> np.ndarray:
    """Gather the landmark vertices of a synthesized shape as an (L, 3) array."""
    shape = np.asarray(shape, dtype=float).ravel()
    if shape.size != model.mean_shape.size:
        raise ContractError(f"shape has length {shape.size}, expected {model.mean_shape.size}")
    return shape.reshape(-1, 3)[model.landmark_indices]


def landmark_shape(model: MorphableModel, alpha, eta) -> np.ndarray:
    """Landmark vertices straight from coefficients via the cached sub-bases.

    Equals landmark_positions(model, synthesize(model, alpha, eta)) without the
    O(n) synthesis.
    """
    alpha, eta = _check_coeffs(model, alpha, eta)
    flat = model.lm_mean + model.lm_shape_basis @ alpha + model.lm_expr_basis @ eta
    return flat.reshape(-1, 3)


def make_synthetic_model(n: int, s: int, m: int, n_landmarks: int, seed: int,
                         shape_scale: float = 10.0, expr_scale: float = 40.0,
                         decay: float = 0.93) -> MorphableModel:
    """Random but reproducible desk-scale model.

    The mean shape samples a face-like patch of an ellipsoid (taller than wide,
    opening toward +z).  Basis columns are mutually orthogonal with
    geometrically decaying norms, so leading components deform more than
    trailing ones, and expr_stddev is the per-column norm divided by
    sqrt(3n).
    """
    if not (0 < n_landmarks <= n):
        raise ContractError(f"need 0 < n_landmarks <= n, got L={n_landmarks}, n={n}")
    if m > 3 * n_landmarks:
        raise ContractError(f"expression dimension m={m} exceeds 3*L={3 * n_landmarks}")
    if s + m > 3 * n:
        raise ContractError(f"s+m={s + m} exceeds 3n={3 * n}; cannot build orthogonal columns")

    rng = np.random.default_rng(seed)
    # Ellipsoid patch: azimuth u (around the vertical axis) and elevation v,
    # restricted so the patch faces +z.
    u = rng.uniform(-1.2, 1.2, n)
    v = rng.uniform(-1.3, 1.3, n)
    ax, ay, az = 70.0, 90.0, 55.0
    verts = np.stack([ax * np.cos(v) * np.sin(u),
                      ay * np.sin(v),
                      az * np.cos(v) * np.cos(u)], axis=1)
    mean = verts.ravel()

    q, _ = np.linalg.qr(rng.standard_normal((3 * n, s + m)))
    falloff = decay ** np.arange(s + m, dtype=float)
    shape_basis = q[:, :s] * (shape_scale * falloff[:s])
    expr_basis = q[:, s:] * (expr_scale * falloff[:m])
    expr_stddev = np.linalg.norm(expr_basis, axis=0) / np.sqrt(3 * n)

    lm = np.sort(rng.choice(n, size=n_landmarks, replace=False))
    return MorphableModel(mean, shape_basis, expr_basis, expr_stddev, lm)


# ---------------------------------------------------------------------------
# Serialization.  Binary container:
#   magic "EXPR3DMM" | version u32 | n, s, m, L as u32 | float64 payloads
#   (mean_shape, shape_basis column-major, expr_basis column-major,
#   expr_stddev) | landmark_indices u32
# all little-endian.  A JSON mirror with the same field names (matrices as
# row-major nested lists) is accepted on load for hand-authored models.
# ---------------------------------------------------------------------------

def model_to_json_dict(model: MorphableModel) -> dict:
    """The JSON mirror of the binary container (matrices row-major nested)."""
    return {
        "magic": MODEL_MAGIC.decode(),
        "version": MODEL_FORMAT_VERSION,
        "n": model.n_vertices,
        "s": model.shape_dim,
        "m": model.expr_dim,
        "L": model.n_landmarks,
        "mean_shape": model.mean_shape.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "expr_basis": model.expr_basis.tolist(),
        "expr_stddev": model.expr_stddev.tolist(),
        "landmark_indices": model.landmark_indices.tolist(),
    }


def save_model(model: MorphableModel, path: str, fmt: str = "binary") -> None:
    from .util import atomic_write_bytes, atomic_write_json

    if fmt == "json":
        atomic_write_json(path, model_to_json_dict(model))
        return
    if fmt != "binary":
        raise ValidationError(f"unknown model format {fmt!r}")
    n, s, m, L = model.n_vertices, model.shape_dim, model.expr_dim, model.n_landmarks
    parts = [MODEL_MAGIC, struct.pack("<5I", MODEL_FORMAT_VERSION, n, s, m, L)]
    parts.append(model.mean_shape.astype("<f8").tobytes())
    parts.append(np.asfortranarray(model.shape_basis.astype("<f8")).tobytes(order="F"))
    parts.append(np.asfortranarray(model.expr_basis.astype("<f8")).tobytes(order="F"))
    parts.append(model.expr_stddev.astype("<f8").tobytes())
    parts.append(model.landmark_indices.astype("<u4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def _load_model_json(path: str) -> MorphableModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: neither a binary model container nor valid JSON: {exc}") from exc
    if doc.get("magic", MODEL_MAGIC.decode()) != MODEL_MAGIC.decode():
        raise FormatError(f"{path}: JSON magic {doc.get('magic')!r} is not {MODEL_MAGIC.decode()!r}")
    version = int(doc.get("version", MODEL_FORMAT_VERSION))
    if version != MODEL_FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, supported {MODEL_FORMAT_VERSION}")
    try:
        fields = [np.asarray(doc[k], dtype=float) for k in
                  ("mean_shape", "shape_basis", "expr_basis", "expr_stddev")]
        lm = np.asarray(doc["landmark_indices"], dtype=np.int64)
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    mean, sb, eb, sd = fields
    for dim_key, actual in (("n", mean.size // 3), ("s", sb.shape[1] if sb.ndim == 2 else -1),
                            ("m", eb.shape[1] if eb.ndim == 2 else -1), ("L", lm.size)):
        if dim_key in doc and int(doc[dim_key]) != actual:
            raise ContractError(f"{path}: declared {dim_key}={doc[dim_key]} but payload implies {actual}")
    return MorphableModel(mean, sb, eb, sd, lm)


def load_model(path: str) -> MorphableModel:
    """Load a model container, accepting the binary format or its JSON mirror.

    Raises FileNotFoundError, FormatError, FormatVersionError, ContractError or
    ValidationError depending on what is wrong.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:1] == b"{":
        return _load_model_json(path)
    if blob[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:8]!r}, expected {MODEL_MAGIC!r}")
    if len(blob) < 8 + 20:
        raise FormatError(f"{path}: truncated header")
    version, n, s, m, L = struct.unpack_from("<5I", blob, 8)
    if version != MODEL_FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, supported {MODEL_FORMAT_VERSION}")
    counts = [3 * n, 3 * n * s, 3 * n * m, m]
    need = 28 + 8 * sum(counts) + 4 * L
    if len(blob) != need:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {need} for (n={n}, s={s}, m={m}, L={L})")
    off = 28
    arrays = []
    for count in counts:
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off))
        off += 8 * count
    lm = np.frombuffer(blob, dtype="<u4", count=L, offset=off).astype(np.int64)
    mean = arrays[0]
    sb = arrays[1].reshape((3 * n, s), order="F")
    eb = arrays[2].reshape((3 * n, m), order="F")
    return MorphableModel(mean, sb, eb, arrays[3], lm)
