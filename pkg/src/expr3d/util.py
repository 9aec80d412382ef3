"""Small shared helpers: seed derivation, atomic writes, number formatting."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np

# Floats written to CSV keep 17 significant digits so that reading them back
# reproduces the double exactly.
FLOAT_FMT = "%.17g"


def fmt_float(x) -> str:
    return FLOAT_FMT % float(x)


def derive_seed(base_seed: int, label: str) -> int:
    """Derive a stable per-module seed from a base seed and a text label."""
    digest = hashlib.sha256(f"{base_seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derived_rng(base_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (base_seed, key...) tuples.

    SeedSequence hashing makes the stream deterministic and decorrelated, so
    per-item generators can be created in any order (or in parallel) without
    changing the draws.
    """
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]]))


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write a file via temp-file-plus-rename so readers never see partial output."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def write_vector_csv(path: str, values) -> None:
    """One row of comma-separated floats."""
    atomic_write_text(path, ",".join(fmt_float(v) for v in np.asarray(values, dtype=float).ravel()) + "\n")


def read_vector_csv(path: str) -> np.ndarray:
    """Parse every number in a whitespace/comma separated text file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    parts = [p for p in text.replace(",", " ").split() if p]
    return np.array([float(p) for p in parts], dtype=float)
