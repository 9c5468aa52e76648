"""Synthetic clustered features and the two feature-file formats.

Text format::

    dim=<d> count=<n>
    <label>,<f_1>,...,<f_d>
    ...

Binary format (little-endian)::

    magic  b"RSKF"
    uint32 version (1)
    uint32 dim
    uint32 count
    float32[count * dim]  features, row-major
    int32[count]          labels
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RSKF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_TEXT_HEADER = re.compile(r"^dim=(\d+)\s+count=(\d+)\s*$")


class DataFormatError(ValueError):
    """Raised for malformed feature files; ``code`` names the defect."""

    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


def generate_clusters(num_classes: int, per_class: int, input_dim: int, noise_scale: float, seed: int = 0):
    """Class centres uniform on the unit sphere plus isotropic Gaussian noise (left unnormalised)."""
    if input_dim < 2:
        raise ValueError(f"input_dim must be >= 2, got {input_dim}")
    if num_classes < 2 or per_class < 2:
        raise ValueError("need at least 2 classes with at least 2 examples each")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, input_dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = centers[labels] + noise_scale * rng.standard_normal((labels.size, input_dim))
    return features, labels


def split_per_class(labels, holdout_per_class: int, seed: int = 0):
    """Index arrays (train, held-out) taking ``holdout_per_class`` random members of every class."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, held = [], []
    for c in np.unique(labels):
        ids = rng.permutation(np.flatnonzero(labels == c))
        held.append(ids[:holdout_per_class])
        train.append(ids[holdout_per_class:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def save_text(path, features: np.ndarray, labels) -> None:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = features.shape
    with open(path, "w") as fh:
        fh.write(f"dim={d} count={n}\n")
        for lab, row in zip(labels, features):
            fh.write(",".join([str(int(lab)), *(repr(float(v)) for v in row)]) + "\n")


def load_text(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("empty", f"{path} is empty")
    m = _TEXT_HEADER.match(lines[0])
    if not m:
        raise DataFormatError("bad-header", f"line 1: expected 'dim=<d> count=<n>', got {lines[0][:40]!r}")
    dim, count = int(m.group(1)), int(m.group(2))
    rows = [ln for ln in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != count:
        raise DataFormatError("count-mismatch", f"header announces {count} rows, found {len(rows)}")
    features = np.empty((count, dim))
    labels = np.empty(count, dtype=np.int64)
    for i, ln in enumerate(rows):
        lineno = i + 2
        fields = ln.split(",")
        if len(fields) != dim + 1:
            raise DataFormatError(
                "dim-mismatch", f"line {lineno}: expected label plus {dim} values, got {len(fields) - 1} values"
            )
        try:
            labels[i] = int(fields[0])
            features[i] = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise DataFormatError("malformed-row", f"line {lineno}: {exc}") from None
    return features, labels


def save_binary(path, features: np.ndarray, labels) -> None:
    features = np.asarray(features)
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, d, n))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def load_binary(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError("truncated", f"file ends at byte {len(raw)} inside the {_HEADER.size}-byte header")
    magic, version, dim, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError("bad-magic", f"unknown magic {magic!r}")
    if version != VERSION:
        raise DataFormatError("bad-version", f"unsupported version {version}")
    feat_end = _HEADER.size + 4 * dim * count
    end = feat_end + 4 * count
    if len(raw) < end:
        raise DataFormatError("truncated", f"file ends at byte offset {len(raw)}, expected {end} bytes")
    if len(raw) > end:
        raise DataFormatError("trailing-bytes", f"{len(raw) - end} unexpected bytes after offset {end}")
    features = np.frombuffer(raw, dtype="<f4", count=dim * count, offset=_HEADER.size).reshape(count, dim)
    labels = np.frombuffer(raw, dtype="<i4", count=count, offset=feat_end).astype(np.int64)
    return features.astype(np.float32), labels


def save_features(path, features, labels) -> None:
    """Binary for ``.bin`` paths, text otherwise."""
    if Path(path).suffix == ".bin":
        save_binary(path, features, labels)
    else:
        save_text(path, features, labels)


def load_features(path):
    path = Path(path)
    if not path.is_file():
        raise DataFormatError("missing", f"{path} does not exist")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load_binary(path)
    if head.startswith(b"dim="):
        return load_text(path)
    if path.suffix == ".bin":
        raise DataFormatError("bad-magic", f"unknown magic {head!r}")
    return load_text(path)
