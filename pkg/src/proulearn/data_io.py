"""Numeric containers, seeded randomness and on-disk formats.

Feature matrices, label vectors and probability matrices are plain numpy
arrays; the ``as_*`` helpers validate them at module boundaries.

Binary layouts (all little-endian):

* features: ``b"PULF"``, u32 version=1, u64 rows, u64 cols, rows*cols f32
* labels:   ``b"PULL"``, u32 version=1, u64 n, u32 num_classes, n u32

Randomness comes from :class:`RandomSource`, a Philox-4x64 counter-based
generator keyed by ``(master_seed, stream_id)``. Philox with a distinct key
is an independent stream, so work split by stream id gives the same numbers
under any schedule. This algorithm is part of the reproducibility contract
and is pinned by a golden-value test.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"PULF"
LABEL_MAGIC = b"PULL"
FORMAT_VERSION = 1

_FEATURE_HEADER = struct.Struct("<4sIQQ")
_LABEL_HEADER = struct.Struct("<4sIQI")

_U64 = (1 << 64) - 1


class FormatError(ValueError):
    """A file does not match its declared format."""


class NonFiniteValueError(FormatError):
    """A matrix entry is NaN or infinite."""

    def __init__(self, row: int, col: int, value: float):
        self.row = row
        self.col = col
        super().__init__(f"non-finite value {value!r} at row {row}, col {col}")


class DimensionMismatchError(FormatError):
    """Row lengths or payload size disagree with the declared shape."""


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _check_finite(m: np.ndarray) -> None:
    bad = np.argwhere(~np.isfinite(m))
    if bad.size:
        r, c = (int(v) for v in bad[0])
        raise NonFiniteValueError(r, c, float(m[r, c]))


def as_feature_matrix(values, min_cols: int = 2) -> np.ndarray:
    """Validate and return ``values`` as an ``(n, D)`` float64 array.

    Requires ``n >= 1``, ``D >= min_cols`` and all-finite entries. The
    correlation index needs per-sample variance, hence ``D >= 2`` by default.
    """
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1:
        raise ValueError("feature matrix must have at least one row")
    if m.shape[1] < min_cols:
        raise ValueError(f"feature matrix needs at least {min_cols} columns, got {m.shape[1]}")
    _check_finite(m)
    return m


def as_label_vector(labels, num_classes: int, n: int | None = None) -> np.ndarray:
    """Validate integer class labels in ``[0, num_classes)``."""
    y = np.asarray(labels)
    if y.ndim != 1:
        raise DimensionMismatchError(f"labels must be 1-D, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if n is not None and y.shape[0] != n:
        raise DimensionMismatchError(f"{y.shape[0]} labels for {n} samples")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y


def as_prob_matrix(values, atol: float = 1e-6) -> np.ndarray:
    p = np.asarray(values, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D matrix, got shape {p.shape}")
    _check_finite(p)
    if np.any(p < -atol) or np.any(p > 1 + atol):
        raise ValueError("probabilities must lie in [0, 1]")
    if not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=atol):
        raise ValueError("probability rows must sum to 1")
    return p


# ---------------------------------------------------------------------------
# elementary numerics
# ---------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction. Accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input must be finite")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def min_max_normalize(v) -> np.ndarray:
    """Affinely map ``v`` onto ``[0, 1]``; a constant vector maps to 0.5."""
    x = np.asarray(v, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise ValueError("min_max_normalize expects a non-empty 1-D vector")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    out = (x - lo) / (hi - lo)
    # rounding can push the endpoints a hair outside the unit interval
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomSource:
    """Seed + stream pair naming one reproducible random sequence."""

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator positioned at the start of the stream."""
        key = np.array([self.master_seed & _U64, self.stream_id & _U64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, stream_id: int) -> RandomSource:
        return RandomSource(self.master_seed, stream_id)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def save_features(m, path, format: str = "binary") -> None:
    """Write a feature matrix.

    The binary format stores float32; values that are not exactly
    representable in float32 are rounded on write. CSV uses ``repr`` so
    float64 values round-trip exactly.
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("cannot save an empty feature matrix")
    path = Path(path)
    if format == "binary":
        header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, arr.shape[0], arr.shape[1])
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in arr:
                w.writerow([repr(float(x)) for x in row])
    else:
        raise ValueError(f"unknown format {format!r}")


def load_features(path, format: str = "binary", csv_header: bool = False, min_cols: int = 2) -> np.ndarray:
    """Read and validate a feature matrix written by :func:`save_features`."""
    path = Path(path)
    if format == "binary":
        data = path.read_bytes()
        if len(data) < _FEATURE_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, rows, cols = _FEATURE_HEADER.unpack_from(data)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        expected = _FEATURE_HEADER.size + 4 * rows * cols
        if len(data) != expected:
            raise DimensionMismatchError(
                f"{path}: header declares {rows}x{cols} ({expected} bytes), file has {len(data)}"
            )
        m = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(rows, cols)
        m = m.astype(np.float64)
    elif format == "csv":
        rows_out = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if csv_header:
                next(reader, None)
            width = None
            for r, row in enumerate(reader):
                if not row:
                    continue
                if width is None:
                    width = len(row)
                elif len(row) != width:
                    raise DimensionMismatchError(f"{path}: row {r} has {len(row)} columns, expected {width}")
                try:
                    vals = [float(x) for x in row]
                except ValueError as exc:
                    raise FormatError(f"{path}: row {r}: {exc}") from None
                for c, x in enumerate(vals):
                    if not math.isfinite(x):
                        raise NonFiniteValueError(r, c, x)
                rows_out.append(vals)
        if not rows_out:
            raise FormatError(f"{path}: no data rows")
        m = np.array(rows_out, dtype=np.float64)
    else:
        raise ValueError(f"unknown format {format!r}")
    return as_feature_matrix(m, min_cols=min_cols)


def save_labels(labels, num_classes: int, path, format: str = "binary") -> None:
    y = as_label_vector(labels, num_classes)
    path = Path(path)
    if format == "binary":
        with open(path, "wb") as fh:
            fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, y.shape[0], num_classes))
            fh.write(y.astype("<u4").tobytes())
    elif format == "csv":
        # first line carries the class count so the file is self-describing
        with open(path, "w") as fh:
            fh.write(f"{num_classes}\n")
            fh.writelines(f"{int(v)}\n" for v in y)
    else:
        raise ValueError(f"unknown format {format!r}")


def load_labels(path, format: str = "binary") -> tuple[np.ndarray, int]:
    """Return ``(labels, num_classes)``."""
    path = Path(path)
    if format == "binary":
        data = path.read_bytes()
        if len(data) < _LABEL_HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, n, num_classes = _LABEL_HEADER.unpack_from(data)
        if magic != LABEL_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if len(data) != _LABEL_HEADER.size + 4 * n:
            raise DimensionMismatchError(f"{path}: header declares {n} labels, payload disagrees")
        y = np.frombuffer(data, dtype="<u4", offset=_LABEL_HEADER.size).astype(np.int64)
    elif format == "csv":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines:
            raise FormatError(f"{path}: empty label file")
        try:
            num_classes = int(lines[0])
            y = np.array([int(v) for v in lines[1:]], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
    else:
        raise ValueError(f"unknown format {format!r}")
    return as_label_vector(y, num_classes), int(num_classes)
