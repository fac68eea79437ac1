"""Loading, PCA preprocessing and export of embeddings.

On-disk layouts
---------------
csv      comma separated, optional single header row, ``.`` decimals.
raw_f32  ``b"CNE0"`` + n (u32 LE) + D (u32 LE) + reserved u32 (0), then
         n*D little-endian float32 values, row-major.
idx      MNIST IDX3 images / IDX1 labels, big-endian headers.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, DegenerateInputError, FormatError, ValidationError

RAW_MAGIC = b"CNE0"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# matplotlib "tab10"
PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


@dataclass
class DataMatrix:
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"expected a non-empty 2-D matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("matrix contains NaN or Inf")
        self.values = values
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (values.shape[0],):
                raise ValidationError(
                    f"labels must have length {values.shape[0]}, got shape {labels.shape}")
            self.labels = labels

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass
class ExportRecord:
    embedding: np.ndarray
    labels: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def _read_csv(path: Path, header: bool):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if header and lines:
        lines = lines[1:]
    rows = []
    width = None
    for lineno, line in enumerate(lines, start=2 if header else 1):
        if not line.strip():
            continue
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ValidationError(f"{path}:{lineno}: expected {width} columns, got {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def read_idx(path) -> np.ndarray:
    """Read an IDX file (any dimensionality, unsigned-byte payload)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code != 0x08 or ndim < 1:
        raise FormatError(f"{path}: unsupported IDX magic {data[:4].hex()}")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, data[4:header_len])
    count = int(np.prod(dims))
    if len(data) - header_len != count:
        raise FormatError(f"{path}: expected {count} payload bytes, got {len(data) - header_len}")
    return np.frombuffer(data, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx_labels(path) -> np.ndarray:
    arr = read_idx(path)
    if arr.ndim != 1:
        raise FormatError(f"{path}: label file must be one-dimensional")
    return arr.astype(np.int64)


def _read_raw_f32(path: Path):
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: missing CNE0 header")
    n, D, reserved = struct.unpack("<III", data[4:16])
    if reserved != 0:
        raise FormatError(f"{path}: reserved header field must be zero")
    if len(data) - 16 != 4 * n * D:
        raise FormatError(f"{path}: expected {n}x{D} float32 payload")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(n, D).astype(np.float64)


def load_matrix(path, format: str = "csv", header: bool = False, labels=None) -> DataMatrix:
    """Load a data matrix from ``csv``, ``raw_f32`` or ``idx``.

    IDX pixel bytes are divided by 255.  ``labels`` may be an array or a path
    to an IDX1 label file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    if format == "csv":
        values = _read_csv(path, header)
    elif format == "raw_f32":
        values = _read_raw_f32(path)
    elif format == "idx":
        arr = read_idx(path)
        if arr.ndim < 2:
            raise FormatError(f"{path}: IDX image file needs at least two dimensions")
        values = arr.reshape(arr.shape[0], -1).astype(np.float64) / 255.0
    else:
        raise ArgumentError(f"unknown format {format!r}")
    if isinstance(labels, (str, Path)):
        labels = load_idx_labels(labels)
    return DataMatrix(values, labels)


def save_raw_f32(path, values) -> None:
    values = np.asarray(values)
    n, D = values.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", n, D, 0))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


# --------------------------------------------------------------------------
# PCA
# --------------------------------------------------------------------------

def _principal_axes(values):
    """Eigenvectors of the covariance, descending variance, sign-normalized."""
    centered = values - values.mean(axis=0)
    cov = centered.T @ centered / values.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    # largest-magnitude loading of every component is positive
    pivot = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[pivot, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return centered, np.clip(evals, 0.0, None), evecs * signs


def pca_reduce(X: DataMatrix, dims: int) -> DataMatrix:
    if not 1 <= dims <= min(X.n, X.D):
        raise ArgumentError(f"dims must lie in [1, {min(X.n, X.D)}], got {dims}")
    centered, _, axes = _principal_axes(X.values)
    return DataMatrix(centered @ axes[:, :dims], X.labels)


def pca_init(X: DataMatrix, d: int = 2, target_std: float = 1.0) -> np.ndarray:
    """PCA coordinates rescaled so that column 0 has (population) std ``target_std``."""
    if not 1 <= d <= X.D:
        raise ArgumentError(f"d must lie in [1, {X.D}], got {d}")
    centered, _, axes = _principal_axes(X.values)
    scores = centered @ axes[:, :d]
    std = scores[:, 0].std()
    scale = np.abs(centered).max() if centered.size else 0.0
    if not std > 1e-12 * max(scale, 1e-300):
        raise DegenerateInputError("first principal component has zero variance")
    return scores * (target_std / std)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_csv(path, values, labels=None, header=None) -> None:
    values = np.asarray(values, dtype=np.float64)
    lines = []
    if header:
        lines.append(",".join(header))
    for i, row in enumerate(values):
        cells = [_fmt(v) for v in row]
        if labels is not None:
            cells.append(str(int(labels[i])))
        lines.append(",".join(cells))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(path, obj: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def render_svg(embedding, labels=None, size: int = 800, margin: float = 0.05) -> str:
    emb = np.asarray(embedding, dtype=np.float64)
    lo, hi = emb.min(axis=0), emb.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    inner = size * (1.0 - 2.0 * margin)
    x = size * margin + (emb[:, 0] - lo[0]) / span[0] * inner
    y = size * margin + (hi[1] - emb[:, 1]) / span[1] * inner  # y axis points up
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for i in range(emb.shape[0]):
        color = PALETTE[int(labels[i]) % len(PALETTE)] if labels is not None else PALETTE[0]
        parts.append(f'<circle cx="{x[i]:.3f}" cy="{y[i]:.3f}" r="2" fill="{color}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def export(record: ExportRecord, format: str, path, header: bool = False) -> None:
    emb = np.asarray(record.embedding, dtype=np.float64)
    if format == "csv":
        cols = None
        if header:
            cols = [f"x{i}" for i in range(emb.shape[1])]
            if record.labels is not None:
                cols.append("label")
        write_csv(path, emb, record.labels, cols)
    elif format == "svg":
        if emb.ndim != 2 or emb.shape[1] != 2:
            raise ArgumentError("SVG export needs a 2-D embedding")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(render_svg(emb, record.labels))
    elif format == "json":
        payload = dict(record.metadata)
        payload["embedding"] = emb.tolist()
        if record.labels is not None:
            payload["labels"] = [int(v) for v in record.labels]
        write_json(path, payload)
    else:
        raise ArgumentError(f"unknown export format {format!r}")


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def make_blobs(n: int = 1000, dim: int = 10, n_blobs: int = 5, spread: float = 5.0,
               seed: int = 0) -> DataMatrix:
    """Isotropic unit-variance Gaussian blobs around ``N(0, spread^2)`` centers."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=spread, size=(n_blobs, dim))
    labels = np.arange(n) % n_blobs
    values = centers[labels] + rng.normal(size=(n, dim))
    return DataMatrix(values, labels)
