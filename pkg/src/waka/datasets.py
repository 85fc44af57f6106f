"""Labeled feature-vector datasets: ingestion, serialization, synthetic generators.

A :class:`Dataset` holds an immutable ``(N, d)`` matrix of feature vectors and
``N`` integer class labels normalized to the dense range ``{0..C-1}``. The
original label values are kept in ``label_map`` so reports can translate back.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError

BINARY_MAGIC = b"WAKA"


@dataclass(eq=False)
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    ids: np.ndarray | None = None
    label_map: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2:
            raise ValidationError("points must be a 2-d array of shape (N, d)")
        n, d = self.points.shape
        if n < 1 or d < 1:
            raise ValidationError(f"dataset must have N >= 1 and d >= 1, got N={n}, d={d}")
        if self.labels.shape != (n,):
            raise ValidationError(
                f"labels length {self.labels.shape} does not match N={n}"
            )
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("feature coordinates must all be finite")
        if self.labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        # Loaders and generators emit the dense range {0..C-1}; subsets keep
        # the parent's label space, so a class may be absent here.
        uniq = np.unique(self.labels)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
            if self.ids.shape != (n,):
                raise ValidationError("ids length does not match N")
        if not self.label_map:
            self.label_map = {int(c): int(c) for c in uniq}
        for arr in (self.points, self.labels, self.ids):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, indices) -> "Dataset":
        """View of the rows at ``indices`` (order preserved, ids carried over)."""
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            points=self.points[indices],
            labels=self.labels[indices],
            ids=self.ids[indices],
            label_map=dict(self.label_map),
        )


def _remap_labels(raw_labels: np.ndarray) -> tuple[np.ndarray, dict[int, int]]:
    uniq = np.unique(raw_labels)
    mapping = {int(orig): pos for pos, orig in enumerate(uniq)}
    dense = np.searchsorted(uniq, raw_labels)
    return dense.astype(np.int64), mapping


def _load_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    rows: list[list[float]] = []
    raw_labels: list[int] = []
    dim = None
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.split(",")
            if lineno == 1:
                # Optional header: first token not parseable as a number.
                try:
                    float(tokens[0])
                except ValueError:
                    continue
            try:
                label = int(tokens[0])
            except ValueError as exc:
                raise ParseError(f"label {tokens[0]!r} is not an integer", line=lineno) from exc
            try:
                feats = [float(t) for t in tokens[1:]]
            except ValueError as exc:
                raise ParseError(f"malformed feature value ({exc})", line=lineno) from exc
            if not feats:
                raise ParseError("row has a label but no features", line=lineno)
            if dim is None:
                dim = len(feats)
            elif len(feats) != dim:
                raise ValidationError(
                    f"line {lineno}: row has {len(feats)} features, expected {dim}"
                )
            if label < 0:
                raise ParseError(f"label {label} is negative", line=lineno)
            raw_labels.append(label)
            rows.append(feats)
    if not rows:
        raise ValidationError(f"{path}: no data rows (N >= 1 required)")
    return np.array(rows, dtype=np.float64), np.array(raw_labels, dtype=np.int64)


def _load_binary(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as handle:
        header = handle.read(16)
        if len(header) < 16:
            raise ValidationError(f"{path}: truncated header (N >= 1 required)")
        magic, n, d, n_classes = struct.unpack("<4sIII", header)
        if magic != BINARY_MAGIC:
            raise ParseError(f"bad magic {magic!r}, expected {BINARY_MAGIC!r}")
        if n < 1 or d < 1:
            raise ValidationError(f"header declares N={n}, d={d}; both must be >= 1")
        record = np.dtype([("label", "<u4"), ("features", "<f8", (d,))])
        payload = handle.read()
    records = np.frombuffer(payload, dtype=record)
    if records.shape[0] != n:
        raise ParseError(
            f"payload holds {records.shape[0]} records, header declares {n}",
            line=records.shape[0] + 1,
        )
    labels = records["label"].astype(np.int64)
    if len(np.unique(labels)) > n_classes:
        raise ValidationError(
            f"payload uses more label values than the declared C={n_classes}"
        )
    return records["features"].astype(np.float64).reshape(n, d), labels


def load_dataset(path: str, format: str = "csv") -> Dataset:
    """Load a labeled dataset from ``path``.

    ``csv`` rows are ``label,f0,...,f{d-1}`` with an optional single header
    line; ``raw-binary`` is the little-endian record format written by
    :func:`save_dataset`. Labels are remapped onto ``{0..C-1}`` and the
    original values retained in ``Dataset.label_map``.
    """
    if format == "csv":
        points, raw = _load_csv(path)
    elif format in ("raw-binary", "binary"):
        points, raw = _load_binary(path)
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    if not np.all(np.isfinite(points)):
        bad = int(np.argwhere(~np.isfinite(points).all(axis=1))[0][0])
        raise ValidationError(f"non-finite feature value in record {bad + 1}")
    labels, mapping = _remap_labels(raw)
    return Dataset(points=points, labels=labels, label_map=mapping)


def save_dataset(dataset: Dataset, path: str, format: str = "csv") -> None:
    """Write ``dataset`` in one of the two interchange formats."""
    if format == "csv":
        with open(path, "w", encoding="utf-8") as handle:
            for label, row in zip(dataset.labels, dataset.points):
                feats = ",".join(repr(float(v)) for v in row)
                handle.write(f"{int(label)},{feats}\n")
    elif format in ("raw-binary", "binary"):
        buf = io.BytesIO()
        buf.write(
            struct.pack("<4sIII", BINARY_MAGIC, dataset.n, dataset.dim, dataset.n_classes)
        )
        for label, row in zip(dataset.labels, dataset.points):
            buf.write(struct.pack("<I", int(label)))
            buf.write(np.asarray(row, dtype="<f8").tobytes())
        with open(path, "wb") as handle:
            handle.write(buf.getvalue())
    else:
        raise ValueError(f"unknown dataset format {format!r}")


def _class_sizes(n: int, minority_fraction: float) -> tuple[int, int]:
    if not 0.0 < minority_fraction <= 0.5:
        raise ValueError(
            f"minority_fraction must lie in (0, 0.5], got {minority_fraction}"
        )
    n_minority = int(round(minority_fraction * n))
    n_minority = max(1, n_minority)
    return n - n_minority, n_minority


def generate_synthetic(
    kind: str,
    n: int,
    minority_fraction: float = 0.5,
    noise: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Deterministic 2-d synthetic datasets for experiments and tests.

    ``two-moons`` interleaves two unit half-circles (class 0 on a half-circle
    centered at the origin, class 1 on a flipped half-circle shifted to
    ``(1, 0.5)``) and perturbs both with isotropic Gaussian noise of standard
    deviation ``noise``. ``gaussian-blobs`` draws each class from an isotropic
    Gaussian (centers 2 apart, standard deviation ``noise``). Class 1 is the
    minority class with ``round(minority_fraction * n)`` points.
    """
    if n < 4:
        raise ValueError(f"n must be >= 4, got {n}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    n_major, n_minor = _class_sizes(n, minority_fraction)
    rng = np.random.default_rng(seed)
    if kind == "two-moons":
        t0 = np.linspace(0.0, np.pi, n_major)
        t1 = np.linspace(0.0, np.pi, n_minor)
        outer = np.column_stack([np.cos(t0), np.sin(t0)])
        inner = np.column_stack([1.0 - np.cos(t1), 1.0 - np.sin(t1) - 0.5])
        points = np.vstack([outer, inner])
    elif kind == "gaussian-blobs":
        centers = np.array([[0.0, 0.0], [2.0, 0.0]])
        points = np.vstack(
            [
                np.broadcast_to(centers[0], (n_major, 2)).copy(),
                np.broadcast_to(centers[1], (n_minor, 2)).copy(),
            ]
        )
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if noise > 0 or kind == "gaussian-blobs":
        points = points + rng.normal(scale=max(noise, 0.0), size=points.shape)
    labels = np.concatenate(
        [np.zeros(n_major, dtype=np.int64), np.ones(n_minor, dtype=np.int64)]
    )
    return Dataset(points=points, labels=labels)
