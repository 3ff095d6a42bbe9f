"""Dataset loading, validation, and feature standardization.

A dataset is a gallery of identity-labeled images together with one or more
feature channels. Vector channels store an aligned N x dim matrix (row r is
the feature of image r); precomputed-distance channels store, per registered
probe, an N-vector of distances to every gallery item.

On-disk layout:
  manifest.json   {"images": [{"id", "person"}, ...],
                   "channels": [{"name", "kind", "dim", "metric",
                                 "standardize", "file"}, ...]}
  <channel>.csv   vector channel: no header, one row per image, manifest order
  <channel>.csv   precomputed channel: one row per probe,
                  first column probe_id, then N distances in gallery order
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VECTOR = "vector"
PRECOMPUTED = "precomputed_distance"
EUCLIDEAN = "euclidean"
BHATTACHARYYA = "bhattacharyya"

HISTOGRAM_TOL = 1e-6
DEGENERATE_STD = 1e-12

# Shortest round-tripping decimal representation for float64.
FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    person_id: str

    def __post_init__(self):
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not self.person_id:
            raise ValueError(f"image '{self.image_id}': person_id must be non-empty")


@dataclass(frozen=True)
class ChannelSpec:
    """Declares one feature channel.

    Vector channels carry dim, metric and the standardize flag; precomputed
    distance channels carry neither (they are usable in unary costs only).
    """

    name: str
    kind: str
    dim: int | None = None
    metric: str | None = None
    standardize: bool = False

    def __post_init__(self):
        if self.kind not in (VECTOR, PRECOMPUTED):
            raise ValueError(f"channel '{self.name}': unknown kind '{self.kind}'")
        if self.kind == VECTOR:
            if self.dim is None or self.dim < 1:
                raise ValueError(f"channel '{self.name}': dim must be a positive integer")
            if self.metric not in (EUCLIDEAN, BHATTACHARYYA):
                raise ValueError(f"channel '{self.name}': unknown metric '{self.metric}'")
            if self.metric == BHATTACHARYYA and self.standardize:
                # Standardized vectors are no longer histograms.
                raise ValueError(
                    f"channel '{self.name}': standardize is not allowed with the "
                    "bhattacharyya metric"
                )
        else:
            if self.dim is not None or self.metric is not None or self.standardize:
                raise ValueError(
                    f"channel '{self.name}': dim/metric/standardize apply to vector "
                    "channels only"
                )


@dataclass(frozen=True)
class StandardizationStats:
    """Per-dimension gallery mean and standard deviation (population)."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        # Degenerate dimensions are centered but never scaled.
        return np.where(self.std < DEGENERATE_STD, 1.0, self.std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.scale


def compute_stats(matrix: np.ndarray) -> StandardizationStats:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape[0] < 2:
        raise ValueError("standardization requires at least 2 gallery rows")
    return StandardizationStats(mean=matrix.mean(axis=0), std=matrix.std(axis=0))


def standardize_channel(matrix: np.ndarray, probe_vector: np.ndarray):
    """Standardize a gallery matrix to zero mean / unit sd per dimension.

    The probe vector is transformed with the gallery statistics; it never
    contributes to them. Dimensions whose gallery sd is below 1e-12 are
    centered but left unscaled.
    """
    stats = compute_stats(matrix)
    return stats.transform(np.asarray(matrix, dtype=np.float64)), stats.transform(
        np.asarray(probe_vector, dtype=np.float64)
    )


@dataclass(frozen=True)
class ProbeQuery:
    """A query record: per-channel feature vectors plus, for precomputed
    distance channels, an N-vector of distances to every gallery item."""

    probe_id: str
    vectors: dict = field(default_factory=dict)
    precomputed: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Immutable after construction; safe for concurrent readers.

    matrices hold the raw (unstandardized) channel data; stats hold the
    gallery standardization statistics for channels flagged standardize.
    """

    images: list
    channels: list
    matrices: dict
    distance_columns: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for rec in self.images:
            if rec.image_id in seen:
                raise ValueError(f"duplicate image id '{rec.image_id}'")
            seen.add(rec.image_id)
        self._index = {rec.image_id: i for i, rec in enumerate(self.images)}
        self._by_name = {ch.name: ch for ch in self.channels}
        for ch in self.channels:
            if ch.kind == VECTOR:
                validate_matrix(ch, self.matrices[ch.name], len(self.images))
                if ch.standardize and ch.name not in self.stats:
                    self.stats[ch.name] = compute_stats(self.matrices[ch.name])

    @property
    def n(self) -> int:
        return len(self.images)

    def channel(self, name: str) -> ChannelSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise ValueError(f"unknown channel '{name}'") from None

    def index_of(self, image_id: str) -> int:
        try:
            return self._index[image_id]
        except KeyError:
            raise ValueError(f"unknown image id '{image_id}'") from None

    def persons(self) -> list:
        out, seen = [], set()
        for rec in self.images:
            if rec.person_id not in seen:
                seen.add(rec.person_id)
                out.append(rec.person_id)
        return out

    def matrix(self, name: str) -> np.ndarray:
        """Raw feature matrix of a vector channel."""
        ch = self.channel(name)
        if ch.kind != VECTOR:
            raise ValueError(f"channel '{name}' is not a vector channel")
        return self.matrices[name]

    def kernel_matrix(self, name: str) -> np.ndarray:
        """Feature representation used for kernels and filtering:
        standardized when the channel is flagged, raw otherwise."""
        mat = self.matrix(name)
        if self.channel(name).standardize:
            return self.stats[name].transform(mat)
        return mat

    def transform_probe(self, name: str, vec: np.ndarray) -> np.ndarray:
        """Apply the gallery's standardization (if flagged) to a probe vector."""
        vec = np.asarray(vec, dtype=np.float64)
        ch = self.channel(name)
        if vec.shape != (ch.dim,):
            raise ValueError(
                f"channel '{name}': probe vector has shape {vec.shape}, expected ({ch.dim},)"
            )
        if ch.standardize:
            return self.stats[name].transform(vec)
        return vec

    def subset(self, indices) -> "Dataset":
        """Row-subset view sharing channel specs and standardization stats.

        Statistics are inherited from this dataset, not recomputed, so a
        subset gallery lives in the same standardized space as its parent.
        """
        indices = np.asarray(indices, dtype=int)
        images = [self.images[i] for i in indices]
        matrices = {name: mat[indices] for name, mat in self.matrices.items()}
        columns = {
            name: {pid: col[indices] for pid, col in cols.items()}
            for name, cols in self.distance_columns.items()
        }
        return Dataset(
            images=images,
            channels=self.channels,
            matrices=matrices,
            distance_columns=columns,
            stats=dict(self.stats),
        )


def validate_matrix(ch: ChannelSpec, matrix: np.ndarray, n_images: int) -> None:
    if matrix.ndim != 2:
        raise ValueError(f"channel '{ch.name}': matrix must be 2-dimensional")
    if matrix.shape[0] != n_images:
        raise ValueError(
            f"channel '{ch.name}': row count mismatch "
            f"(matrix has {matrix.shape[0]} rows, manifest lists {n_images} images)"
        )
    if matrix.shape[1] != ch.dim:
        raise ValueError(
            f"channel '{ch.name}': expected dim {ch.dim}, matrix has {matrix.shape[1]} columns"
        )
    finite = np.isfinite(matrix).all(axis=1)
    if not finite.all():
        row = int(np.nonzero(~finite)[0][0])
        raise ValueError(f"channel '{ch.name}' row {row}: non-finite value")
    if ch.metric == BHATTACHARYYA:
        neg = (matrix < 0).any(axis=1)
        if neg.any():
            row = int(np.nonzero(neg)[0][0])
            raise ValueError(f"channel '{ch.name}' row {row}: negative histogram entry")
        sums = matrix.sum(axis=1)
        bad = np.abs(sums - 1.0) > HISTOGRAM_TOL
        if bad.any():
            row = int(np.nonzero(bad)[0][0])
            raise ValueError(
                f"channel '{ch.name}' row {row}: histogram not normalized "
                f"(sum {sums[row]:.6g})"
            )


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset from its JSON manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ValueError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    images = [ImageRecord(entry["id"], entry["person"]) for entry in manifest["images"]]
    base = manifest_path.parent

    channels, matrices, distance_columns = [], {}, {}
    for entry in manifest["channels"]:
        ch = ChannelSpec(
            name=entry["name"],
            kind=entry["kind"],
            dim=entry.get("dim"),
            metric=entry.get("metric"),
            standardize=bool(entry.get("standardize", False)),
        )
        channels.append(ch)
        path = base / entry["file"]
        if not path.is_file():
            raise ValueError(f"channel '{ch.name}': file not found: {path}")
        if ch.kind == VECTOR:
            matrices[ch.name] = _load_matrix(path)
        else:
            distance_columns[ch.name] = _load_distance_columns(ch, path, len(images))

    return Dataset(
        images=images,
        channels=channels,
        matrices=matrices,
        distance_columns=distance_columns,
    )


def _load_matrix(path: Path) -> np.ndarray:
    try:
        return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValueError(f"failed to parse matrix file {path}: {exc}") from None


def _load_distance_columns(ch: ChannelSpec, path: Path, n: int) -> dict:
    columns = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            probe_id = row[0]
            values = np.array([float(v) for v in row[1:]], dtype=np.float64)
            if values.shape[0] != n:
                raise ValueError(
                    f"channel '{ch.name}' probe '{probe_id}': expected {n} distances, "
                    f"got {values.shape[0]}"
                )
            if not np.isfinite(values).all():
                raise ValueError(
                    f"channel '{ch.name}' probe '{probe_id}': non-finite distance"
                )
            if (values < 0).any():
                raise ValueError(
                    f"channel '{ch.name}' probe '{probe_id}': negative distance"
                )
            if probe_id in columns:
                raise ValueError(
                    f"channel '{ch.name}' line {lineno}: duplicate probe '{probe_id}'"
                )
            columns[probe_id] = values
    return columns


def save_dataset(dataset: Dataset, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write a dataset to out_dir; returns the manifest path.

    Matrices are written with a round-tripping decimal format, so a
    save/load cycle reproduces them bit for bit.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ch in dataset.channels:
        fname = f"{ch.name}.csv"
        entry = {"name": ch.name, "kind": ch.kind, "file": fname}
        if ch.kind == VECTOR:
            entry.update(dim=ch.dim, metric=ch.metric, standardize=ch.standardize)
            np.savetxt(out_dir / fname, dataset.matrices[ch.name], fmt=FLOAT_FMT, delimiter=",")
        else:
            with open(out_dir / fname, "w", newline="") as fh:
                writer = csv.writer(fh)
                for pid in sorted(dataset.distance_columns[ch.name]):
                    col = dataset.distance_columns[ch.name][pid]
                    writer.writerow([pid] + [FLOAT_FMT % v for v in col])
        entries.append(entry)
    manifest = {
        "images": [{"id": r.image_id, "person": r.person_id} for r in dataset.images],
        "channels": entries,
    }
    manifest_path = out_dir / manifest_name
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
