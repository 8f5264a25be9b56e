"""Cached feature datasets: binary cache, CSV import/export, synthetic data, batching.

Cache layout (all little-endian)::

    offset  size    field
    0       4       magic b"DPHT"
    4       4       version (u32) = 1
    8       8       n (u64)
    16      4       d (u32)
    20      4       k (u32)
    24      4*n*d   features, float32, row-major
    ...     2*n     labels, u16
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"DPHT"
VERSION = 1
_HEADER = struct.Struct("<4sIQII")


class FormatError(ValueError):
    """Malformed cache file."""


class CsvParseError(ValueError):
    """Malformed CSV input; the message names the offending row."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureDataset:
    features: np.ndarray  # (n, d) float32
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError(f"features must be a nonempty 2-d array, got {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError("one label per feature row is required")
        if not np.isfinite(features).all():
            raise ValueError("features contain NaN or Inf")
        if not 1 <= self.num_classes <= 65536:
            raise ValueError(f"num_classes must be in [1, 65536], got {self.num_classes}")
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def k(self) -> int:
        return self.num_classes

    def subset(self, indices) -> "FeatureDataset":
        return FeatureDataset(self.features[indices], self.labels[indices], self.num_classes)

    def __eq__(self, other):
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


def write_cache(dataset: FeatureDataset, path) -> None:
    header = _HEADER.pack(MAGIC, VERSION, dataset.n, dataset.d, dataset.k)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.features.astype("<f4", copy=False).tobytes())
        fh.write(dataset.labels.astype("<u2").tobytes())


def read_cache(path) -> FeatureDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: file ends at byte {len(raw)}, need {_HEADER.size}")
    magic, version, n, d, k = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    feat_end = _HEADER.size + 4 * n * d
    label_end = feat_end + 2 * n
    if len(raw) < feat_end:
        raise FormatError(
            f"truncated feature payload: file ends at byte {len(raw)}, "
            f"header declares n={n}, d={d} ending at byte {feat_end}"
        )
    if len(raw) < label_end:
        raise FormatError(
            f"truncated label payload: file ends at byte {len(raw)}, expected {label_end}"
        )
    if len(raw) > label_end:
        raise FormatError(f"trailing data after byte {label_end}")
    features = np.frombuffer(raw, "<f4", n * d, _HEADER.size).reshape(n, d)
    labels = np.frombuffer(raw, "<u2", n, feat_end)
    try:
        return FeatureDataset(features.astype(np.float32), labels.astype(np.int64), k)
    except ValueError as exc:
        raise FormatError(f"invalid payload: {exc}") from None


def import_csv(
    path, label_column: int = -1, num_classes: int | None = None, header: bool = False
) -> FeatureDataset:
    """Read a numeric CSV with one integer label column.

    ``num_classes`` defaults to the largest label plus one.
    """
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise CsvParseError(f"row {lineno}: need a label and at least one feature")
            elif len(row) != width:
                raise CsvParseError(f"row {lineno}: expected {width} columns, got {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise CsvParseError(f"row {lineno}: non-numeric cell") from None
            label = values.pop(label_column)
            if label != int(label) or label < 0:
                raise CsvParseError(f"row {lineno}: label {label} is not a nonnegative integer")
            if num_classes is not None and label >= num_classes:
                raise CsvParseError(
                    f"row {lineno}: label {int(label)} out of range for {num_classes} classes"
                )
            if not np.isfinite(values).all():
                raise CsvParseError(f"row {lineno}: NaN or Inf feature")
            rows.append(values)
            labels.append(int(label))
    if not rows:
        raise CsvParseError("no data rows")
    k = num_classes if num_classes is not None else max(labels) + 1
    return FeatureDataset(np.array(rows, dtype=np.float32), np.array(labels), k)


def export_csv(dataset: FeatureDataset, path, header: bool = False) -> None:
    """Write features then the label as the last column.

    float32 values are written with 9 significant digits, which round-trips.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"f{j}" for j in range(dataset.d)] + ["label"])
        for f, y in zip(dataset.features, dataset.labels):
            writer.writerow([f"{v:.9g}" for v in f] + [int(y)])


def _class_means(d: int, k: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    # orthonormal directions from a random rotation; beyond d classes reuse
    # the negated directions (k <= 2d)
    if k > 2 * d:
        raise ValueError(f"need k <= 2d classes, got k={k}, d={d}")
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q = q * np.sign(np.diag(r))
    dirs = np.concatenate([q.T, -q.T])[:k]
    return separation * dirs


def gen_synthetic(
    n: int,
    d: int,
    k: int,
    separation: float = 4.0,
    noise_std: float = 1.0,
    seed: int = 0,
    sample_seed: int | None = None,
) -> FeatureDataset:
    """Gaussian class clusters around orthogonal means of norm ``separation``.

    ``seed`` fixes the class means; ``sample_seed`` (default ``seed``) fixes
    the labels and noise, so a held-out split can share the means.
    """
    means = _class_means(d, k, separation, np.random.default_rng(seed))
    rng = np.random.default_rng([seed, 1] if sample_seed is None else [seed, 2, sample_seed])
    labels = rng.integers(0, k, size=n)
    features = means[labels] + noise_std * rng.standard_normal((n, d))
    return FeatureDataset(features.astype(np.float32), labels, k)


class BatchSelector:
    """Stateful batch index generator.

    Modes:
      * ``poisson``: each index joins independently with probability ``q``.
      * ``shuffle``: consecutive blocks of ``batch_size`` from a fresh
        permutation per epoch; the remainder of each permutation is dropped.
      * ``full``: every index, in order.
    """

    def __init__(self, mode: str, n: int, *, q: float | None = None,
                 batch_size: int | None = None, seed: int = 0):
        if mode not in ("poisson", "shuffle", "full"):
            raise ConfigError(f"unknown batch mode {mode!r}")
        if n < 1:
            raise ConfigError("dataset must be nonempty")
        self.mode = mode
        self.n = n
        self.rng = np.random.default_rng(seed)
        if mode == "poisson":
            if q is None or not 0 < q <= 1:
                raise ConfigError(f"poisson mode needs q in (0, 1], got {q}")
            self.q = float(q)
        elif mode == "shuffle":
            if batch_size is None or not 1 <= batch_size <= n:
                raise ConfigError(f"shuffle mode needs 1 <= batch_size <= n={n}, got {batch_size}")
            self.batch_size = int(batch_size)
            self._perm = None
            self._pos = 0
        else:
            self.batch_size = n

    @property
    def sampling_rate(self) -> float:
        if self.mode == "poisson":
            return self.q
        return self.batch_size / self.n

    @property
    def steps_per_epoch(self) -> int:
        if self.mode == "poisson":
            return max(1, round(1.0 / self.q))
        return self.n // self.batch_size

    @property
    def expected_batch_size(self) -> float:
        return self.sampling_rate * self.n

    def next_batch(self) -> np.ndarray:
        if self.mode == "full":
            return np.arange(self.n)
        if self.mode == "poisson":
            return np.flatnonzero(self.rng.random(self.n) < self.q)
        if self._perm is None or self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


def next_batch(selector: BatchSelector, dataset: FeatureDataset | None = None) -> np.ndarray:
    if dataset is not None and dataset.n != selector.n:
        raise ConfigError(f"selector built for n={selector.n}, dataset has n={dataset.n}")
    return selector.next_batch()
