"""Datasets, synthetic modalities, splitting, client partitioning, and the CFLD file format."""

from __future__ import annotations

import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, PartitionError

MAGIC = b"CFLD"
FORMAT_VERSION = 1


class Dataset:
    """Immutable labelled sample set.

    ``ids`` give each sample an identity independent of its feature values,
    so partition checks can compare samples by identity. ``tags`` carry the
    modality name as metadata; training code never reads them.
    """

    __slots__ = ("features", "labels", "tags", "ids")

    def __init__(self, features, labels, tags=None, ids=None, input_dim: int | None = None):
        X = np.array(features, dtype=np.float64, copy=True)
        if X.ndim == 1 and X.size == 0:
            if input_dim is None:
                raise DimensionError("empty dataset needs an explicit input_dim")
            X = X.reshape(0, input_dim)
        if X.ndim != 2 or X.shape[1] == 0:
            raise DimensionError(f"features must be 2-D with positive width, got shape {X.shape}")
        if input_dim is not None and X.shape[1] != input_dim:
            raise DimensionError(f"features have width {X.shape[1]}, expected {input_dim}")
        n = X.shape[0]
        y = np.array(labels, dtype=np.int8, copy=True).reshape(-1)
        if y.size != n:
            raise DimensionError(f"{n} samples but {y.size} labels")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        t = np.array([""] * n if tags is None else list(tags), dtype=object).reshape(-1)
        if t.size != n:
            raise DimensionError(f"{n} samples but {t.size} tags")
        i = np.arange(n, dtype=np.int64) if ids is None else np.array(ids, dtype=np.int64).reshape(-1)
        if i.size != n:
            raise DimensionError(f"{n} samples but {i.size} ids")
        for arr in (X, y, t, i):
            arr.flags.writeable = False
        self.features, self.labels, self.tags, self.ids = X, y, t, i

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.size

    def __repr__(self) -> str:
        return (
            f"Dataset(n={len(self)}, input_dim={self.input_dim}, "
            f"positives={self.positives}, tags={sorted(set(self.tags))})"
        )

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    def class_counts(self) -> dict[int, int]:
        return {0: len(self) - self.positives, 1: self.positives}

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            self.features[index], self.labels[index], self.tags[index], self.ids[index],
            input_dim=self.input_dim,
        )

    def modalities(self) -> list[str]:
        """Distinct tags in first-appearance order."""
        seen: dict[str, None] = {}
        for tag in self.tags:
            seen.setdefault(tag, None)
        return list(seen)

    def by_modality(self, tag: str) -> Dataset:
        return self.subset(np.flatnonzero(self.tags == tag))


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    input_dim: int
    negative_mean: tuple[float, ...]
    positive_mean: tuple[float, ...]
    negative_scale: float = 1.0
    positive_scale: float = 1.0
    positive_count: int = 0
    negative_count: int = 0
    noise_seed: int = 0

    def __post_init__(self):
        for name in ("negative_mean", "positive_mean"):
            mean = tuple(float(v) for v in getattr(self, name))
            if len(mean) != self.input_dim:
                raise DimensionError(f"{name} has length {len(mean)}, expected {self.input_dim}")
            object.__setattr__(self, name, mean)
        if self.negative_scale <= 0 or self.positive_scale <= 0:
            raise ValueError("class scales must be positive")
        if self.positive_count < 0 or self.negative_count < 0:
            raise ValueError("class counts must be non-negative")


def generate_modality(spec: ModalitySpec) -> Dataset:
    """Draw class-conditional Gaussian samples; class blocks are then shuffled."""
    rng = np.random.default_rng(spec.noise_seed)
    d = spec.input_dim
    neg = np.asarray(spec.negative_mean) + spec.negative_scale * rng.standard_normal((spec.negative_count, d))
    pos = np.asarray(spec.positive_mean) + spec.positive_scale * rng.standard_normal((spec.positive_count, d))
    X = np.concatenate([neg, pos]).reshape(-1, d)
    y = np.concatenate([np.zeros(spec.negative_count), np.ones(spec.positive_count)])
    perm = rng.permutation(len(y))
    return Dataset(X[perm], y[perm], [spec.name] * len(y), input_dim=d)


def train_test_split(d: Dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; each class contributes round(count * test_fraction) test samples."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for label in (0, 1):
        members = np.flatnonzero(d.labels == label)
        if members.size == 0:
            continue
        n_test = round(members.size * test_fraction)
        if n_test == 0 or n_test == members.size:
            raise PartitionError(
                f"class {label} has {members.size} samples; too few to stratify at {test_fraction}"
            )
        perm = rng.permutation(members)
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    if not train_idx:
        raise PartitionError("cannot split an empty dataset")
    return d.subset(np.sort(np.concatenate(train_idx))), d.subset(np.sort(np.concatenate(test_idx)))


def partition_for_clients(train: Dataset, client_count: int, seed: int = 0) -> list[Dataset]:
    """Disjoint shards covering ``train``; per-class counts differ by at most one.

    Each class is shuffled and dealt round-robin. The dealing position carries
    over from one class to the next so shard sizes stay balanced as well.
    """
    if client_count < 1:
        raise PartitionError("client_count must be positive")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(client_count)]
    cursor = 0
    for label in (0, 1):
        members = np.flatnonzero(train.labels == label)
        if members.size == 0:
            continue
        if members.size < client_count:
            raise PartitionError(
                f"class {label} has {members.size} samples, fewer than {client_count} clients"
            )
        perm = rng.permutation(members)
        for c in range(client_count):
            buckets[(cursor + c) % client_count].append(perm[c::client_count])
        cursor = (cursor + members.size) % client_count
    if all(not b for b in buckets):
        raise PartitionError("cannot partition an empty dataset")
    return [train.subset(np.sort(np.concatenate(b))) for b in buckets]


def merge_test_sets(tests: Sequence[Dataset]) -> Dataset:
    if not tests:
        raise ValueError("nothing to merge")
    dim = tests[0].input_dim
    for t in tests:
        if t.input_dim != dim:
            raise DimensionError(f"cannot merge input_dim {t.input_dim} with {dim}")
    return Dataset(
        np.concatenate([t.features for t in tests]),
        np.concatenate([t.labels for t in tests]),
        np.concatenate([t.tags for t in tests]),
        np.concatenate([t.ids for t in tests]),
        input_dim=dim,
    )


# --- default bimodal benchmark ------------------------------------------------

# Totals before the 80/20 split, chosen so the split lands on the reference
# per-class train/test counts within one sample.
XRAY_COUNTS = {"positive": 223, "negative": 1341}
ULTRASOUND_COUNTS = {"positive": 399, "negative": 146}


def bimodal_specs(
    input_dim: int = 32,
    separation: float = 4.0,
    offset: float = 8.0,
    seed: int = 0,
) -> tuple[ModalitySpec, ModalitySpec]:
    """Two modalities whose class-separation directions are orthogonal.

    ``separation`` is the distance between class means; ``offset`` shifts the
    two modality centroids apart along a third axis.
    """
    if input_dim < 3:
        raise ValueError("bimodal benchmark needs input_dim >= 3")

    def means(axis: int, centre_sign: float):
        neg = np.zeros(input_dim)
        pos = np.zeros(input_dim)
        neg[axis] = -separation / 2
        pos[axis] = separation / 2
        neg[2] += centre_sign * offset / 2
        pos[2] += centre_sign * offset / 2
        return tuple(neg), tuple(pos)

    xn, xp = means(0, -1.0)
    un, up = means(1, 1.0)
    xray = ModalitySpec(
        "xray", input_dim, xn, xp,
        positive_count=XRAY_COUNTS["positive"], negative_count=XRAY_COUNTS["negative"],
        noise_seed=seed * 2 + 1,
    )
    ultrasound = ModalitySpec(
        "ultrasound", input_dim, un, up,
        positive_count=ULTRASOUND_COUNTS["positive"], negative_count=ULTRASOUND_COUNTS["negative"],
        noise_seed=seed * 2 + 2,
    )
    return xray, ultrasound


# --- CFLD binary format --------------------------------------------------------

_HEAD = struct.Struct("<4sIQI")


def _record_dtype(input_dim: int) -> np.dtype:
    return np.dtype([("tag", "<u2"), ("label", "u1"), ("x", "<f4", (input_dim,))])


def encode_dataset(d: Dataset) -> bytes:
    """Serialize as CFLD; features are stored as float32."""
    tags = d.modalities()
    if len(tags) > 0xFFFF:
        raise ValueError("too many distinct tags")
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(d), d.input_dim), struct.pack("<H", len(tags))]
    for tag in tags:
        raw = tag.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    lookup = {t: i for i, t in enumerate(tags)}
    rec = np.zeros(len(d), dtype=_record_dtype(d.input_dim))
    rec["tag"] = [lookup[t] for t in d.tags]
    rec["label"] = d.labels
    rec["x"] = d.features.astype(np.float32)
    parts.append(rec.tobytes())
    return b"".join(parts)


def decode_dataset(data: bytes) -> Dataset:
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", offset=0)
    if len(data) < _HEAD.size:
        raise FormatError("truncated header", offset=len(data))
    _, version, count, input_dim = _HEAD.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if count == 0:
        raise FormatError("dataset has no samples", offset=8)
    if input_dim == 0:
        raise FormatError("input_dim is zero", offset=16)
    pos = _HEAD.size
    if len(data) < pos + 2:
        raise FormatError("truncated tag table", offset=len(data))
    (ntags,) = struct.unpack_from("<H", data, pos)
    pos += 2
    tags = []
    for _ in range(ntags):
        if len(data) < pos + 2:
            raise FormatError("truncated tag table", offset=len(data))
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) < pos + length:
            raise FormatError("truncated tag string", offset=len(data))
        try:
            tags.append(data[pos : pos + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("tag is not valid UTF-8", offset=pos) from exc
        pos += length
    dtype = _record_dtype(input_dim)
    need = pos + count * dtype.itemsize
    if len(data) < need:
        complete = (len(data) - pos) // dtype.itemsize
        raise FormatError(
            f"truncated sample records: {complete} of {count} present",
            offset=pos + complete * dtype.itemsize,
        )
    if len(data) > need:
        raise FormatError(f"{len(data) - need} trailing bytes", offset=need)
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    bad_tag = np.flatnonzero(rec["tag"] >= ntags)
    if bad_tag.size:
        i = int(bad_tag[0])
        raise FormatError(
            f"sample {i} has tag index {int(rec['tag'][i])}, table has {ntags}",
            offset=pos + i * dtype.itemsize,
        )
    bad_label = np.flatnonzero(rec["label"] > 1)
    if bad_label.size:
        i = int(bad_label[0])
        raise FormatError(f"sample {i} has label {int(rec['label'][i])}", offset=pos + i * dtype.itemsize + 2)
    X = rec["x"].astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise FormatError("non-finite feature values", offset=pos)
    tag_arr = np.array(tags, dtype=object)[rec["tag"].astype(np.int64)] if ntags else None
    return Dataset(X, rec["label"], tag_arr, input_dim=input_dim)


def write_dataset(d: Dataset, destination: str | Path) -> None:
    Path(destination).write_bytes(encode_dataset(d))


def read_dataset(source: str | Path) -> Dataset:
    return decode_dataset(Path(source).read_bytes())
