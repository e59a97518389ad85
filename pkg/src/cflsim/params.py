"""Flat parameter vectors: the unit exchanged between clients and the server."""

from __future__ import annotations

import math
import struct
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

from .errors import DegenerateAggregationError, DimensionError, FormatError, NumericError

MAGIC = b"CFLW"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class ParameterVector:
    """Immutable, finite, 1-D float64 weight vector."""

    __slots__ = ("_values",)

    def __init__(self, values: Iterable[float] | np.ndarray):
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if arr.size == 0:
            raise DimensionError("parameter vector must have length > 0")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise NumericError(f"non-finite parameter at index {bad}: {arr[bad]!r}")
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._values

    def __len__(self) -> int:
        return self._values.size

    def __iter__(self):
        return iter(self._values.tolist())

    def __getitem__(self, idx):
        return self._values[idx]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return len(self) == len(other) and bool(np.array_equal(self._values, other._values))

    def __hash__(self) -> int:
        return hash(self._values.tobytes())

    def __repr__(self) -> str:
        head = ", ".join(f"{v:.6g}" for v in self._values[:6])
        more = ", ..." if len(self) > 6 else ""
        return f"ParameterVector([{head}{more}], length={len(self)})"

    def to_numpy(self) -> np.ndarray:
        """Writable copy."""
        return self._values.copy()

    def __add__(self, other: ParameterVector) -> ParameterVector:
        _check_same_length([self, other])
        return ParameterVector(self._values + other._values)

    def __sub__(self, other: ParameterVector) -> ParameterVector:
        _check_same_length([self, other])
        return ParameterVector(self._values - other._values)

    def scale(self, factor: float) -> ParameterVector:
        return ParameterVector(self._values * float(factor))


def _check_same_length(vectors: Sequence[ParameterVector]) -> int:
    n = len(vectors[0])
    for i, v in enumerate(vectors):
        if len(v) != n:
            raise DimensionError(f"vector {i} has length {len(v)}, expected {n}")
    return n


_SPLITTER = 134217729.0  # 2**27 + 1, splits a double into two 26-bit halves
# beyond these magnitudes the error-free product below can overflow or underflow
_SAFE_MAX = 2.0**480
_SAFE_MIN = 2.0**-480


def _two_product(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``a * b == p + e`` exactly (Dekker), element-wise."""
    p = a * b

    def split(x):
        c = _SPLITTER * x
        hi = c - (c - x)
        return hi, x - hi

    ah, al = split(a)
    bh, bl = split(b)
    e = ((ah * bh - p) + ah * bl + al * bh) + al * bl
    return p, e


def _in_safe_range(x: np.ndarray) -> bool:
    mag = np.abs(x[x != 0.0])
    return mag.size == 0 or (mag.max() < _SAFE_MAX and mag.min() > _SAFE_MIN)


def _exact_quotients(stack: np.ndarray, weights: list[float]) -> np.ndarray:
    from fractions import Fraction

    total = sum(Fraction(w) for w in weights)
    return np.array(
        [float(sum(Fraction(w) * Fraction(float(x)) for w, x in zip(weights, col)) / total) for col in stack.T]
    )


def weighted_mean(
    vectors: Sequence[ParameterVector], weights: Sequence[float]
) -> ParameterVector:
    """Element-wise sum(w_i * v_i) / sum(w_i), rounded from the exact value.

    Products are split error-free and summed with ``math.fsum``; one
    residual correction then brings the quotient to within a hair of correct
    rounding. The result does not depend on the order of the inputs, copies
    of ``v`` give back ``v`` bit-exactly, and equal weights of any size give
    the plain mean bit-exactly.
    """
    if len(vectors) == 0:
        raise DimensionError("weighted_mean needs at least one vector")
    if len(weights) != len(vectors):
        raise DimensionError(f"got {len(weights)} weights for {len(vectors)} vectors")
    _check_same_length(vectors)
    ws = []
    for i, w in enumerate(weights):
        w = float(w)
        if not math.isfinite(w):
            raise NumericError(f"weight {i} is not finite: {w!r}")
        if w < 0:
            raise ValueError(f"weight {i} is negative: {w!r}")
        ws.append(w)
    try:
        total = math.fsum(ws)
    except OverflowError:
        raise NumericError("aggregation weights overflow") from None
    if not math.isfinite(total):
        raise NumericError("aggregation weights overflow")
    if total <= 0.0:
        raise DegenerateAggregationError("aggregation weights sum to zero")

    stack = np.stack([v.values for v in vectors])
    w_col = np.array(ws)[:, None]
    if not (_in_safe_range(stack) and _in_safe_range(w_col)):
        return ParameterVector(_exact_quotients(stack, ws))
    p, e = _two_product(w_col, stack)
    terms = np.concatenate([p, e])
    numerator = np.array([math.fsum(col) for col in terms.T])
    q0 = numerator / total
    # residual numerator - q0 * total, computed exactly and rounded once
    qp, qe = _two_product(w_col, np.broadcast_to(q0, stack.shape))
    residual = np.array([math.fsum(col) for col in np.concatenate([terms, -qp, -qe]).T])
    out = q0 + residual / total
    if not np.all(np.isfinite(out)):
        raise NumericError("aggregation produced non-finite values")
    return ParameterVector(out)


def mean(vectors: Sequence[ParameterVector]) -> ParameterVector:
    return weighted_mean(vectors, [1.0] * len(vectors))


def serialize(v: ParameterVector) -> bytes:
    """Encode as ``CFLW`` | u32 version | u64 length | float64 LE values."""
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(v)) + v.values.astype("<f8").tobytes()


def deserialize(data: bytes) -> ParameterVector:
    if len(data) < _HEADER.size:
        raise FormatError(f"truncated header: {len(data)} of {_HEADER.size} bytes", offset=len(data))
    magic, version, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    if length == 0:
        raise FormatError("zero-length vector", offset=8)
    expected = _HEADER.size + 8 * length
    if len(data) < expected:
        # report where the first incomplete value word starts
        complete = (len(data) - _HEADER.size) // 8
        raise FormatError(
            f"truncated payload: {complete} of {length} values present",
            offset=_HEADER.size + 8 * complete,
        )
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes", offset=expected)
    values = np.frombuffer(data, dtype="<f8", count=length, offset=_HEADER.size)
    try:
        return ParameterVector(values.astype(np.float64))
    except NumericError as exc:
        raise FormatError(f"payload contains non-finite values ({exc})", offset=_HEADER.size) from exc


def save(v: ParameterVector, path: str | Path) -> None:
    Path(path).write_bytes(serialize(v))


def load(path: str | Path) -> ParameterVector:
    return deserialize(Path(path).read_bytes())
