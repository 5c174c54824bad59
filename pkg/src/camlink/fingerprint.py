"""Camera fingerprints: weighted residual averaging, Pearson correlation, UCIF files.

A fingerprint is estimated per pixel as ``sum(I * R) / sum(I ** 2)`` over the
images of one putative camera. The sums live in a :class:`WeightedAccumulator`
so that groups can grow one image at a time without re-reading earlier images.

File layout (little endian)::

    "UCIF" | u16 version=1 | u32 width | u32 height | u32 support_count | float32[width*height]
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from numpy.typing import NDArray

from .artifacts import atomic_write_bytes
from .errors import CorruptFingerprintFile, DimensionMismatch, EmptyGroup, UndefinedCorrelation
from .imaging import PixelGrid, ResidualNoise

MAGIC = b"UCIF"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHIII")
# relative spread below which a grid counts as constant
FLAT_TOLERANCE = 1e-9

ImagePair = tuple[PixelGrid, ResidualNoise]


@dataclass(frozen=True)
class CameraFingerprint:
    values: NDArray[np.floating]
    support_count: int

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])


@dataclass
class WeightedAccumulator:
    numerator: Optional[NDArray[np.float64]] = None
    denominator: Optional[NDArray[np.float64]] = None
    count: int = 0

    @property
    def shape(self) -> tuple[int, ...] | None:
        return None if self.numerator is None else self.numerator.shape

    def add(self, pixels: PixelGrid, residual: ResidualNoise) -> "WeightedAccumulator":
        """Fold one (image, residual) pair into the sums in place."""
        pixels = np.asarray(pixels, dtype=np.float64)
        residual = np.asarray(residual, dtype=np.float64)
        if pixels.shape != residual.shape:
            raise DimensionMismatch(f"Image {pixels.shape} and residual {residual.shape} differ")
        if self.numerator is None:
            self.numerator = pixels * residual
            self.denominator = pixels**2
        else:
            if pixels.shape != self.numerator.shape:
                raise DimensionMismatch(f"Pair {pixels.shape} does not match accumulator {self.numerator.shape}")
            self.numerator = self.numerator + pixels * residual
            self.denominator = self.denominator + pixels**2
        self.count += 1
        return self

    def absorb(self, other: "WeightedAccumulator") -> "WeightedAccumulator":
        """Add another accumulator's sums into this one in place."""
        if other.numerator is None:
            return self
        if self.numerator is None:
            self.numerator = other.numerator.copy()
            self.denominator = other.denominator.copy()
        else:
            if other.numerator.shape != self.numerator.shape:
                raise DimensionMismatch(f"Accumulators {self.numerator.shape} and {other.numerator.shape} differ")
            self.numerator = self.numerator + other.numerator
            self.denominator = self.denominator + other.denominator
        self.count += other.count
        return self

    def copy(self) -> "WeightedAccumulator":
        return WeightedAccumulator(
            numerator=None if self.numerator is None else self.numerator.copy(),
            denominator=None if self.denominator is None else self.denominator.copy(),
            count=self.count,
        )


def accumulate(acc: WeightedAccumulator, pair: ImagePair) -> WeightedAccumulator:
    return acc.copy().add(*pair)


def finalize(acc: WeightedAccumulator) -> CameraFingerprint:
    if acc.count == 0 or acc.numerator is None:
        raise EmptyGroup("Cannot finalize a fingerprint from an empty accumulator")
    values = np.zeros_like(acc.numerator)
    np.divide(acc.numerator, acc.denominator, out=values, where=acc.denominator > 0)
    return CameraFingerprint(values=values, support_count=acc.count)


def estimate_fingerprint(pairs: Iterable[ImagePair]) -> CameraFingerprint:
    acc = WeightedAccumulator()
    for pixels, residual in pairs:
        acc.add(pixels, residual)
    if acc.count == 0:
        raise EmptyGroup("At least one (image, residual) pair is required")
    return finalize(acc)


def standardize(grid: NDArray[np.floating]) -> NDArray[np.float64]:
    """Flatten ``grid`` to a zero-mean, unit-norm vector."""
    flat = np.asarray(grid, dtype=np.float64).ravel()
    if flat.size == 0 or np.ptp(flat) <= FLAT_TOLERANCE * float(np.abs(flat).max()):
        raise UndefinedCorrelation("Correlation is undefined for a constant grid")
    centered = flat - flat.mean()
    norm = np.linalg.norm(centered)
    if norm == 0.0:
        raise UndefinedCorrelation("Correlation is undefined for a constant grid")
    return centered / norm


def standardize_many(grids: Iterable[NDArray[np.floating]]) -> NDArray[np.float64]:
    """Stack standardized rows; constant grids become rows of NaN."""
    rows = []
    for grid in grids:
        try:
            rows.append(standardize(grid))
        except UndefinedCorrelation:
            rows.append(np.full(np.asarray(grid).size, np.nan))
    return np.vstack(rows)


def correlation(a: NDArray[np.floating], b: NDArray[np.floating]) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"Cannot correlate grids of shape {a.shape} and {b.shape}")
    value = float(np.dot(standardize(a), standardize(b)))
    return min(1.0, max(-1.0, value))


def save_fingerprint(fp: CameraFingerprint, path: Path) -> Path:
    header = HEADER.pack(MAGIC, FORMAT_VERSION, fp.width, fp.height, fp.support_count)
    body = np.ascontiguousarray(fp.values, dtype="<f4").tobytes()
    return atomic_write_bytes(path, header + body)


def load_fingerprint(path: Path) -> CameraFingerprint:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise CorruptFingerprintFile(f"{path}: truncated header ({len(data)} bytes)", path=path)
    magic, version, width, height, support_count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFingerprintFile(f"{path}: bad magic {magic!r}", path=path)
    if version != FORMAT_VERSION:
        raise CorruptFingerprintFile(f"{path}: unsupported version {version}", path=path)
    if width == 0 or height == 0:
        raise CorruptFingerprintFile(f"{path}: empty dimensions {width}x{height}", path=path)
    if support_count < 1:
        raise CorruptFingerprintFile(f"{path}: support_count must be >= 1", path=path)
    expected = HEADER.size + width * height * 4
    if len(data) != expected:
        raise CorruptFingerprintFile(
            f"{path}: {width}x{height} needs {expected} bytes, file has {len(data)}", path=path
        )
    values = np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(height, width).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise CorruptFingerprintFile(f"{path}: non-finite fingerprint values", path=path)
    return CameraFingerprint(values=values, support_count=support_count)
