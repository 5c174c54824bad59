"""Incremental multi-camera fingerprint estimation for one account.

Images whose residuals correlate strongly are paired into seed groups; groups
with consistent fingerprints are merged; the remaining images are assigned one
at a time to the group whose fingerprint they match best, as long as that match
clears ``beta``. Small groups (likely reposts) are dropped at the end.

Image order inside the account is the tie-break order everywhere ("smallest
image" means "earliest in the account").
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .config import ClusterConfig, DenoiserConfig
from .errors import DimensionMismatch, NotEnoughImages
from .fingerprint import FLAT_TOLERANCE, CameraFingerprint, WeightedAccumulator, finalize, standardize_many
from .imaging import PixelGrid, ResidualNoise, extract_residual

logger = logging.getLogger(__name__)

TraceEvent = dict[str, Any]


@dataclass
class ImageSample:
    image_id: str
    pixels: PixelGrid
    residual: ResidualNoise


@dataclass
class ImageGroup:
    member_ids: list[str]
    accumulator: WeightedAccumulator
    fingerprint: CameraFingerprint

    @property
    def size(self) -> int:
        return len(self.member_ids)

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample]) -> "ImageGroup":
        acc = WeightedAccumulator()
        for sample in samples:
            acc.add(sample.pixels, sample.residual)
        return cls(member_ids=[s.image_id for s in samples], accumulator=acc, fingerprint=finalize(acc))

    def add(self, sample: ImageSample) -> None:
        self.accumulator.add(sample.pixels, sample.residual)
        self.member_ids.append(sample.image_id)
        self.fingerprint = finalize(self.accumulator)

    def absorb(self, other: "ImageGroup") -> None:
        self.accumulator.absorb(other.accumulator)
        self.member_ids.extend(other.member_ids)
        self.fingerprint = finalize(self.accumulator)


@dataclass(frozen=True)
class GroupingOutcome:
    """Member ids only: what evaluation needs from a clustering run."""

    groups: tuple[tuple[str, ...], ...]
    rejected_ids: tuple[str, ...]
    kept: tuple[bool, ...]

    @property
    def kept_member_ids(self) -> set[str]:
        return {image_id for group, keep in zip(self.groups, self.kept) if keep for image_id in group}

    @property
    def image_ids(self) -> list[str]:
        return [image_id for group in self.groups for image_id in group] + list(self.rejected_ids)

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "GroupingOutcome":
        groups = payload.get("groups", [])
        return cls(
            groups=tuple(tuple(group["member_ids"]) for group in groups),
            rejected_ids=tuple(payload.get("rejected_ids", [])),
            kept=tuple(bool(group.get("kept", True)) for group in groups),
        )


@dataclass
class ClusterResult:
    groups: list[ImageGroup]
    rejected_ids: list[str]
    kept_groups: list[ImageGroup]
    trace: list[TraceEvent] = field(default_factory=list)
    iterations: int = 0
    min_group_size: int = 2

    @property
    def kept_fingerprints(self) -> list[CameraFingerprint]:
        return [group.fingerprint for group in self.kept_groups]

    @property
    def outcome(self) -> GroupingOutcome:
        kept = {id(group) for group in self.kept_groups}
        return GroupingOutcome(
            groups=tuple(tuple(group.member_ids) for group in self.groups),
            rejected_ids=tuple(self.rejected_ids),
            kept=tuple(id(group) in kept for group in self.groups),
        )

    def to_dict(self, account_id: str | None = None) -> dict[str, Any]:
        kept = {id(group) for group in self.kept_groups}
        return {
            "account_id": account_id,
            "min_group_size": self.min_group_size,
            "iterations": self.iterations,
            "groups": [
                {
                    "index": index,
                    "member_ids": list(group.member_ids),
                    "size": group.size,
                    "kept": id(group) in kept,
                }
                for index, group in enumerate(self.groups)
            ],
            "rejected_ids": list(self.rejected_ids),
        }


def pairwise_residual_correlations(residuals: Sequence[ResidualNoise]) -> NDArray[np.float64]:
    """Symmetric Pearson matrix of residuals; rows of constant residuals are NaN."""
    if len(residuals) < 2:
        raise NotEnoughImages("Pairwise correlations need at least two residuals", count=len(residuals))
    shape = np.shape(residuals[0])
    for residual in residuals[1:]:
        if np.shape(residual) != shape:
            raise DimensionMismatch(f"Residual {np.shape(residual)} does not match {shape}")
    rows = standardize_many(residuals)
    matrix = rows @ rows.T
    matrix = (matrix + matrix.T) / 2.0
    matrix = np.clip(matrix, -1.0, 1.0)
    valid = ~np.isnan(rows[:, 0])
    matrix[np.flatnonzero(valid), np.flatnonzero(valid)] = 1.0
    return matrix


def select_seeds(
    matrix: NDArray[np.float64],
    samples: Sequence[ImageSample],
    alpha: float,
    trace: Optional[list[TraceEvent]] = None,
) -> tuple[list[ImageGroup], list[ImageSample]]:
    count = len(samples)
    rows, cols = np.triu_indices(count, k=1)
    values = matrix[rows, cols]
    eligible = ~np.isnan(values) & (values >= alpha)
    rows, cols, values = rows[eligible], cols[eligible], values[eligible]
    order = np.lexsort((cols, rows, -values))

    used: set[int] = set()
    groups: list[ImageGroup] = []
    for position in order:
        j, k = int(rows[position]), int(cols[position])
        if j in used or k in used:
            continue
        used.update((j, k))
        groups.append(ImageGroup.from_samples([samples[j], samples[k]]))
        _emit(
            trace,
            "seed",
            iteration=0,
            group=len(groups) - 1,
            image_ids=[samples[j].image_id, samples[k].image_id],
            correlation=float(values[position]),
        )
    usable = ~np.isnan(np.diag(matrix))
    pool = [sample for index, sample in enumerate(samples) if index not in used and usable[index]]
    return groups, pool


def merge_groups(
    groups: list[ImageGroup],
    alpha: float,
    trace: Optional[list[TraceEvent]] = None,
    iteration: int = 0,
) -> list[ImageGroup]:
    groups = list(groups)
    while len(groups) > 1:
        rows = standardize_many([group.fingerprint.values for group in groups])
        matrix = rows @ rows.T
        matrix = (matrix + matrix.T) / 2.0
        upper_j, upper_k = np.triu_indices(len(groups), k=1)
        values = matrix[upper_j, upper_k]
        eligible = ~np.isnan(values) & (values > alpha)
        if not eligible.any():
            break
        candidates = np.flatnonzero(eligible)
        best = candidates[np.lexsort((upper_k[candidates], upper_j[candidates], -values[candidates]))[0]]
        j, k = int(upper_j[best]), int(upper_k[best])
        groups[j].absorb(groups[k])
        del groups[k]
        _emit(
            trace,
            "merge",
            iteration=iteration,
            into=j,
            absorbed=k,
            correlation=float(values[best]),
            size=groups[j].size,
        )
    return groups


class _AssignmentState:
    """Pool-by-group correlation matrix, kept current one column at a time."""

    def __init__(self, pool: Sequence[ImageSample]):
        self.pool = list(pool)
        self.pool_rows = standardize_many([s.residual for s in self.pool]) if self.pool else None
        self.matrix: Optional[NDArray[np.float64]] = None

    def refresh(self, groups: Sequence[ImageGroup]) -> None:
        if not self.pool or not groups:
            self.matrix = None
            return
        group_rows = standardize_many([group.fingerprint.values for group in groups])
        self.matrix = self.pool_rows @ group_rows.T

    def update_column(self, groups: Sequence[ImageGroup], index: int) -> None:
        if self.matrix is None or not self.pool:
            return
        column = standardize_many([groups[index].fingerprint.values])[0]
        self.matrix[:, index] = self.pool_rows @ column

    def best(self) -> Optional[tuple[int, int, float]]:
        if self.matrix is None or not self.pool:
            return None
        scores = np.where(np.isnan(self.matrix), -np.inf, self.matrix)
        flat = int(np.argmax(scores))
        position, group_index = np.unravel_index(flat, scores.shape)
        rho = float(scores[position, group_index])
        if not np.isfinite(rho):
            return None
        return int(position), int(group_index), rho

    def take(self, position: int) -> ImageSample:
        sample = self.pool.pop(position)
        self.pool_rows = np.delete(self.pool_rows, position, axis=0)
        if self.matrix is not None:
            self.matrix = np.delete(self.matrix, position, axis=0)
        return sample


def assign_remaining(
    groups: list[ImageGroup],
    pool: Sequence[ImageSample],
    beta: float,
    trace: Optional[list[TraceEvent]] = None,
) -> tuple[list[ImageGroup], list[str]]:
    """Assign pool images to groups until the best match drops below ``beta``."""
    groups = list(groups)
    state = _AssignmentState(pool)
    state.refresh(groups)
    iteration = 0
    while True:
        iteration += 1
        if not _assign_step(state, groups, beta, trace, iteration):
            break
    return groups, [sample.image_id for sample in state.pool]


def _assign_step(
    state: _AssignmentState,
    groups: list[ImageGroup],
    beta: float,
    trace: Optional[list[TraceEvent]],
    iteration: int,
) -> bool:
    best = state.best()
    if best is None or best[2] < beta:
        _emit(trace, "stop", iteration=iteration, best_correlation=None if best is None else best[2])
        return False
    position, group_index, rho = best
    sample = state.take(position)
    groups[group_index].add(sample)
    state.update_column(groups, group_index)
    _emit(trace, "assign", iteration=iteration, image_id=sample.image_id, group=group_index, correlation=rho)
    return True


def filter_small_groups(groups: Sequence[ImageGroup], lam: int) -> list[CameraFingerprint]:
    return [group.fingerprint for group in groups if group.size >= lam]


def estimate_user_fingerprints(
    images: Sequence[tuple[str, PixelGrid]],
    denoiser: DenoiserConfig,
    cluster: ClusterConfig,
    *,
    account_id: str | None = None,
    min_group_size: int | None = None,
) -> ClusterResult:
    """Run the full seed / merge / assign / filter pipeline on one account's images.

    ``min_group_size`` overrides ``cluster.lam`` for the final size filter (the MCF
    scheme filters with its own threshold).
    """
    if len(images) < 2:
        raise NotEnoughImages(
            f"Account {account_id or '?'} has {len(images)} image(s); at least 2 are required",
            account_id=account_id,
            count=len(images),
        )
    lam = cluster.lam if min_group_size is None else min_group_size
    trace: list[TraceEvent] = []
    samples = [ImageSample(image_id, pixels, extract_residual(pixels, denoiser)) for image_id, pixels in images]
    matrix = pairwise_residual_correlations([sample.residual for sample in samples])
    flat = np.array([_flat_residual(sample) for sample in samples])
    matrix[flat, :] = np.nan
    matrix[:, flat] = np.nan

    quarantined = [sample.image_id for index, sample in enumerate(samples) if np.isnan(matrix[index, index])]
    for image_id in quarantined:
        _emit(trace, "quarantine", iteration=0, image_id=image_id, reason="constant residual")
        logger.info("Quarantined %s in account %s: constant residual", image_id, account_id)
    usable = len(samples) - len(quarantined)
    if usable < 2:
        raise NotEnoughImages(
            f"Account {account_id or '?'} has {usable} usable image(s); at least 2 are required",
            account_id=account_id,
            count=usable,
        )

    groups, pool = select_seeds(matrix, samples, cluster.alpha, trace)
    state = _AssignmentState(pool)
    iteration = 0
    while True:
        iteration += 1
        before = len(groups)
        groups = merge_groups(groups, cluster.alpha, trace, iteration)
        if iteration == 1 or len(groups) != before:
            state.refresh(groups)
        if not _assign_step(state, groups, cluster.beta, trace, iteration):
            break

    for sample in state.pool:
        _emit(trace, "reject", iteration=iteration, image_id=sample.image_id)
    leftover = {sample.image_id for sample in state.pool}.union(quarantined)
    rejected_ids = [sample.image_id for sample in samples if sample.image_id in leftover]

    kept_groups = []
    for index, group in enumerate(groups):
        kept = group.size >= lam
        if kept:
            kept_groups.append(group)
        _emit(trace, "filter", iteration=iteration, group=index, size=group.size, kept=kept, min_size=lam)
    logger.debug(
        "Account %s: %d groups, %d kept, %d rejected after %d iterations",
        account_id,
        len(groups),
        len(kept_groups),
        len(rejected_ids),
        iteration,
    )
    return ClusterResult(
        groups=groups,
        rejected_ids=rejected_ids,
        kept_groups=kept_groups,
        trace=trace,
        iterations=iteration,
        min_group_size=lam,
    )


def _flat_residual(sample: ImageSample) -> bool:
    # round-off residuals of a constant image scale with its pixel values
    scale = max(1.0, float(np.abs(sample.pixels).max()))
    return float(np.ptp(sample.residual)) <= FLAT_TOLERANCE * scale


def _emit(trace: Optional[list[TraceEvent]], event: str, **fields: Any) -> None:
    if trace is not None:
        trace.append({"event": event, **fields})
