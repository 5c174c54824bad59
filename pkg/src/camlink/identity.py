"""Accounts, fingerprint schemes and account-to-account similarity.

Two accounts are as similar as their best-matching pair of camera fingerprints.
An account that ends up with no fingerprint at all carries no evidence: its
scores are ``None`` (``NaN`` inside :class:`ScoreMatrix`) and it ranks below
every real score.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from .clustering import ClusterResult, estimate_user_fingerprints
from .config import ClusterConfig, DenoiserConfig, RunConfig
from .errors import CamlinkError, DimensionMismatch, InvalidImage, NotEnoughImages, UnknownAccount
from .fingerprint import CameraFingerprint, estimate_fingerprint, standardize_many
from .imaging import PixelGrid, center_crop, extract_residual, load_grid

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")


class Scheme(str, Enum):
    SCF = "scf"
    MCF = "mcf"
    UCI = "uci"


class PairLabel(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    EXCLUDED = "excluded"


@dataclass
class AccountImage:
    """One image reference: a file on disk or an in-memory renderer."""

    image_id: str
    path: Optional[Path] = None
    camera_id: Optional[str] = None
    is_repost: Optional[bool] = None
    render: Optional[Callable[[], PixelGrid]] = None

    def load(self, crop: tuple[int, int]) -> PixelGrid:
        if self.render is not None:
            return center_crop(np.asarray(self.render(), dtype=np.float64), crop)
        if self.path is None:
            raise InvalidImage(f"Image {self.image_id} has neither a path nor a renderer")
        return load_grid(self.path, crop)


@dataclass
class Account:
    account_id: str
    images: list[AccountImage]
    individual_id: Optional[str] = None

    @property
    def image_ids(self) -> list[str]:
        return [image.image_id for image in self.images]

    @property
    def own_cameras(self) -> frozenset[str]:
        """Cameras of the account's own (non-reposted) images."""
        return frozenset(
            image.camera_id for image in self.images if image.camera_id is not None and not image.is_repost
        )

    def truth_labels(self) -> dict[str, str]:
        return {image.image_id: image.camera_id for image in self.images if image.camera_id is not None}

    def repost_flags(self) -> dict[str, bool]:
        return {image.image_id: bool(image.is_repost) for image in self.images if image.is_repost is not None}

    @classmethod
    def from_directory(cls, path: Path, account_id: str | None = None) -> "Account":
        files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        images = [AccountImage(image_id=p.stem, path=p) for p in files]
        return cls(account_id=account_id or path.name, images=images)


@dataclass
class ScoreMatrix:
    """Symmetric account similarity matrix; ``NaN`` marks NoEvidence and the diagonal."""

    account_ids: list[str]
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        size = len(self.account_ids)
        if self.values.shape != (size, size):
            raise DimensionMismatch(f"Score matrix {self.values.shape} does not match {size} accounts")
        if len(set(self.account_ids)) != size:
            raise ValueError("Account ids must be unique")
        self._index = {account_id: i for i, account_id in enumerate(self.account_ids)}

    def index(self, account_id: str) -> int:
        try:
            return self._index[account_id]
        except KeyError as exc:
            raise UnknownAccount(f"Account '{account_id}' is not in the score matrix") from exc

    def score(self, a: str, b: str) -> Optional[float]:
        i, j = self.index(a), self.index(b)
        if i == j:
            return None
        value = self.values[i, j]
        return None if np.isnan(value) else float(value)

    def pairs(self) -> Iterable[tuple[str, str, Optional[float]]]:
        for i, j in combinations(range(len(self.account_ids)), 2):
            value = self.values[i, j]
            yield self.account_ids[i], self.account_ids[j], None if np.isnan(value) else float(value)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=self.account_ids, columns=self.account_ids)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ScoreMatrix":
        ids = [str(value) for value in frame.index]
        columns = [str(value) for value in frame.columns]
        if ids != columns:
            raise ValueError("Score matrix rows and columns must list the same accounts in the same order")
        return cls(account_ids=ids, values=frame.to_numpy(dtype=np.float64))

    @classmethod
    def from_csv(cls, path: Path) -> "ScoreMatrix":
        frame = pd.read_csv(path, index_col=0, dtype=str, keep_default_na=False)
        frame = frame.apply(pd.to_numeric, errors="coerce").astype(np.float64)
        return cls.from_frame(frame)

    def to_dict(self) -> dict[str, Any]:
        rows = [[None if np.isnan(value) else float(value) for value in row] for row in self.values]
        return {"account_ids": list(self.account_ids), "scores": rows}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ScoreMatrix":
        rows = [[np.nan if value is None else float(value) for value in row] for row in payload["scores"]]
        values = np.array(rows, dtype=np.float64).reshape(len(payload["account_ids"]), -1)
        return cls(account_ids=list(payload["account_ids"]), values=values)


@dataclass
class SchemeResult:
    scheme: Scheme
    fingerprints: dict[str, list[CameraFingerprint]]
    cluster_results: dict[str, Optional[ClusterResult]]
    scores: ScoreMatrix
    failures: dict[str, str] = field(default_factory=dict)


def account_similarity(
    sx: Sequence[CameraFingerprint],
    sy: Sequence[CameraFingerprint],
) -> Optional[float]:
    """Max correlation over all cross pairs; ``None`` when either set is empty."""
    if not sx or not sy:
        return None
    shape = sx[0].values.shape
    for fp in (*sx, *sy):
        if fp.values.shape != shape:
            raise DimensionMismatch(f"Fingerprint {fp.values.shape} does not match {shape}")
    left = [row for row in standardize_many([fp.values for fp in sx]) if not np.isnan(row[0])]
    right = [row for row in standardize_many([fp.values for fp in sy]) if not np.isnan(row[0])]
    if not left or not right:
        return None
    best = max(float(np.dot(x, y)) for x in left for y in right)
    return min(1.0, max(-1.0, best))


def score_matrix(
    fingerprints: Mapping[str, Sequence[CameraFingerprint]],
    workers: int = 1,
) -> ScoreMatrix:
    """All-pairs :func:`account_similarity`; each row task owns the cells right of the diagonal."""
    account_ids = list(fingerprints)
    shapes = {fp.values.shape for fps in fingerprints.values() for fp in fps}
    if len(shapes) > 1:
        raise DimensionMismatch(f"Fingerprints have mixed shapes: {sorted(shapes)}")
    stacks = {
        account_id: standardize_many([fp.values for fp in fps]) if fps else None
        for account_id, fps in fingerprints.items()
    }
    size = len(account_ids)
    values = np.full((size, size), np.nan)

    def fill_row(i: int) -> None:
        left = stacks[account_ids[i]]
        if left is None:
            return
        for j in range(i + 1, size):
            right = stacks[account_ids[j]]
            if right is None:
                continue
            block = left @ right.T
            if not np.all(np.isnan(block)):
                values[i, j] = np.clip(np.nanmax(block), -1.0, 1.0)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        for future in [executor.submit(fill_row, i) for i in range(size)]:
            future.result()
    upper_i, upper_j = np.triu_indices(size, k=1)
    values[upper_j, upper_i] = values[upper_i, upper_j]
    return ScoreMatrix(account_ids=account_ids, values=values)


def extract_account(
    account: Account,
    scheme: Scheme | str,
    denoiser: DenoiserConfig,
    cluster: ClusterConfig,
    gamma: int = 2,
) -> tuple[list[CameraFingerprint], Optional[ClusterResult]]:
    """Fingerprint set of one account under ``scheme``."""
    scheme = Scheme(scheme)
    if len(account.images) < 2:
        raise NotEnoughImages(
            f"Account {account.account_id} has {len(account.images)} image(s); at least 2 are required",
            account_id=account.account_id,
            count=len(account.images),
        )
    grids = [(image.image_id, image.load(denoiser.crop)) for image in account.images]
    if scheme is Scheme.SCF:
        fp = estimate_fingerprint((grid, extract_residual(grid, denoiser)) for _, grid in grids)
        return [fp], None
    min_group_size = gamma if scheme is Scheme.MCF else cluster.lam
    result = estimate_user_fingerprints(
        grids,
        denoiser,
        cluster,
        account_id=account.account_id,
        min_group_size=min_group_size,
    )
    return result.kept_fingerprints, result


@dataclass
class ExtractionBatch:
    fingerprints: dict[str, list[CameraFingerprint]]
    cluster_results: dict[str, Optional[ClusterResult]]
    errors: dict[str, CamlinkError]


def extract_accounts(
    accounts: Sequence[Account],
    scheme: Scheme | str,
    config: RunConfig,
    *,
    on_account_done: Callable[[str], None] | None = None,
) -> ExtractionBatch:
    """Fingerprint every account in parallel; a failing account gets an empty set."""
    scheme = Scheme(scheme)
    fingerprints: dict[str, list[CameraFingerprint]] = {account.account_id: [] for account in accounts}
    cluster_results: dict[str, Optional[ClusterResult]] = {account.account_id: None for account in accounts}
    errors: dict[str, CamlinkError] = {}

    with ThreadPoolExecutor(max_workers=config.workers) as executor:
        futures = {
            executor.submit(extract_account, account, scheme, config.denoiser, config.cluster, config.gamma): account
            for account in accounts
        }
        for future in as_completed(futures):
            account_id = futures[future].account_id
            try:
                fingerprints[account_id], cluster_results[account_id] = future.result()
            except CamlinkError as exc:
                errors[account_id] = exc
                logger.warning("Account %s has no fingerprint: %s", account_id, exc)
            else:
                logger.debug("Account %s: %d fingerprint(s)", account_id, len(fingerprints[account_id]))
            if on_account_done is not None:
                on_account_done(account_id)
    return ExtractionBatch(fingerprints, cluster_results, dict(sorted(errors.items())))


def run_scheme(
    accounts: Sequence[Account],
    scheme: Scheme | str,
    config: RunConfig,
    *,
    on_account_done: Callable[[str], None] | None = None,
) -> SchemeResult:
    """Fingerprint every account under ``scheme`` and score all account pairs.

    Failed accounts are listed in ``failures`` and score as NoEvidence.
    """
    scheme = Scheme(scheme)
    batch = extract_accounts(accounts, scheme, config, on_account_done=on_account_done)
    return SchemeResult(
        scheme=scheme,
        fingerprints=batch.fingerprints,
        cluster_results=batch.cluster_results,
        scores=score_matrix(batch.fingerprints, workers=config.workers),
        failures={account_id: f"{type(exc).__name__}: {exc}" for account_id, exc in batch.errors.items()},
    )


def rank_candidates(matrix: ScoreMatrix, query: str) -> list[str]:
    """Other accounts by descending score, NoEvidence last, ties by account id."""
    matrix.index(query)

    def key(candidate: str) -> tuple[int, float, str]:
        value = matrix.score(query, candidate)
        return (1, 0.0, candidate) if value is None else (0, -value, candidate)

    return sorted((account_id for account_id in matrix.account_ids if account_id != query), key=key)


def decide_pairs(matrix: ScoreMatrix, tau: float) -> set[tuple[str, str]]:
    return {pair_key(a, b) for a, b, value in matrix.pairs() if value is not None and value > tau}


def pair_label(a: Account, b: Account) -> PairLabel:
    if a.individual_id is not None and a.individual_id == b.individual_id:
        return PairLabel.POSITIVE
    if a.own_cameras.isdisjoint(b.own_cameras):
        return PairLabel.NEGATIVE
    return PairLabel.EXCLUDED


def label_pairs(accounts: Sequence[Account]) -> dict[tuple[str, str], PairLabel]:
    """Ground-truth label of every unordered account pair, keyed by sorted id tuple."""
    return {pair_key(a.account_id, b.account_id): pair_label(a, b) for a, b in combinations(accounts, 2)}


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)
