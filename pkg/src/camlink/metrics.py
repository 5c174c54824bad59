"""Clustering quality, identification quality and repost-removal statistics.

Clustering metrics compare a predicted partition of an account's images with
the true camera labels. ``strict`` mode counts every rejected image as a
singleton group; ``lenient`` mode leaves rejected images out entirely.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import roc_curve
from sklearn.metrics.cluster import contingency_matrix, pair_confusion_matrix

from .clustering import ClusterResult, GroupingOutcome
from .errors import DegenerateRoc, EmptyEvaluation, ManifestError
from .identity import PairLabel, ScoreMatrix, pair_key

logger = logging.getLogger(__name__)

NO_EVIDENCE_SCORE = -2.0


class EvaluationMode(str, Enum):
    STRICT = "strict"
    LENIENT = "lenient"


@dataclass(frozen=True)
class PairCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> Optional[float]:
        return None if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self) -> Optional[float]:
        return None if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    def __add__(self, other: "PairCounts") -> "PairCounts":
        return PairCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass(frozen=True)
class RocCurve:
    thresholds: tuple[float, ...]
    fpr: tuple[float, ...]
    tpr: tuple[float, ...]
    auc: float
    eer: float

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds, self.fpr, self.tpr))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


@dataclass(frozen=True)
class ClusteringScores:
    images: int
    purity: float
    precision: Optional[float]
    recall: Optional[float]
    counts: PairCounts

    def to_dict(self) -> dict[str, Any]:
        return {
            "images": self.images,
            "purity": self.purity,
            "precision": self.precision,
            "recall": self.recall,
            "pair_counts": self.counts.to_dict(),
        }


Grouping = Sequence[Iterable[str]]


def _labelled_partition(
    groups: Grouping,
    truth: Mapping[str, str],
    rejected: Iterable[str],
    mode: EvaluationMode | str,
) -> tuple[list[str], list[str]]:
    """Parallel (true label, predicted cluster) lists over the evaluated images."""
    mode = EvaluationMode(mode)
    labelled: list[tuple[str, str]] = []
    for index, group in enumerate(groups):
        labelled.extend((image_id, f"g{index}") for image_id in group)
    if mode is EvaluationMode.STRICT:
        labelled.extend((image_id, f"r:{image_id}") for image_id in rejected)
    missing = [image_id for image_id, _ in labelled if image_id not in truth]
    if missing:
        raise ManifestError(f"No camera label for image(s): {', '.join(missing[:5])}")
    return [truth[image_id] for image_id, _ in labelled], [cluster for _, cluster in labelled]


def _purity_hits(true_labels: list[str], pred_labels: list[str]) -> int:
    if not true_labels:
        return 0
    return int(contingency_matrix(true_labels, pred_labels).max(axis=0).sum())


def _pair_counts(true_labels: list[str], pred_labels: list[str]) -> PairCounts:
    if len(true_labels) < 2:
        return PairCounts()
    # sklearn counts ordered pairs
    (tn, fp), (fn, tp) = pair_confusion_matrix(true_labels, pred_labels) // 2
    return PairCounts(tp=int(tp), fp=int(fp), fn=int(fn), tn=int(tn))


def purity(
    groups: Grouping,
    truth: Mapping[str, str],
    *,
    rejected: Iterable[str] = (),
    mode: EvaluationMode | str = EvaluationMode.STRICT,
) -> float:
    true_labels, pred_labels = _labelled_partition(groups, truth, rejected, mode)
    if not true_labels:
        raise EmptyEvaluation("Purity needs at least one evaluated image")
    return _purity_hits(true_labels, pred_labels) / len(true_labels)


def pairwise_precision_recall(
    groups: Grouping,
    truth: Mapping[str, str],
    *,
    rejected: Iterable[str] = (),
    mode: EvaluationMode | str = EvaluationMode.STRICT,
) -> tuple[Optional[float], Optional[float], PairCounts]:
    counts = _pair_counts(*_labelled_partition(groups, truth, rejected, mode))
    return counts.precision, counts.recall, counts


def all_in_one_baseline(image_ids: Iterable[str]) -> list[list[str]]:
    """Every image of the account in a single group."""
    return [list(image_ids)]


def evaluate_clustering(
    accounts: Iterable[tuple[Grouping, Iterable[str], Mapping[str, str]]],
    mode: EvaluationMode | str = EvaluationMode.STRICT,
) -> ClusteringScores:
    """Micro-averaged purity and pair precision/recall over many accounts.

    Each item is ``(groups, rejected_ids, truth)`` for one account; pair counts and
    purity numerators are summed before dividing.
    """
    hits = images = 0
    counts = PairCounts()
    for groups, rejected, truth in accounts:
        true_labels, pred_labels = _labelled_partition(groups, truth, rejected, mode)
        hits += _purity_hits(true_labels, pred_labels)
        images += len(true_labels)
        counts = counts + _pair_counts(true_labels, pred_labels)
    if images == 0:
        raise EmptyEvaluation("Clustering evaluation needs at least one evaluated image")
    return ClusteringScores(
        images=images,
        purity=hits / images,
        precision=counts.precision,
        recall=counts.recall,
        counts=counts,
    )


def average_precisions(
    matrix: ScoreMatrix,
    labels: Mapping[tuple[str, str], PairLabel],
) -> dict[str, Optional[float]]:
    """AP per query account; ``None`` for queries with no positive candidate.

    Candidates are ranked by descending score with NoEvidence last; on equal
    scores non-positives are ranked first.
    """
    results: dict[str, Optional[float]] = {}
    for query in matrix.account_ids:
        ranked: list[tuple[int, float, int, str]] = []
        for candidate in matrix.account_ids:
            if candidate == query:
                continue
            label = labels.get(pair_key(query, candidate), PairLabel.EXCLUDED)
            if label is PairLabel.EXCLUDED:
                continue
            value = matrix.score(query, candidate)
            positive = int(label is PairLabel.POSITIVE)
            ranked.append((1 if value is None else 0, 0.0 if value is None else -value, positive, candidate))
        ranked.sort()
        hits = 0
        precisions = []
        for rank, (_, _, positive, _) in enumerate(ranked, start=1):
            if positive:
                hits += 1
                precisions.append(hits / rank)
        results[query] = float(np.mean(precisions)) if precisions else None
    return results


def mean_average_precision(
    matrix: ScoreMatrix,
    labels: Mapping[tuple[str, str], PairLabel],
) -> float:
    per_query = average_precisions(matrix, labels)
    scored = [value for value in per_query.values() if value is not None]
    skipped = len(per_query) - len(scored)
    if skipped:
        logger.warning("Skipped %d quer%s without a positive candidate", skipped, "y" if skipped == 1 else "ies")
    if not scored:
        raise EmptyEvaluation("No query has a positive candidate")
    return float(np.mean(scored))


def _binary_scores(scored_pairs: Iterable[tuple[Optional[float], PairLabel]]) -> tuple[np.ndarray, np.ndarray]:
    y_true, y_score = [], []
    for value, label in scored_pairs:
        label = PairLabel(label)
        if label is PairLabel.EXCLUDED:
            continue
        y_true.append(int(label is PairLabel.POSITIVE))
        y_score.append(NO_EVIDENCE_SCORE if value is None else float(value))
    return np.asarray(y_true, dtype=int), np.asarray(y_score, dtype=np.float64)


def rank_auc(y_true: np.ndarray, y_score: np.ndarray) -> float:
    """Share of (positive, negative) pairs ordered correctly; ties count one half."""
    ranks = rankdata(y_score)
    positives = int(y_true.sum())
    negatives = len(y_true) - positives
    # midranks are multiples of 1/2, so the sum is exact
    wins = float(ranks[y_true == 1].sum()) - positives * (positives + 1) / 2.0
    return wins / (positives * negatives)


def roc_points(scored_pairs: Iterable[tuple[Optional[float], PairLabel]]) -> RocCurve:
    """ROC over labelled pair scores; excluded pairs are dropped."""
    y_true, y_score = _binary_scores(scored_pairs)
    positives = int(y_true.sum())
    if positives == 0 or positives == len(y_true):
        raise DegenerateRoc(f"ROC needs both classes; got {positives} positive(s) of {len(y_true)} pair(s)")
    fpr, tpr, thresholds = roc_curve(y_true, y_score, drop_intermediate=False)
    # first threshold is sklearn's sentinel above every score
    thresholds = thresholds.astype(np.float64)
    thresholds[0] = np.inf
    miss = 1.0 - tpr
    index = int(np.argmin(np.abs(fpr - miss)))
    return RocCurve(
        thresholds=tuple(float(t) for t in thresholds),
        fpr=tuple(float(v) for v in fpr),
        tpr=tuple(float(v) for v in tpr),
        auc=rank_auc(y_true, y_score),
        eer=float((fpr[index] + miss[index]) / 2.0),
    )


def operating_point(
    scored_pairs: Iterable[tuple[Optional[float], PairLabel]],
    tau: float,
) -> tuple[Optional[float], Optional[float]]:
    """(TPR, FPR) of the decision ``score > tau``; NoEvidence is never a match."""
    y_true, y_score = _binary_scores(scored_pairs)
    decided = y_score > tau
    positives = y_true == 1
    tpr = float(decided[positives].mean()) if positives.any() else None
    fpr = float(decided[~positives].mean()) if (~positives).any() else None
    return tpr, fpr


def repost_removal_counts(
    result: ClusterResult | GroupingOutcome,
    repost_flags: Mapping[str, bool],
) -> tuple[int, int, int, int]:
    """(removed reposts, reposts, rejected own images, own images)."""
    outcome = result.outcome if isinstance(result, ClusterResult) else result
    kept = outcome.kept_member_ids
    removed_reposts = reposts = rejected_own = own = 0
    for image_id in outcome.image_ids:
        if repost_flags.get(image_id, False):
            reposts += 1
            removed_reposts += image_id not in kept
        else:
            own += 1
            rejected_own += image_id not in kept
    return removed_reposts, reposts, rejected_own, own


def repost_removal_ratios(
    result: ClusterResult | GroupingOutcome,
    repost_flags: Mapping[str, bool],
) -> tuple[Optional[float], Optional[float]]:
    removed_reposts, reposts, rejected_own, own = repost_removal_counts(result, repost_flags)
    return (
        removed_reposts / reposts if reposts else None,
        rejected_own / own if own else None,
    )
