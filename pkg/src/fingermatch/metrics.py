"""Biometric evaluation: ROC, EER, TAR@FAR, and CMC rank-k recall.

Conventions: a pair is accepted when its score is >= the threshold. The ROC
is evaluated at every distinct score plus -inf/+inf sentinels. EER is
linearly interpolated at the FAR/FRR crossing. TAR@FAR picks the smallest
threshold whose FAR does not exceed the target (step function, no
interpolation). CMC ranks break ties pessimistically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, NumericError, ProtocolError
from .msloss import SimilarityMatrix


@dataclass
class ScoreSet:
    """Genuine (same-identity) and impostor (cross-identity) score lists."""

    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not np.all(np.isfinite(self.genuine)) or not np.all(np.isfinite(self.impostor)):
            raise NumericError("score sets must be finite")

    def require_nonempty(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise ProtocolError(
                f"need both genuine and impostor scores, got {self.genuine.size}/{self.impostor.size}"
            )


class RocPoint(NamedTuple):
    threshold: float
    far: float
    tar: float


class TarAtFar(NamedTuple):
    value: float
    resolution_limited: bool


@dataclass
class ScoreReport:
    """Evaluation summary for one protocol run."""

    eer: float
    tar_at_far: dict
    roc: list
    cmc: np.ndarray
    genuine_count: int = 0
    impostor_count: int = 0
    protocol: str = ""
    stage: int = 1
    fusion_weight: float = 1.0
    score_set: "ScoreSet | None" = None  # raw scores, kept for reporting


def genuine_impostor_split(sim: SimilarityMatrix) -> ScoreSet:
    """Split matrix entries into genuine/impostor scores by identity labels."""
    genuine = sim.scores[sim.genuine_mask()]
    impostor = sim.scores[sim.impostor_mask()]
    if genuine.size == 0 or impostor.size == 0:
        raise ProtocolError(
            f"protocol needs both pair kinds: {genuine.size} genuine, {impostor.size} impostor"
        )
    return ScoreSet(genuine, impostor)


def roc(scores: ScoreSet) -> list[RocPoint]:
    """(threshold, FAR, TAR) at every distinct score, with sentinel endpoints."""
    scores.require_nonempty()
    thresholds = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    gen_sorted = np.sort(scores.genuine)
    imp_sorted = np.sort(scores.impostor)
    # count of elements >= t via left bisection into ascending arrays
    tar = (gen_sorted.size - np.searchsorted(gen_sorted, thresholds, side="left")) / gen_sorted.size
    far = (imp_sorted.size - np.searchsorted(imp_sorted, thresholds, side="left")) / imp_sorted.size
    points = [RocPoint(float("-inf"), 1.0, 1.0)]
    points.extend(RocPoint(float(t), float(f), float(a)) for t, f, a in zip(thresholds, far, tar))
    points.append(RocPoint(float("inf"), 0.0, 0.0))
    return points


def eer(scores: ScoreSet) -> float:
    """Rate where FAR equals FRR, linearly interpolated at the crossing."""
    points = roc(scores)
    fars = np.array([p.far for p in points])
    frrs = 1.0 - np.array([p.tar for p in points])
    diff = fars - frrs  # nonincreasing from 1 to -1 along rising thresholds
    k = int(np.argmax(diff <= 0.0))
    if diff[k] == 0.0:
        return float(fars[k])
    prev = k - 1
    u = diff[prev] / (diff[prev] - diff[k])
    return float(fars[prev] + u * (fars[k] - fars[prev]))


def tar_at_far(scores: ScoreSet, far_target: float) -> TarAtFar:
    """TAR at the smallest threshold whose FAR <= target (no interpolation)."""
    if not (0.0 < far_target < 1.0):
        raise ConfigError(f"far_target must lie in (0, 1), got {far_target}")
    points = roc(scores)
    limited = scores.impostor.size < 1.0 / far_target
    for p in points:
        if p.far <= far_target:
            return TarAtFar(p.tar, limited)
    return TarAtFar(0.0, limited)  # unreachable: the +inf sentinel has FAR 0


def cmc(sim: SimilarityMatrix, max_rank: int) -> np.ndarray:
    """Fraction of probes whose best genuine entry ranks within the top k.

    Rank counts every unmasked entry scoring above the best genuine plus the
    whole tie group at that score (pessimistic ties).
    """
    if max_rank < 1:
        raise ConfigError(f"max_rank must be >= 1, got {max_rank}")
    genuine = sim.genuine_mask()
    valid = ~sim.self_pair_mask
    ranks = np.empty(sim.scores.shape[0], dtype=np.int64)
    for i in range(sim.scores.shape[0]):
        if not genuine[i].any():
            raise ProtocolError(f"probe {i} ({sim.row_labels[i]}) has no genuine gallery entry")
        row = sim.scores[i]
        best = row[genuine[i]].max()
        ranks[i] = np.count_nonzero(valid[i] & (row > best)) + np.count_nonzero(
            valid[i] & (row == best)
        )
    ks = np.arange(1, max_rank + 1)
    return (ranks[None, :] <= ks[:, None]).mean(axis=1)
