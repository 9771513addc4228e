"""Multi-similarity loss with hard-pair mining.

Anchors are matrix rows. A negative pair is kept when its similarity exceeds
the anchor's weakest positive minus the margin; a positive pair is kept when
its similarity falls below the anchor's strongest negative plus the margin.
Rows lacking positives fall back to keeping negatives at or above the
similarity threshold (and symmetrically for rows lacking negatives). Kept
positives and
negatives enter scaled log-sum terms; the batch loss is the anchor mean.
The composite objective sums this loss over the contactless-to-contactless,
contactless-to-contact, and contact-to-contact similarity matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensorops import Tensor, _result, matmul, sum_scalars, transpose


@dataclass(frozen=True)
class LossConfig:
    alpha_pos: float = 2.0
    alpha_neg: float = 40.0
    tau: float = 0.5
    margin: float = 0.7

    def __post_init__(self):
        if self.alpha_pos <= 0 or self.alpha_neg <= 0:
            raise ConfigError(f"scales must be positive, got {self.alpha_pos}/{self.alpha_neg}")
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if not (-1.0 < self.tau < 1.0):
            raise ConfigError(f"tau must lie in (-1, 1), got {self.tau}")


@dataclass
class SimilarityMatrix:
    """Score matrix between two labeled embedding lists.

    `self_pair_mask` marks entries where row and column are the same
    physical sample; masked entries never participate in mining or metrics.
    """

    scores: np.ndarray
    row_labels: list
    col_labels: list
    self_pair_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ShapeError(f"scores must be 2-D, got {self.scores.shape}")
        m, n = self.scores.shape
        if len(self.row_labels) != m or len(self.col_labels) != n:
            raise ShapeError(
                f"label lengths {len(self.row_labels)}/{len(self.col_labels)} "
                f"do not match matrix shape {self.scores.shape}"
            )
        if self.self_pair_mask is None:
            self.self_pair_mask = np.zeros((m, n), dtype=bool)
        else:
            self.self_pair_mask = np.asarray(self.self_pair_mask, dtype=bool)
            if self.self_pair_mask.shape != (m, n):
                raise ShapeError(
                    f"mask shape {self.self_pair_mask.shape} does not match {self.scores.shape}"
                )

    def genuine_mask(self) -> np.ndarray:
        rows = np.asarray(self.row_labels, dtype=object)
        cols = np.asarray(self.col_labels, dtype=object)
        return (rows[:, None] == cols[None, :]) & ~self.self_pair_mask

    def impostor_mask(self) -> np.ndarray:
        rows = np.asarray(self.row_labels, dtype=object)
        cols = np.asarray(self.col_labels, dtype=object)
        return (rows[:, None] != cols[None, :]) & ~self.self_pair_mask


def similarity_matrix(a, b, row_labels, col_labels, same_source: bool | None = None) -> SimilarityMatrix:
    """Pairwise dot products of unit-norm embeddings.

    When `a is b` (or `same_source=True`), the diagonal is masked as self
    pairs. Embeddings are rows of a 2-D array or a list of 1-D vectors.
    """
    if same_source is None:
        same_source = a is b
    ea = np.atleast_2d(np.asarray(a, dtype=np.float64))
    eb = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if ea.size == 0 or eb.size == 0:
        raise ShapeError("similarity_matrix needs nonempty embedding lists")
    if ea.shape[1] != eb.shape[1]:
        raise ShapeError(f"embedding dims differ: {ea.shape[1]} vs {eb.shape[1]}")
    scores = ea @ eb.T
    mask = np.zeros(scores.shape, dtype=bool)
    if same_source:
        np.fill_diagonal(mask, True)
    return SimilarityMatrix(scores, list(row_labels), list(col_labels), mask)


def mine_pairs(sim: SimilarityMatrix, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (pos_mask, neg_mask) of pairs kept for the loss, per anchor row."""
    s = sim.scores
    genuine = sim.genuine_mask()
    impostor = sim.impostor_mask()
    pos_mask = np.zeros(s.shape, dtype=bool)
    neg_mask = np.zeros(s.shape, dtype=bool)
    for i in range(s.shape[0]):
        pos = genuine[i]
        neg = impostor[i]
        has_pos = bool(pos.any())
        has_neg = bool(neg.any())
        if has_pos and has_neg:
            min_pos = s[i, pos].min()
            max_neg = s[i, neg].max()
            neg_mask[i] = neg & (s[i] > min_pos - cfg.margin)
            pos_mask[i] = pos & (s[i] < max_neg + cfg.margin)
        elif has_neg:
            neg_mask[i] = neg & (s[i] >= cfg.tau)
        elif has_pos:
            pos_mask[i] = pos & (s[i] <= cfg.tau)
    return pos_mask, neg_mask


def ms_loss(sim: SimilarityMatrix, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Scalar loss plus its analytic gradient with respect to the scores.

    Mining masks are treated as constants of the batch; the gradient is
    nonzero only at kept entries.
    """
    pos_mask, neg_mask = mine_pairs(sim, cfg)
    s = sim.scores.astype(np.float64)
    m = s.shape[0]
    grad = np.zeros_like(s)
    total = 0.0
    for i in range(m):
        if pos_mask[i].any():
            e = np.exp(-cfg.alpha_pos * (s[i, pos_mask[i]] - cfg.tau))
            z = 1.0 + e.sum()
            total += np.log(z) / cfg.alpha_pos
            grad[i, pos_mask[i]] = -e / z
        if neg_mask[i].any():
            e = np.exp(cfg.alpha_neg * (s[i, neg_mask[i]] - cfg.tau))
            z = 1.0 + e.sum()
            total += np.log(z) / cfg.alpha_neg
            grad[i, neg_mask[i]] = e / z
    return total / m, grad / m


def ms_loss_graph(scores: Tensor, sim: SimilarityMatrix, cfg: LossConfig) -> Tensor:
    """Tape node wrapping ms_loss: scalar out, analytic gradient into `scores`."""
    value, grad = ms_loss(sim, cfg)

    def _bw(g):
        scores.accumulate((g * grad).astype(scores.data.dtype))

    return _result(np.asarray(value, dtype=np.float64), (scores,), _bw)


def composite_loss_graph(cl_stack, cl_labels, cb_stack, cb_labels, cfg: LossConfig) -> Tensor:
    """Composite objective on stacked embedding Tensors, kept on the tape.

    Either stack may be None/empty; its matrices then contribute nothing.
    """
    def term(rows, row_labels, cols, col_labels, same_source):
        scores = matmul(rows, transpose(cols))
        mask = np.zeros(scores.data.shape, dtype=bool)
        if same_source:
            np.fill_diagonal(mask, True)
        sim = SimilarityMatrix(scores.data, list(row_labels), list(col_labels), mask)
        return ms_loss_graph(scores, sim, cfg)

    terms = []
    has_cl = cl_stack is not None and len(cl_labels) > 0
    has_cb = cb_stack is not None and len(cb_labels) > 0
    if has_cl:
        terms.append(term(cl_stack, cl_labels, cl_stack, cl_labels, True))
    if has_cl and has_cb:
        terms.append(term(cl_stack, cl_labels, cb_stack, cb_labels, False))
    if has_cb:
        terms.append(term(cb_stack, cb_labels, cb_stack, cb_labels, True))
    if not terms:
        return Tensor(np.float64(0.0))
    return sum_scalars(terms)


def composite_loss(cl_embs, cl_labels, cb_embs, cb_labels, cfg: LossConfig) -> float:
    """Sum of the mined loss over cl2cl, cl2cb, and cb2cb score matrices.

    An empty modality list makes its matrices vacuous (contribution 0).
    """
    total = 0.0
    has_cl = len(cl_labels) > 0
    has_cb = len(cb_labels) > 0
    if has_cl:
        sim = similarity_matrix(cl_embs, cl_embs, cl_labels, cl_labels, same_source=True)
        total += ms_loss(sim, cfg)[0]
    if has_cl and has_cb:
        sim = similarity_matrix(cl_embs, cb_embs, cl_labels, cb_labels, same_source=False)
        total += ms_loss(sim, cfg)[0]
    if has_cb:
        sim = similarity_matrix(cb_embs, cb_embs, cb_labels, cb_labels, same_source=True)
        total += ms_loss(sim, cfg)[0]
    return total
