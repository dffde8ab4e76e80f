"""Training objective: label assignment, the query batch with its
{positive, negative, masked} label matrix, and the match/counterfactual
losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from coal import tensor as T
from coal.hmsi import HMSI, ProposalInputs, QueryInputs
from coal.matching import Box, iou_matrix, linear_assignment
from coal.priors import CounterfactualQuery, SceneRecord
from coal.tensor import Tensor

PROB_EPS = 1e-7
POSITIVE, NEGATIVE, MASKED = 1, 0, -1


def to_probability(score):
    """Map a cosine score in [-1, 1] linearly onto [0, 1]."""
    if isinstance(score, Tensor):
        return (score + 1.0) * 0.5
    return (np.asarray(score, dtype=float) + 1.0) / 2.0


def clamp_probability(p: Tensor, eps: float = PROB_EPS) -> Tensor:
    return T.clamp(p, eps, 1.0 - eps)


def _bce(p: Tensor, labels: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy for already clamped probabilities."""
    y = np.asarray(labels, dtype=p.dtype)
    return -(T.log(p) * y + T.log(1.0 - p) * (1.0 - y))


def main_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over the proposals of one query."""
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"{probs.shape[0]} probabilities but {labels.shape[0]} labels")
    if probs.shape[0] == 0:
        raise ValueError("main loss needs at least one proposal")
    return _bce(clamp_probability(probs), labels).mean()


def cf_loss(p_cf: Tensor) -> Tensor:
    """``-log(1 - p)`` for the target(s) under a counterfactual query, averaged."""
    return (-T.log(1.0 - clamp_probability(p_cf))).mean()


def assign_labels(proposals: list[Box], gt: list[tuple[int, Box]], iou_threshold: float = 0.5) -> dict[int, int]:
    """Max-IoU matching of proposals to ground truth; returns proposal -> object id."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not proposals or not gt:
        return {}
    ious = iou_matrix(list(proposals), [box for _, box in gt])
    result = linear_assignment(ious, maximize=True)
    return {r: gt[c][0] for r, c in result.pairs if ious[r, c] >= iou_threshold}


@dataclass
class LabelMatrix:
    """``entries[proposal, query]`` in {1, 0, -1 = masked}; the first
    ``n_queries`` columns are expressions, the rest their counterfactuals."""

    entries: np.ndarray
    n_queries: int

    def positive_block(self) -> np.ndarray:
        return self.entries[:, : self.n_queries]

    def counterfactual_block(self) -> np.ndarray:
        return self.entries[:, self.n_queries :]


def check_label_matrix(labels: LabelMatrix) -> list[str]:
    """Violations of the masking rules (empty when the matrix is well formed)."""
    problems = []
    entries, n = labels.entries, labels.n_queries
    if entries.ndim != 2 or entries.shape[1] != 2 * n:
        return [f"expected {2 * n} columns, got shape {entries.shape}"]
    pos, cf = entries[:, :n], entries[:, n:]
    if np.any(pos == MASKED):
        problems.append("masked entry in an expression column")
    if not np.all(np.isin(entries, (POSITIVE, NEGATIVE, MASKED))):
        problems.append("entry outside {1, 0, masked}")
    if np.any(cf == POSITIVE):
        problems.append("positive label in a counterfactual column")
    for j in range(n):
        want = np.where(pos[:, j] == POSITIVE, NEGATIVE, MASKED)
        if not np.array_equal(cf[:, j], want):
            problems.append(f"counterfactual column {j} does not mirror the targets of expression {j}")
    return problems


@dataclass
class QueryBatch:
    """One frame paired with N expressions and their N counterfactuals."""

    expression_ids: list[str]
    texts: list[str]  # N expression texts then N counterfactual texts
    labels: LabelMatrix
    label_map: dict[int, int] = field(default_factory=dict)

    @property
    def n_queries(self) -> int:
        return self.labels.n_queries


def build_query_batch(
    frame: SceneRecord,
    expressions: list[tuple[str, str]],
    counterfactuals: list[CounterfactualQuery],
    label_map: dict[int, int],
) -> QueryBatch:
    """``expressions`` are (expression_id, text) pairs; counterfactual i must
    derive from expression i."""
    if len(counterfactuals) != len(expressions):
        raise ValueError(f"{len(expressions)} expressions but {len(counterfactuals)} counterfactuals")
    for (eid, _), cf in zip(expressions, counterfactuals):
        if cf.source_expression_id != eid:
            raise ValueError(f"counterfactual from {cf.source_expression_id!r} paired with expression {eid!r}")
    n_props, n = len(frame.proposals), len(expressions)
    entries = np.zeros((n_props, 2 * n), dtype=np.int8)
    for j, (eid, _) in enumerate(expressions):
        targets = set(frame.positives.get(eid, []))
        for i in range(n_props):
            if label_map.get(i) in targets:
                entries[i, j] = POSITIVE
        entries[:, n + j] = np.where(entries[:, j] == POSITIVE, NEGATIVE, MASKED)
    texts = [t for _, t in expressions] + [cf.text for cf in counterfactuals]
    return QueryBatch([e for e, _ in expressions], texts, LabelMatrix(entries, n), dict(label_map))


@dataclass
class LossBreakdown:
    main: Tensor
    counterfactual: Tensor
    total: Tensor
    main_terms: int
    cf_terms: int
    scores: Tensor | None = None
    cell_query: np.ndarray | None = None
    cell_proposal: np.ndarray | None = None


def plan_cells(labels: LabelMatrix, cf_enabled: bool = True, skip_masked: bool = True):
    """Which queries run and which (query, proposal) cells are scored.

    Returns ``(query_columns, cell_query, cell_proposal)`` where
    ``cell_query`` indexes into ``query_columns``. Counterfactual columns
    without a target never run; with ``skip_masked`` their masked cells are
    left out as well.
    """
    entries, n = labels.entries, labels.n_queries
    n_props = entries.shape[0]
    columns = list(range(n))
    if cf_enabled:
        columns += [n + j for j in range(n) if np.any(entries[:, n + j] == NEGATIVE)]
    cell_q, cell_p = [], []
    for qi, col in enumerate(columns):
        if col < n or not skip_masked:
            props = np.arange(n_props)
        else:
            props = np.flatnonzero(entries[:, col] == NEGATIVE)
        cell_q.append(np.full(len(props), qi, dtype=np.int64))
        cell_p.append(props)
    if not columns:
        return columns, np.zeros(0, np.int64), np.zeros(0, np.int64)
    return columns, np.concatenate(cell_q), np.concatenate(cell_p)


def frame_loss(
    model: HMSI,
    visual: Tensor,
    proposals: ProposalInputs,
    queries: QueryInputs,
    labels: LabelMatrix,
    cf_enabled: bool = True,
    esi_enabled: bool = True,
    skip_masked: bool = True,
) -> LossBreakdown | None:
    """L = L_m + L_cf for one frame; None when the frame has no proposals.

    ``queries`` holds all 2N encoded texts in label-column order.
    """
    n_props, n = labels.entries.shape[0], labels.n_queries
    if n_props == 0 or n == 0:
        return None
    columns, cell_q, cell_p = plan_cells(labels, cf_enabled, skip_masked)
    active = QueryInputs(queries.words[columns], queries.mask[columns], queries.sentence[columns])
    ctx = model.encode_queries(visual, active)
    scores = model.score_cells(ctx, proposals, cell_q, cell_p, esi_enabled)
    probs = clamp_probability(to_probability(scores))

    # expression columns come first and cover every proposal in order
    n_main = n * n_props
    pos_probs = probs[np.arange(n_main)].reshape((n, n_props))
    pos_labels = labels.positive_block().T.astype(probs.dtype)
    main = _bce(pos_probs, pos_labels).mean(axis=1).mean()

    cf_rows, cf_weights = [], []
    n_cf_columns = len(columns) - n
    for qi in range(n, len(columns)):
        col = columns[qi]
        targets = [
            k for k in np.flatnonzero(cell_q == qi) if labels.entries[cell_p[k], col] == NEGATIVE
        ]
        cf_rows += targets
        cf_weights += [1.0 / (len(targets) * n_cf_columns)] * len(targets)
    if cf_rows:
        p_cf = probs[np.asarray(cf_rows, dtype=np.int64)]
        weights = np.asarray(cf_weights, dtype=probs.dtype)
        counterfactual = (-T.log(1.0 - p_cf) * weights).sum()
        total = main + counterfactual
    else:
        counterfactual = T.zeros((), dtype=probs.dtype)
        total = main
    return LossBreakdown(main, counterfactual, total, n_main, len(cf_rows), scores, cell_q, cell_p)
