"""HOTA and its decomposition for expression-conditioned tracking.

Frames are matched independently at every localization threshold alpha by
optimal assignment on IoU among pairs with IoU >= alpha. The reference
toolkit instead aligns with a global two-pass score, so numbers here are
close to, but not bit-compatible with, the official implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coal.matching import Box, iou_matrix, linear_assignment
from coal.priors import Sequence
from coal.tracker import parse_records

ALPHAS = np.round(np.arange(1, 20) * 0.05, 2)
METRIC_NAMES = ("hota", "deta", "assa", "detre", "detpr", "assre", "asspr", "loca")
COLUMN_TITLES = ("HOTA", "DetA", "AssA", "DetRe", "DetPr", "AssRe", "AssPr", "LocA")

# one frame: list of (identity, box)
FrameObjects = list[tuple[int, Box]]


@dataclass
class FrameMatch:
    pairs: list[tuple[int, int, float]]  # (gt index, pred index, IoU)
    false_positives: list[int]
    false_negatives: list[int]


def _check_ids(objects: FrameObjects, what: str) -> None:
    ids = [i for i, _ in objects]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate {what} ids within one frame: {sorted(ids)}")


def match_frame(gt: FrameObjects, pred: FrameObjects, alpha: float, ious: np.ndarray | None = None) -> FrameMatch:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    _check_ids(gt, "ground-truth")
    _check_ids(pred, "predicted")
    if ious is None:
        ious = iou_matrix([b for _, b in gt], [b for _, b in pred])
    if not gt or not pred:
        return FrameMatch([], list(range(len(pred))), list(range(len(gt))))
    result = linear_assignment(ious, maximize=True, forbidden=ious < alpha)
    pairs = [(r, c, float(ious[r, c])) for r, c in result.pairs]
    return FrameMatch(pairs, result.unmatched_columns, result.unmatched_rows)


@dataclass
class HotaResult:
    hota: float
    deta: float
    assa: float
    detre: float
    detpr: float
    assre: float
    asspr: float
    loca: float
    per_alpha: dict[str, np.ndarray] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_json(self) -> dict:
        out = self.values()
        out["per_alpha"] = {k: [float(x) for x in v] for k, v in self.per_alpha.items()}
        return out


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def _alpha_terms(gt: dict[int, FrameObjects], pred: dict[int, FrameObjects], ious: dict, alpha: float) -> dict[str, float]:
    tp = fn = fp = 0
    iou_sum = 0.0
    gt_count: dict[int, int] = {}
    pred_count: dict[int, int] = {}
    pair_count: dict[tuple[int, int], int] = {}
    for frame in sorted(set(gt) | set(pred)):
        g, p = gt.get(frame, []), pred.get(frame, [])
        for gid, _ in g:
            gt_count[gid] = gt_count.get(gid, 0) + 1
        for pid, _ in p:
            pred_count[pid] = pred_count.get(pid, 0) + 1
        m = match_frame(g, p, alpha, ious[frame])
        tp += len(m.pairs)
        fp += len(m.false_positives)
        fn += len(m.false_negatives)
        for r, c, value in m.pairs:
            iou_sum += value
            key = (g[r][0], p[c][0])
            pair_count[key] = pair_count.get(key, 0) + 1
    ass = ass_re = ass_pr = 0.0
    for (gid, pid), n in pair_count.items():
        ass += n * n / (gt_count[gid] + pred_count[pid] - n)
        ass_re += n * n / gt_count[gid]
        ass_pr += n * n / pred_count[pid]
    deta = _ratio(tp, tp + fn + fp)
    assa = _ratio(ass, tp)
    return {
        "hota": float(np.sqrt(deta * assa)),
        "deta": deta,
        "assa": assa,
        "detre": _ratio(tp, tp + fn),
        "detpr": _ratio(tp, tp + fp),
        "assre": _ratio(ass_re, tp),
        "asspr": _ratio(ass_pr, tp),
        "loca": _ratio(iou_sum, tp),
    }


def hota(gt: dict[int, FrameObjects], pred: dict[int, FrameObjects]) -> HotaResult:
    """Score a predicted sequence against ground truth, both keyed by frame."""
    frames = sorted(set(gt) | set(pred))
    for frame in frames:
        _check_ids(gt.get(frame, []), "ground-truth")
        _check_ids(pred.get(frame, []), "predicted")
    if not any(gt.get(f) for f in frames) and not any(pred.get(f) for f in frames):
        per_alpha = {name: np.ones(len(ALPHAS)) for name in METRIC_NAMES}
        return HotaResult(*([1.0] * len(METRIC_NAMES)), per_alpha=per_alpha)
    ious = {
        f: iou_matrix([b for _, b in gt.get(f, [])], [b for _, b in pred.get(f, [])]) for f in frames
    }
    rows = [_alpha_terms(gt, pred, ious, float(a)) for a in ALPHAS]
    per_alpha = {name: np.array([r[name] for r in rows]) for name in METRIC_NAMES}
    return HotaResult(**{name: float(per_alpha[name].mean()) for name in METRIC_NAMES}, per_alpha=per_alpha)


def average_results(results: list[HotaResult]) -> HotaResult:
    if not results:
        raise ValueError("nothing to average")
    per_alpha = {
        name: np.mean([r.per_alpha[name] for r in results], axis=0) for name in METRIC_NAMES if results[0].per_alpha
    }
    return HotaResult(
        **{name: float(np.mean([getattr(r, name) for r in results])) for name in METRIC_NAMES}, per_alpha=per_alpha
    )


# --------------------------------------------------------------------------
# benchmark harness


def prediction_path(root: str | Path, sequence_id: str, expression_id: str) -> Path:
    return Path(root) / sequence_id / f"{expression_id}.txt"


def ground_truth(sequence: Sequence, expression_id: str) -> dict[int, FrameObjects]:
    expression = sequence.expressions[expression_id]
    out = {}
    for frame in sequence.frames:
        targets = set(expression.positives.get(frame.frame_id, []))
        out[frame.frame_id] = [(o.object_id, o.box) for o in frame.gt_objects if o.object_id in targets]
    return out


def read_predictions(path: str | Path) -> dict[int, FrameObjects]:
    out: dict[int, FrameObjects] = {}
    for record in parse_records(Path(path).read_text()):
        out.setdefault(record.frame_id, []).append((record.track_id, record.box))
    return out


@dataclass
class ExpressionResult:
    sequence_id: str
    expression_id: str
    result: HotaResult
    missing: bool = False


@dataclass
class BenchmarkReport:
    entries: list[ExpressionResult]
    aggregate: HotaResult | None

    def table(self) -> str:
        lines = [
            "# frame matching: per-alpha optimal IoU assignment (approximates the reference two-pass alignment)",
            "# LocA averaged over alpha; values in percent",
        ]
        width = max([len("aggregate")] + [len(f"{e.sequence_id}/{e.expression_id}") for e in self.entries])
        lines.append(f"{'name':<{width}}  " + "  ".join(f"{t:>6}" for t in COLUMN_TITLES))

        def row(name: str, result: HotaResult, note: str = "") -> str:
            cells = "  ".join(f"{100 * getattr(result, m):6.2f}" for m in METRIC_NAMES)
            return f"{name:<{width}}  {cells}{note}"

        for e in self.entries:
            lines.append(row(f"{e.sequence_id}/{e.expression_id}", e.result, "  (missing prediction file)" if e.missing else ""))
        if self.aggregate is not None:
            lines.append(row("aggregate", self.aggregate))
        return "\n".join(lines) + "\n"

    def json_lines(self) -> str:
        out = []
        for e in self.entries:
            obj = {"sequence_id": e.sequence_id, "expression_id": e.expression_id, "missing": e.missing}
            obj.update(e.result.values())
            out.append(json.dumps(obj, sort_keys=True))
        if self.aggregate is not None:
            obj = {"aggregate": True, "count": len(self.entries)}
            obj.update(self.aggregate.values())
            out.append(json.dumps(obj, sort_keys=True))
        return "\n".join(out) + "\n"


def evaluate_benchmark(sequences: list[Sequence], predictions: str | Path) -> BenchmarkReport:
    entries = []
    for sequence in sorted(sequences, key=lambda s: s.sequence_id):
        for expression_id in sorted(sequence.expressions):
            path = prediction_path(predictions, sequence.sequence_id, expression_id)
            missing = not path.exists()
            pred = {} if missing else read_predictions(path)
            result = hota(ground_truth(sequence, expression_id), pred)
            entries.append(ExpressionResult(sequence.sequence_id, expression_id, result, missing))
    aggregate = average_results([e.result for e in entries]) if entries else None
    return BenchmarkReport(entries, aggregate)
