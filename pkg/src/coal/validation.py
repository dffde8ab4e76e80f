"""Schema and cross-reference checks over a dataset directory."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from coal.priors import PriorError, SceneRecord, default_grammar, parse_counterfactual


@dataclass
class Issue:
    file: str
    record: str
    message: str

    def __str__(self) -> str:
        where = f"{self.file}:{self.record}" if self.record else self.file
        return f"{where}: {self.message}"


@dataclass
class ValidationReport:
    errors: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, file, record, message) -> None:
        self.errors.append(Issue(str(file), str(record), message))

    def warn(self, file, record, message) -> None:
        self.warnings.append(Issue(str(file), str(record), message))

    def format(self) -> str:
        lines = [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]
        lines.append(f"{len(self.errors)} error(s), {len(self.warnings)} warning(s)")
        return "\n".join(lines) + "\n"


def _box_issues(box) -> list[str]:
    out = []
    if box.w <= 0 or box.h <= 0:
        out.append("box has zero area")
    if box.x1 < -1e-9 or box.y1 < -1e-9 or box.x2 > 1 + 1e-9 or box.y2 > 1 + 1e-9:
        out.append("box extends outside the unit square")
    return out


def _check_frames(path: Path, sequence_id: str, report: ValidationReport) -> dict[int, SceneRecord]:
    frames: dict[int, SceneRecord] = {}
    previous = None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            where = f"line {line_no}"
            if not line.strip():
                continue
            try:
                frame = SceneRecord.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                report.error(path, where, f"unreadable frame record: {exc}")
                continue
            if frame.sequence_id != sequence_id:
                report.error(path, where, f"sequence_id {frame.sequence_id!r} does not match directory {sequence_id!r}")
            if frame.frame_id in frames:
                report.error(path, where, f"duplicate frame_id {frame.frame_id}")
            if previous is not None and frame.frame_id < previous:
                report.warn(path, where, "frames are not in ascending order")
            previous = frame.frame_id
            ids = [o.object_id for o in frame.gt_objects]
            if len(set(ids)) != len(ids):
                report.error(path, where, "duplicate object_id within a frame")
            for eid, targets in sorted(frame.positives.items()):
                for object_id in targets:
                    if object_id not in ids:
                        report.error(path, f"{where} positives[{eid}]", f"unknown object_id {object_id}")
            for k, obj in enumerate(frame.gt_objects):
                for msg in _box_issues(obj.box):
                    report.warn(path, f"{where} gt_objects[{k}]", msg)
            for k, prop in enumerate(frame.proposals):
                if not 0.0 <= prop.detector_score <= 1.0:
                    report.error(path, f"{where} proposals[{k}]", "detector_score outside [0, 1]")
                for msg in _box_issues(prop.box):
                    report.warn(path, f"{where} proposals[{k}]", msg)
            frames[frame.frame_id] = frame
    return frames


def _check_expressions(path: Path, frames: dict[int, SceneRecord], report: ValidationReport) -> set[str]:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        report.error(path, "", f"cannot parse: {exc}")
        return set()
    if not isinstance(raw, dict):
        report.error(path, "", "expected an object keyed by expression id")
        return set()
    for eid, obj in sorted(raw.items()):
        if not isinstance(obj, dict) or not str(obj.get("text", "")).strip():
            report.error(path, eid, "expression needs non-empty text")
            continue
        for frame_key, ids in sorted(obj.get("positives", {}).items()):
            try:
                frame_id = int(frame_key)
            except ValueError:
                report.error(path, f"{eid} positives[{frame_key}]", "frame key is not an integer")
                continue
            frame = frames.get(frame_id)
            if frame is None:
                report.error(path, f"{eid} positives[{frame_key}]", f"unknown frame {frame_id}")
                continue
            known = {o.object_id for o in frame.gt_objects}
            for object_id in ids:
                if object_id not in known:
                    report.error(path, f"{eid} positives[{frame_key}]", f"unknown object_id {object_id}")
    return set(raw)


def _check_counterfactuals(path: Path, expressions: set[str], report: ValidationReport) -> None:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        report.error(path, "", f"cannot parse: {exc}")
        return
    if raw == []:
        return
    if not isinstance(raw, dict):
        report.error(path, "", "expected an object keyed by expression id")
        return
    slots = set(default_grammar().slots)
    for eid, records in sorted(raw.items()):
        if eid not in expressions:
            report.error(path, eid, "counterfactuals for an unknown expression")
        for i, obj in enumerate(records):
            try:
                cf = parse_counterfactual(obj, eid, i, str(path))
            except PriorError as exc:
                report.error(path, f"{eid}[{i}]", exc.message)
                continue
            if cf.perturbed_slot not in slots:
                report.warn(path, f"{eid}[{i}]", f"slot {cf.perturbed_slot!r} is not in the default grammar")


def validate_sequence(directory: Path, report: ValidationReport) -> None:
    frames_path = directory / "frames.jsonl"
    expr_path = directory / "expressions.json"
    if not expr_path.exists():
        report.error(expr_path, "", "missing file")
        return
    frames = _check_frames(frames_path, directory.name, report)
    expressions = _check_expressions(expr_path, frames, report)
    cf_path = directory / "counterfactuals.json"
    if cf_path.exists():
        _check_counterfactuals(cf_path, expressions, report)
    else:
        report.warn(cf_path, "", "no counterfactual file; pools will be generated on the fly")


def validate_dataset(root: str | Path) -> ValidationReport:
    root = Path(root)
    report = ValidationReport()
    if not root.is_dir():
        report.error(root, "", "dataset directory does not exist")
        return report
    found = False
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (directory / "frames.jsonl").exists():
            continue
        found = True
        validate_sequence(directory, report)
    if not found:
        report.warn(root, "", "dataset contains no sequences")
    return report
