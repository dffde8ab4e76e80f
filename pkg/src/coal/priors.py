"""Observation priors as data: proposals with captions, synthetic scenes, and
rule-based counterfactual queries.

Everything here is a pure function of its inputs and an explicit
``numpy.random.Generator``; nothing touches global random state.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coal.matching import Box


class PriorError(ValueError):
    """Invalid prior record; ``index`` points at the offending entry."""

    def __init__(self, message: str, index: int | None = None, where: str | None = None):
        self.message = message
        self.index = index
        self.where = where
        prefix = ""
        if where:
            prefix += f"{where}: "
        if index is not None:
            prefix += f"record {index}: "
        super().__init__(prefix + message)


# --------------------------------------------------------------------------
# grammar


@dataclass(frozen=True)
class AttributeGrammar:
    slots: tuple[str, ...]
    vocab: dict[str, tuple[str, ...]]
    templates: tuple[str, ...]
    caption_template: str
    phrases: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        for slot in self.slots:
            if len(self.vocab.get(slot, ())) < 2:
                raise ValueError(f"slot {slot!r} needs at least two values")

    def phrase(self, slot: str, value: str) -> str:
        return self.phrases.get(slot, {}).get(value, value)

    def render(self, template: str, attributes: dict[str, str]) -> str:
        return template.format(**{s: self.phrase(s, attributes[s]) for s in template_slots(template)})

    def caption(self, attributes: dict[str, str]) -> str:
        return self.render(self.caption_template, attributes)

    def words(self) -> list[str]:
        """Every token the grammar can emit, sorted."""
        out = set()
        for template in self.templates + (self.caption_template,):
            literal = template
            for slot in template_slots(template):
                literal = literal.replace("{" + slot + "}", " ")
            out.update(literal.lower().split())
        for slot in self.slots:
            for value in self.vocab[slot]:
                out.update(self.phrase(slot, value).lower().split())
        return sorted(out)


def template_slots(template: str) -> list[str]:
    return [name for _, name, _, _ in string.Formatter().parse(template) if name]


def default_grammar() -> AttributeGrammar:
    return AttributeGrammar(
        slots=("category", "color", "location", "motion"),
        vocab={
            "category": ("car", "van", "person", "cyclist"),
            "color": ("red", "white", "black", "silver", "blue"),
            "location": ("left", "right", "center"),
            "motion": ("moving", "parked", "turning"),
        },
        templates=(
            "the {color} {category} {location}",
            "the {motion} {color} {category}",
            "the {category} {location}",
            "the {color} {category}",
            "{color} {category} that is {motion}",
            "the {motion} {category} {location}",
        ),
        caption_template="a {color} {category} {motion} {location}",
        phrases={"location": {"left": "on the left", "right": "on the right", "center": "in the center"}},
    )


def location_of(cx: float) -> str:
    if cx < 1 / 3:
        return "left"
    if cx > 2 / 3:
        return "right"
    return "center"


# --------------------------------------------------------------------------
# records


@dataclass
class Proposal:
    box: Box
    caption: str
    detector_score: float = 1.0

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError("proposal caption must be non-empty")

    def to_json(self) -> dict:
        return {"box": self.box.as_list(), "caption": self.caption, "detector_score": self.detector_score}


@dataclass
class GTObject:
    object_id: int
    box: Box
    attributes: dict[str, str]

    def to_json(self) -> dict:
        return {"object_id": self.object_id, "box": self.box.as_list(), "attributes": dict(self.attributes)}


@dataclass
class SceneRecord:
    sequence_id: str
    frame_id: int
    proposals: list[Proposal] = field(default_factory=list)
    gt_objects: list[GTObject] = field(default_factory=list)
    positives: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "frame_id": self.frame_id,
            "proposals": [p.to_json() for p in self.proposals],
            "gt_objects": [o.to_json() for o in self.gt_objects],
            "positives": {k: sorted(v) for k, v in sorted(self.positives.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneRecord":
        return cls(
            sequence_id=str(obj["sequence_id"]),
            frame_id=int(obj["frame_id"]),
            proposals=[
                Proposal(Box(*p["box"]), p["caption"], float(p.get("detector_score", 1.0)))
                for p in obj.get("proposals", [])
            ],
            gt_objects=[
                GTObject(int(o["object_id"]), Box(*o["box"]), dict(o.get("attributes", {})))
                for o in obj.get("gt_objects", [])
            ],
            positives={k: [int(i) for i in v] for k, v in obj.get("positives", {}).items()},
        )


@dataclass
class Expression:
    expression_id: str
    text: str
    attributes: dict[str, str]
    positives: dict[int, list[int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "attributes": dict(self.attributes),
            "positives": {str(f): sorted(ids) for f, ids in sorted(self.positives.items())},
        }


@dataclass
class CounterfactualQuery:
    text: str
    source_expression_id: str
    perturbed_slot: str
    original_value: str
    new_value: str

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "source_expression_id": self.source_expression_id,
            "perturbed_slot": self.perturbed_slot,
            "original_value": self.original_value,
            "new_value": self.new_value,
        }


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SceneParams:
    n_objects: int = 4
    caption_error_rate: float = 0.0
    box_jitter: float = 0.0
    spurious_rate: float = 0.0
    miss_rate: float = 0.0

    def validate(self) -> None:
        for name in ("caption_error_rate", "spurious_rate", "miss_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.box_jitter < 0:
            raise ValueError("box_jitter must be non-negative")
        if self.n_objects < 0:
            raise ValueError("n_objects must be non-negative")


GRID_COLUMNS = 6
GRID_ROWS = 3


def _random_attributes(grammar: AttributeGrammar, rng: np.random.Generator) -> dict[str, str]:
    return {slot: grammar.vocab[slot][rng.integers(len(grammar.vocab[slot]))] for slot in grammar.slots}


def _place_objects(grammar: AttributeGrammar, n: int, rng: np.random.Generator) -> list[GTObject]:
    capacity = GRID_COLUMNS * GRID_ROWS
    if n > capacity:
        raise ValueError(f"{n} objects exceed grid capacity {capacity}")
    cells = rng.permutation(capacity)[:n]
    cw, ch = 1.0 / GRID_COLUMNS, 1.0 / GRID_ROWS
    objects = []
    for object_id, cell in enumerate(sorted(int(c) for c in cells), start=1):
        col, row = cell % GRID_COLUMNS, cell // GRID_COLUMNS
        w = rng.uniform(0.45, 0.8) * cw
        h = rng.uniform(0.45, 0.8) * ch
        cx = col * cw + w / 2 + rng.uniform(0, cw - w)
        cy = row * ch + h / 2 + rng.uniform(0, ch - h)
        attrs = _random_attributes(grammar, rng)
        attrs["location"] = location_of(cx)
        objects.append(GTObject(object_id, Box(cx, cy, w, h), attrs))
    return objects


def _clip_box(box: Box) -> Box:
    x1, y1 = max(0.0, box.x1), max(0.0, box.y1)
    x2, y2 = min(1.0, box.x2), min(1.0, box.y2)
    return Box.from_xyxy(x1, y1, max(x1, x2), max(y1, y2))


def hallucinate(grammar: AttributeGrammar, attributes: dict[str, str], rng: np.random.Generator) -> dict[str, str]:
    """Swap one slot for a wrong value."""
    slot = grammar.slots[rng.integers(len(grammar.slots))]
    others = [v for v in grammar.vocab[slot] if v != attributes[slot]]
    wrong = dict(attributes)
    wrong[slot] = others[rng.integers(len(others))]
    return wrong


def observe(
    grammar: AttributeGrammar, objects: list[GTObject], params: SceneParams, rng: np.random.Generator
) -> list[Proposal]:
    """Noisy detector/captioner output over ground-truth objects."""
    proposals = []
    spurious = []
    for obj in objects:
        if params.miss_rate > 0 and rng.random() < params.miss_rate:
            continue
        box = obj.box
        if params.box_jitter > 0:
            j = rng.normal(0.0, params.box_jitter, size=4)
            box = _clip_box(Box(box.cx + j[0], box.cy + j[1], max(0.01, box.w + j[2]), max(0.01, box.h + j[3])))
        attrs = obj.attributes
        if params.caption_error_rate > 0 and rng.random() < params.caption_error_rate:
            attrs = hallucinate(grammar, attrs, rng)
        score = 1.0 if params.miss_rate == 0 and params.spurious_rate == 0 else float(rng.uniform(0.6, 1.0))
        proposals.append(Proposal(box, grammar.caption(attrs), score))
    for _ in objects:
        if params.spurious_rate > 0 and rng.random() < params.spurious_rate:
            w, h = rng.uniform(0.04, 0.12), rng.uniform(0.08, 0.25)
            cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
            attrs = _random_attributes(grammar, rng)
            attrs["location"] = location_of(cx)
            spurious.append(Proposal(Box(cx, cy, w, h), grammar.caption(attrs), float(rng.uniform(0.2, 0.6))))
    return proposals + spurious


def generate_scene(
    grammar: AttributeGrammar,
    params: SceneParams,
    rng: np.random.Generator,
    sequence_id: str = "synthetic",
    frame_id: int = 0,
) -> SceneRecord:
    params.validate()
    objects = _place_objects(grammar, params.n_objects, rng)
    return SceneRecord(sequence_id, frame_id, observe(grammar, objects, params, rng), objects, {})


def matches(attributes: dict[str, str], required: dict[str, str]) -> bool:
    return all(attributes.get(slot) == value for slot, value in required.items())


# --------------------------------------------------------------------------
# counterfactuals


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def _replace_phrase(text: str, old: str, new: str) -> str:
    words = _tokens(text)
    target = _tokens(old)
    k = len(target)
    for i in range(len(words) - k + 1):
        if words[i : i + k] == target:
            return " ".join(words[:i] + _tokens(new) + words[i + k :])
    raise PriorError(f"phrase {old!r} not found in {text!r}")


def perturb_expression(
    expression: Expression, grammar: AttributeGrammar, rng: np.random.Generator
) -> CounterfactualQuery:
    """Replace one realized attribute with a different value, keeping the rest."""
    realized = [s for s in grammar.slots if s in expression.attributes]
    if not realized:
        raise PriorError(f"expression {expression.expression_id!r} has no perturbable slot")
    slot = realized[rng.integers(len(realized))]
    original = expression.attributes[slot]
    others = [v for v in grammar.vocab[slot] if v != original]
    new = others[rng.integers(len(others))]
    text = _replace_phrase(expression.text, grammar.phrase(slot, original), grammar.phrase(slot, new))
    return CounterfactualQuery(text, expression.expression_id, slot, original, new)


def parse_counterfactual(obj: dict, expression_id: str, index: int, where: str) -> CounterfactualQuery:
    try:
        cf = CounterfactualQuery(
            text=str(obj["text"]),
            source_expression_id=str(obj.get("source_expression_id", expression_id)),
            perturbed_slot=str(obj["perturbed_slot"]),
            original_value=str(obj["original_value"]),
            new_value=str(obj["new_value"]),
        )
    except (KeyError, TypeError) as exc:
        raise PriorError(f"expression {expression_id!r}: missing field {exc}", index, where) from exc
    if not cf.text.strip():
        raise PriorError(f"expression {expression_id!r}: empty counterfactual text", index, where)
    if cf.new_value == cf.original_value:
        raise PriorError(
            f"expression {expression_id!r}: new_value equals original_value ({cf.new_value!r})", index, where
        )
    if cf.source_expression_id != expression_id:
        raise PriorError(
            f"expression {expression_id!r}: record names source {cf.source_expression_id!r}", index, where
        )
    return cf


def load_counterfactuals(path: str | Path) -> dict[str, list[CounterfactualQuery]]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PriorError(f"cannot parse: {exc}", where=str(path)) from exc
    if isinstance(raw, list):
        if raw:
            raise PriorError("expected an object keyed by expression id", where=str(path))
        return {}
    out: dict[str, list[CounterfactualQuery]] = {}
    for expression_id, records in raw.items():
        out[expression_id] = [
            parse_counterfactual(obj, expression_id, i, str(path)) for i, obj in enumerate(records)
        ]
    return out


def write_counterfactuals(path: str | Path, queries: dict[str, list[CounterfactualQuery]]) -> None:
    payload = {k: [q.to_json() for q in v] for k, v in sorted(queries.items())}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# proposal ingestion


def ingest_proposals(record: dict) -> list[Proposal]:
    """Normalize a raw detector/captioner frame record.

    Entries carry either ``box`` (normalized cx, cy, w, h) or ``bbox``
    (pixel x1, y1, x2, y2, with ``image_size`` = [width, height] on the
    record). Order is preserved.
    """
    size = record.get("image_size")
    out = []
    for i, entry in enumerate(record.get("proposals", [])):
        if "bbox" in entry:
            if not size:
                raise PriorError("pixel bbox without image_size", i)
            width, height = float(size[0]), float(size[1])
            x1, y1, x2, y2 = (float(v) for v in entry["bbox"])
            cx, cy = (x1 + x2) / 2 / width, (y1 + y2) / 2 / height
            w, h = (x2 - x1) / width, (y2 - y1) / height
        elif "box" in entry:
            cx, cy, w, h = (float(v) for v in entry["box"])
        else:
            raise PriorError("entry has neither box nor bbox", i)
        if w < 0 or h < 0:
            raise PriorError(f"negative box size (w={w:.6g}, h={h:.6g})", i)
        tol = 1e-9
        if cx - w / 2 < -tol or cy - h / 2 < -tol or cx + w / 2 > 1 + tol or cy + h / 2 > 1 + tol:
            raise PriorError("box extends outside the image after normalization", i)
        caption = str(entry.get("caption", ""))
        if not caption.strip():
            raise PriorError("empty caption", i)
        score = float(entry.get("detector_score", entry.get("score", 1.0)))
        out.append(Proposal(Box(cx, cy, w, h), caption, score))
    return out


# --------------------------------------------------------------------------
# sequences and dataset layout


@dataclass
class SequenceParams:
    frames: int = 20
    objects: int = 4
    expressions: int = 10
    counterfactuals: int = 4
    scene: SceneParams = field(default_factory=SceneParams)


@dataclass
class Sequence:
    sequence_id: str
    frames: list[SceneRecord]
    expressions: dict[str, Expression]
    counterfactuals: dict[str, list[CounterfactualQuery]]


_SPEED = {"moving": 0.012, "turning": 0.008, "parked": 0.0}


def generate_sequence(
    grammar: AttributeGrammar, params: SequenceParams, rng: np.random.Generator, sequence_id: str
) -> Sequence:
    """A short clip of persistent objects plus expressions and counterfactuals."""
    params.scene.validate()
    objects = _place_objects(grammar, params.objects, rng)
    velocity = {}
    for obj in objects:
        speed = _SPEED[obj.attributes["motion"]]
        direction = 1.0 if rng.random() < 0.5 else -1.0
        velocity[obj.object_id] = np.array([direction * speed, 0.0])
    heading_rate = {o.object_id: rng.uniform(0.15, 0.3) for o in objects}

    frames: list[SceneRecord] = []
    for t in range(params.frames):
        if t > 0:
            moved = []
            for obj in objects:
                vel = velocity[obj.object_id]
                if obj.attributes["motion"] == "turning":
                    angle = heading_rate[obj.object_id]
                    c, s = np.cos(angle), np.sin(angle)
                    vel = np.array([c * vel[0] - s * vel[1], s * vel[0] + c * vel[1]])
                cx, cy = obj.box.cx + vel[0], obj.box.cy + vel[1]
                half_w, half_h = obj.box.w / 2, obj.box.h / 2
                if cx - half_w < 0 or cx + half_w > 1:
                    vel = np.array([-vel[0], vel[1]])
                    cx = min(max(cx, half_w), 1 - half_w)
                if cy - half_h < 0 or cy + half_h > 1:
                    vel = np.array([vel[0], -vel[1]])
                    cy = min(max(cy, half_h), 1 - half_h)
                velocity[obj.object_id] = vel
                attrs = dict(obj.attributes)
                attrs["location"] = location_of(cx)
                moved.append(GTObject(obj.object_id, Box(cx, cy, obj.box.w, obj.box.h), attrs))
            objects = moved
        frames.append(SceneRecord(sequence_id, t, observe(grammar, objects, params.scene, rng), list(objects), {}))

    expressions: dict[str, Expression] = {}
    seen = set()
    attempts = 0
    while len(expressions) < params.expressions and attempts < 200 and frames:
        attempts += 1
        template = grammar.templates[rng.integers(len(grammar.templates))]
        frame = frames[rng.integers(len(frames))]
        if not frame.gt_objects:
            break
        ref = frame.gt_objects[rng.integers(len(frame.gt_objects))]
        attrs = {s: ref.attributes[s] for s in template_slots(template)}
        text = grammar.render(template, attrs)
        if text in seen:
            continue
        seen.add(text)
        expression_id = f"{sequence_id}-e{len(expressions):02d}"
        expressions[expression_id] = Expression(expression_id, text, attrs)
    for expression in expressions.values():
        for frame in frames:
            ids = [o.object_id for o in frame.gt_objects if matches(o.attributes, expression.attributes)]
            expression.positives[frame.frame_id] = ids
            frame.positives[expression.expression_id] = ids

    counterfactuals = {}
    for expression_id, expression in expressions.items():
        pool: list[CounterfactualQuery] = []
        texts = set()
        for _ in range(params.counterfactuals * 10):
            if len(pool) >= params.counterfactuals:
                break
            cf = perturb_expression(expression, grammar, rng)
            if cf.text not in texts:
                texts.add(cf.text)
                pool.append(cf)
        counterfactuals[expression_id] = pool
    return Sequence(sequence_id, frames, expressions, counterfactuals)


def write_sequence(root: str | Path, sequence: Sequence) -> None:
    directory = Path(root) / sequence.sequence_id
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "frames.jsonl", "w") as fh:
        for frame in sequence.frames:
            fh.write(json.dumps(frame.to_json(), sort_keys=True) + "\n")
    expressions = {k: v.to_json() for k, v in sorted(sequence.expressions.items())}
    (directory / "expressions.json").write_text(json.dumps(expressions, indent=1, sort_keys=True) + "\n")
    write_counterfactuals(directory / "counterfactuals.json", sequence.counterfactuals)


def read_sequence(directory: str | Path) -> Sequence:
    directory = Path(directory)
    frames = []
    frames_path = directory / "frames.jsonl"
    with open(frames_path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                frames.append(SceneRecord.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise PriorError(f"line {line_no}: {exc}", where=str(frames_path)) from exc
    expr_path = directory / "expressions.json"
    try:
        raw = json.loads(expr_path.read_text())
    except json.JSONDecodeError as exc:
        raise PriorError(f"cannot parse: {exc}", where=str(expr_path)) from exc
    expressions = {
        k: Expression(
            k,
            v["text"],
            dict(v.get("attributes", {})),
            {int(f): [int(i) for i in ids] for f, ids in v.get("positives", {}).items()},
        )
        for k, v in raw.items()
    }
    cf_path = directory / "counterfactuals.json"
    counterfactuals = load_counterfactuals(cf_path) if cf_path.exists() else {}
    for frame in frames:
        for expression_id, expression in expressions.items():
            if frame.frame_id in expression.positives:
                frame.positives.setdefault(expression_id, list(expression.positives[frame.frame_id]))
    return Sequence(directory.name, frames, expressions, counterfactuals)


def read_dataset(root: str | Path) -> list[Sequence]:
    root = Path(root)
    if not root.is_dir():
        raise PriorError("dataset directory does not exist", where=str(root))
    return [read_sequence(d) for d in sorted(root.iterdir()) if (d / "frames.jsonl").exists()]


def write_dataset(root: str | Path, sequences: list[Sequence]) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    for sequence in sequences:
        write_sequence(root, sequence)
