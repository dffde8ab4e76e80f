"""Deterministic per-frame optimization loop, checkpoints, and loss logs."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from coal import container
from coal import tensor as T
from coal.encoders import PrecomputedVisualEncoder, SyntheticVisualEncoder, TextEmbedding, WordTable
from coal.hmsi import HMSI, HMSIConfig, ProposalInputs, QueryInputs
from coal.losses import assign_labels, build_query_batch, frame_loss
from coal.optim import AdamWState, adamw_step
from coal.priors import Sequence, default_grammar, perturb_expression
from coal.tensor import NumericalError, Tensor

CHECKPOINT_VERSION = 1
PATH_FIELDS = ("dataset", "checkpoint", "log")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    n_queries: int = 10
    seed: int = 42
    precision: str = "f32"
    dataset: str | None = None
    checkpoint: str | None = None
    log: str | None = None
    cf_enabled: bool = True
    esi_enabled: bool = True
    iou_threshold: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    dim: int = 32
    heads: int = 8
    levels: int = 4
    points: int = 4
    fusion_layers: int = 1
    map_height: int = 24
    map_width: int = 72
    visual_noise: float = 0.05
    features: str = "synthetic"
    feature_path: str | None = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.features not in ("synthetic", "precomputed"):
            raise ValueError(f"unknown feature mode {self.features!r}")
        if self.features == "precomputed" and not self.feature_path:
            raise ValueError("precomputed features need feature_path")
        self.model_config().validate()

    def model_config(self) -> HMSIConfig:
        return HMSIConfig(self.dim, self.heads, self.levels, self.points, self.fusion_layers)

    @property
    def dtype(self) -> np.dtype:
        return T.resolve_dtype(self.precision)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**values)


def build_encoders(config: TrainConfig):
    table = WordTable.for_grammar(default_grammar(), config.dim, seed=config.seed)
    if config.features == "precomputed":
        visual = PrecomputedVisualEncoder(config.feature_path, config.dim)
    else:
        visual = SyntheticVisualEncoder(
            dim=config.dim,
            height=config.map_height,
            width=config.map_width,
            noise_sigma=config.visual_noise,
            seed=config.seed,
        )
    return table, visual


def build_model(config: TrainConfig) -> HMSI:
    return HMSI(config.model_config(), np.random.default_rng(config.seed), config.dtype)


@dataclass
class FrameInputs:
    visual: Tensor
    proposals: ProposalInputs
    label_map: dict[int, int]


class FeatureCache:
    """Frozen encoder outputs, computed once per frame / text."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.table, self.visual = build_encoders(config)
        self._frames: dict[tuple[str, int], FrameInputs] = {}
        self._texts: dict[str, TextEmbedding] = {}

    def text(self, text: str) -> TextEmbedding:
        hit = self._texts.get(text)
        if hit is None:
            hit = self._texts[text] = self.table.encode_text(text, self.config.dtype)
        return hit

    def frame(self, frame) -> FrameInputs:
        key = (frame.sequence_id, frame.frame_id)
        hit = self._frames.get(key)
        if hit is None:
            dtype = self.config.dtype
            visual = self.visual.encode_frame(frame, dtype).features
            proposals = ProposalInputs.build(
                [p.box for p in frame.proposals], [self.text(p.caption) for p in frame.proposals], self.config.dim, dtype
            )
            gt = [(o.object_id, o.box) for o in frame.gt_objects]
            label_map = assign_labels([p.box for p in frame.proposals], gt, self.config.iou_threshold)
            hit = self._frames[key] = FrameInputs(visual, proposals, label_map)
        return hit


@dataclass
class TrainState:
    model: HMSI
    optimizer: AdamWState
    epoch: int = 0
    log: list[dict] = field(default_factory=list)


def _global_clip(grads: dict[str, Tensor], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g.data.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.data = (g.data * scale).astype(g.dtype)


def sample_queries(sequence: Sequence, frame, n_queries: int, rng: np.random.Generator, grammar=None):
    """Pick up to ``n_queries`` expressions and one counterfactual for each."""
    ids = sorted(sequence.expressions)
    if len(ids) > n_queries:
        ids = [ids[i] for i in sorted(rng.choice(len(ids), size=n_queries, replace=False))]
    chosen, cfs = [], []
    for eid in ids:
        expression = sequence.expressions[eid]
        pool = sequence.counterfactuals.get(eid) or []
        if pool:
            cf = pool[int(rng.integers(len(pool)))]
        else:
            cf = perturb_expression(expression, grammar or default_grammar(), rng)
        chosen.append((eid, expression.text))
        cfs.append(cf)
    return chosen, cfs


class Trainer:
    def __init__(self, config: TrainConfig, sequences: list[Sequence], state: TrainState | None = None):
        config.validate()
        self.config = config
        self.sequences = sequences
        with T.precision(config.dtype):
            self.cache = FeatureCache(config)
            self.state = state or TrainState(build_model(config), AdamWState())

    @property
    def model(self) -> HMSI:
        return self.state.model

    def _step(self, sequence: Sequence, frame, rng: np.random.Generator):
        chosen, cfs = sample_queries(sequence, frame, self.config.n_queries, rng)
        inputs = self.cache.frame(frame)
        if not chosen or len(inputs.proposals) == 0:
            return None
        batch = build_query_batch(frame, chosen, cfs, inputs.label_map)
        queries = QueryInputs.build([self.cache.text(t) for t in batch.texts], self.config.dim, self.config.dtype)
        params = self.model.parameters()
        where = f"sequence {frame.sequence_id!r} frame {frame.frame_id}"
        try:
            with T.Tape():
                result = frame_loss(
                    self.model,
                    inputs.visual,
                    inputs.proposals,
                    queries,
                    batch.labels,
                    cf_enabled=self.config.cf_enabled,
                    esi_enabled=self.config.esi_enabled,
                )
                if result is None:
                    return None
                grads = T.backward(result.total, params)
        except NumericalError as exc:
            raise NumericalError(f"non-finite value at {where}: {exc}") from exc
        if not np.isfinite(result.total.item()):
            raise NumericalError(f"non-finite loss at {where}")
        if self.config.grad_clip > 0:
            _global_clip(grads, self.config.grad_clip)
        adamw_step(
            params,
            grads,
            self.state.optimizer,
            lr=self.config.lr,
            betas=(self.config.beta1, self.config.beta2),
            weight_decay=self.config.weight_decay,
            eps=self.config.adam_eps,
        )
        return result

    def train_epoch(self) -> dict:
        epoch = self.state.epoch + 1
        rng = np.random.default_rng([self.config.seed, epoch])
        main, cf, total = [], [], []
        with T.precision(self.config.dtype):
            for sequence in self.sequences:
                for i in rng.permutation(len(sequence.frames)):
                    result = self._step(sequence, sequence.frames[int(i)], rng)
                    if result is None:
                        continue
                    main.append(result.main.item())
                    total.append(result.total.item())
                    if result.cf_terms:
                        cf.append(result.counterfactual.item())
        record = {
            "epoch": epoch,
            "main": float(np.mean(main)) if main else 0.0,
            "cf": float(np.mean(cf)) if cf else 0.0,
            "total": float(np.mean(total)) if total else 0.0,
            "frames": len(total),
        }
        self.state.epoch = epoch
        self.state.log.append(record)
        return record

    def run(self, on_epoch: Callable[[dict], None] | None = None) -> TrainState:
        while self.state.epoch < self.config.epochs:
            record = self.train_epoch()
            if self.config.log:
                with open(self.config.log, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            if on_epoch:
                on_epoch(record)
        return self.state


def train(config: TrainConfig, sequences: list[Sequence], on_epoch=None) -> TrainState:
    state = Trainer(config, sequences).run(on_epoch)
    if config.checkpoint:
        save_checkpoint(config.checkpoint, state, config)
    return state


# --------------------------------------------------------------------------
# checkpoints


def _encode_text(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_text(values: np.ndarray) -> str:
    return values.astype(np.uint8).tobytes().decode("utf-8")


def checkpoint_entries(state: TrainState, config: TrainConfig) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for p in state.model.parameters():
        entries[f"param/{p.name}"] = p.data
    for name in sorted(state.optimizer.m):
        entries[f"adamw.m/{name}"] = state.optimizer.m[name]
        entries[f"adamw.v/{name}"] = state.optimizer.v[name]
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "step": state.optimizer.step,
        "epoch": state.epoch,
        "dim": config.dim,
        "heads": config.heads,
        "levels": config.levels,
        "points": config.points,
        "fusion_layers": config.fusion_layers,
        "precision_bits": 64 if config.precision == "f64" else 32,
        # kernels are deterministic for a fixed thread count; 0 = library default
        "threads": int(os.environ.get("OMP_NUM_THREADS", "0") or 0),
    }
    for key, value in meta.items():
        entries[f"meta/{key}"] = np.array([value], dtype=np.float64)
    # run-specific paths stay out so identical runs give identical bytes
    stored = {**config.to_dict(), **{k: None for k in PATH_FIELDS}}
    entries["meta/config_json"] = _encode_text(json.dumps(stored, sort_keys=True))
    entries["meta/log_json"] = _encode_text(json.dumps(state.log, sort_keys=True))
    return entries


def save_checkpoint(path: str | Path, state: TrainState, config: TrainConfig) -> None:
    path = Path(path)
    container.save(path, checkpoint_entries(state, config))
    path.with_name(path.name + ".json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    state: TrainState


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        entries = container.load(path)
    except container.ContainerError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    try:
        version = int(entries["meta/format_version"][0])
    except KeyError as exc:
        raise CheckpointError(f"{path}: not a training checkpoint") from exc
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    config = TrainConfig.from_dict(json.loads(_decode_text(entries["meta/config_json"])))
    with T.precision(config.dtype):
        model = build_model(config)
    params = {k[len("param/") :]: v for k, v in entries.items() if k.startswith("param/")}
    model.load_state_dict(params)
    optimizer = AdamWState(
        step=int(entries["meta/step"][0]),
        m={k[len("adamw.m/") :]: v for k, v in entries.items() if k.startswith("adamw.m/")},
        v={k[len("adamw.v/") :]: v for k, v in entries.items() if k.startswith("adamw.v/")},
    )
    log = json.loads(_decode_text(entries["meta/log_json"]))
    state = TrainState(model, optimizer, int(entries["meta/epoch"][0]), log)
    return Checkpoint(config, state)


def resume(checkpoint: Checkpoint, sequences: list[Sequence], epochs: int | None = None) -> Trainer:
    config = checkpoint.config
    if epochs is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "epochs": epochs})
    return Trainer(config, sequences, checkpoint.state)
