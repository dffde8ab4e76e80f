"""Frozen feature providers: a seeded word table, a synthetic visual
rasterizer, and a loader for precomputed feature containers."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from coal import container
from coal.priors import AttributeGrammar, SceneRecord, default_grammar
from coal.tensor import Tensor, default_dtype

UNKNOWN = "<unk>"


class FeatureError(KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


@dataclass
class TextEmbedding:
    words: Tensor
    sentence: Tensor
    tokens: list[str]

    def __post_init__(self):
        if len(self.tokens) < 1 or self.words.shape[0] != len(self.tokens):
            raise ValueError("text embedding needs one word vector per token and at least one token")


@dataclass
class VisualFeatureMap:
    features: Tensor

    @property
    def height(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def _token_seed(seed: int, token: str) -> list[int]:
    return [seed, zlib.crc32(token.encode("utf-8"))]


class WordTable:
    """Seeded word embeddings; tokens outside the vocabulary share one vector.

    Each row is drawn from a stream keyed on (seed, token), so growing the
    vocabulary never changes existing rows.
    """

    def __init__(self, vocab: list[str], dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.vocab = sorted(set(vocab) - {UNKNOWN})
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        rows = [np.random.default_rng(_token_seed(seed, tok)).normal(size=dim) for tok in self.vocab]
        rows.append(np.random.default_rng(_token_seed(seed, UNKNOWN)).normal(size=dim))
        self.table = np.stack(rows) if rows else np.zeros((1, dim))
        self.table.setflags(write=False)

    @classmethod
    def for_grammar(cls, grammar: AttributeGrammar, dim: int, seed: int = 0) -> "WordTable":
        return cls(grammar.words(), dim, seed)

    def lookup(self, token: str) -> np.ndarray:
        return self.table[self.index.get(token, len(self.vocab))]

    def encode_text(self, text: str, dtype=None) -> TextEmbedding:
        tokens = tokenize(text)
        if not tokens:
            raise ValueError("cannot encode empty text")
        dtype = dtype or default_dtype()
        raw = np.stack([self.lookup(t) for t in tokens])
        # pool in float64 then cast, so both precision modes share one recipe
        return TextEmbedding(Tensor(raw.astype(dtype)), Tensor(raw.mean(axis=0).astype(dtype)), tokens)


@dataclass
class SyntheticVisualEncoder:
    """Rasterizes ground-truth attribute vectors into an (H, W, d) map.

    Every slot value owns one coordinate of the attribute vector (one-hot
    blocks in slot order), scaled by a per-slot gain. Cells whose centers lie
    inside an object's box receive ``projection(attribute_vector)``; later
    objects overwrite earlier ones. Gaussian noise keyed on (seed, sequence,
    frame) is added afterwards.
    """

    dim: int = 32
    height: int = 24
    width: int = 72
    noise_sigma: float = 0.05
    seed: int = 0
    grammar: AttributeGrammar = field(default_factory=default_grammar)
    slot_gains: dict[str, float] = field(default_factory=lambda: {"color": 0.5})

    def __post_init__(self):
        offsets, total = {}, 0
        for slot in self.grammar.slots:
            offsets[slot] = total
            total += len(self.grammar.vocab[slot])
        self._offsets = offsets
        self.attribute_dim = total
        rng = np.random.default_rng([self.seed, 0x5EED])
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(total), size=(total, self.dim))
        self.projection.setflags(write=False)

    def attribute_vector(self, attributes: dict[str, str]) -> np.ndarray:
        vec = np.zeros(self.attribute_dim)
        for slot in self.grammar.slots:
            value = attributes.get(slot)
            if value is None:
                continue
            idx = self.grammar.vocab[slot].index(value)
            vec[self._offsets[slot] + idx] = self.slot_gains.get(slot, 1.0)
        return vec

    def covered_cells(self, box) -> tuple[np.ndarray, np.ndarray]:
        """Row and column index ranges whose cell centers fall inside ``box``."""
        ys = (np.arange(self.height) + 0.5) / self.height
        xs = (np.arange(self.width) + 0.5) / self.width
        rows = np.nonzero((ys >= box.y1) & (ys <= box.y2))[0]
        cols = np.nonzero((xs >= box.x1) & (xs <= box.x2))[0]
        return rows, cols

    def clean_map(self, frame: SceneRecord) -> np.ndarray:
        out = np.zeros((self.height, self.width, self.dim))
        for obj in frame.gt_objects:
            rows, cols = self.covered_cells(obj.box)
            if rows.size and cols.size:
                out[np.ix_(rows, cols)] = self.attribute_vector(obj.attributes) @ self.projection
        return out

    def encode_frame(self, frame: SceneRecord, dtype=None) -> VisualFeatureMap:
        out = self.clean_map(frame)
        if self.noise_sigma > 0:
            key = [self.seed, zlib.crc32(frame.sequence_id.encode("utf-8")), frame.frame_id]
            out = out + np.random.default_rng(key).normal(0.0, self.noise_sigma, size=out.shape)
        return VisualFeatureMap(Tensor(out.astype(dtype or default_dtype())))


def visual_key(sequence_id: str, frame_id: int) -> str:
    return f"{sequence_id}/{frame_id}/visual"


def load_precomputed(entries: dict[str, np.ndarray], key: str, dim: int | None = None, dtype=None) -> np.ndarray:
    if key not in entries:
        raise FeatureError(f"precomputed feature {key!r} not found")
    value = entries[key]
    if dim is not None and value.shape[-1] != dim:
        raise ValueError(f"{key}: feature dimension {value.shape[-1]} does not match configured {dim}")
    if dtype is not None and value.dtype != np.dtype(dtype):
        raise ValueError(f"{key}: stored dtype {value.dtype} does not match {np.dtype(dtype)}")
    return value


class PrecomputedVisualEncoder:
    """Serves (H, W, d) maps from a tensor container keyed ``<sequence>/<frame>/visual``."""

    def __init__(self, path: str | Path, dim: int):
        self.path = Path(path)
        self.dim = dim
        self.entries = container.load(self.path)

    def encode_frame(self, frame: SceneRecord, dtype=None) -> VisualFeatureMap:
        value = load_precomputed(self.entries, visual_key(frame.sequence_id, frame.frame_id), self.dim)
        if value.ndim != 3:
            raise ValueError(f"{visual_key(frame.sequence_id, frame.frame_id)}: expected an (H, W, d) map")
        return VisualFeatureMap(Tensor(value.astype(dtype or default_dtype())))
