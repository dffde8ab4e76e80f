"""Hierarchical multi-stream integration: scores proposals against a
referring expression by fusing visual, caption, and positional streams.

Computation is split in two stages so training can batch many queries per
frame:

* per query (``encode_queries``): pixel/word bi-fusion, the multi-scale
  pyramid, and the referring vector;
* per (query, proposal) cell (``cell_streams``): deformable sampling, the
  caption filter/aggregate path, positional embedding, holistic projection,
  and the cosine score.

All per-cell layers use row-exact kernels, so a cell's value and gradient
never depend on which other cells share the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from coal import tensor as T
from coal.encoders import TextEmbedding
from coal.matching import Box
from coal.nn import Linear, Module, MultiHeadCrossAttention
from coal.tensor import Tensor


@dataclass
class HMSIConfig:
    dim: int = 32
    heads: int = 8
    levels: int = 4
    points: int = 4
    fusion_layers: int = 1

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.dim % 8:
            raise ValueError(f"dim {self.dim} must be divisible by 8 for positional embedding")
        if self.levels < 1 or self.points < 1 or self.fusion_layers < 1:
            raise ValueError("levels, points and fusion_layers must be positive")


# --------------------------------------------------------------------------
# constant encodings


def pos_embed(boxes, dim: int, temperature: float = 10000.0, dtype=None) -> np.ndarray:
    """Sinusoidal embedding of (cx, cy, w, h), ``dim // 4`` channels each.

    Within a coordinate block channel pairs (2i, 2i+1) hold sin/cos of
    ``2*pi*value / temperature**(2i / block)``.
    """
    if dim % 8:
        raise ValueError(f"dim {dim} must be divisible by 8")
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    block = dim // 4
    freq = temperature ** (2 * (np.arange(block) // 2) / block)
    angles = 2 * np.pi * boxes[:, :, None] / freq  # (N, 4, block)
    out = np.empty_like(angles)
    out[:, :, 0::2] = np.sin(angles[:, :, 0::2])
    out[:, :, 1::2] = np.cos(angles[:, :, 1::2])
    return out.reshape(len(boxes), dim).astype(dtype or T.default_dtype())


def _box_array(boxes) -> np.ndarray:
    if isinstance(boxes, Box):
        boxes = [boxes]
    rows = [b.as_list() if isinstance(b, Box) else list(b) for b in boxes]
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), 4)


# --------------------------------------------------------------------------
# inputs


@dataclass
class QueryInputs:
    """Padded word embeddings of a batch of referring texts."""

    words: np.ndarray  # (Q, L, d)
    mask: np.ndarray  # (Q, L) True = real token
    sentence: np.ndarray  # (Q, d)

    @classmethod
    def build(cls, texts: list[TextEmbedding], dim: int, dtype=None) -> "QueryInputs":
        dtype = dtype or T.default_dtype()
        length = max((len(t.tokens) for t in texts), default=1)
        words = np.zeros((len(texts), length, dim), dtype=dtype)
        mask = np.zeros((len(texts), length), dtype=bool)
        sentence = np.zeros((len(texts), dim), dtype=dtype)
        for i, t in enumerate(texts):
            n = len(t.tokens)
            words[i, :n] = t.words.data
            mask[i, :n] = True
            sentence[i] = t.sentence.data
        return cls(words, mask, sentence)

    def __len__(self) -> int:
        return len(self.words)


@dataclass
class ProposalInputs:
    """Boxes and padded caption embeddings for the proposals of one frame."""

    boxes: np.ndarray  # (N, 4) cx, cy, w, h
    caption_words: np.ndarray  # (N, Lc, d)
    caption_mask: np.ndarray  # (N, Lc)
    caption_sentence: np.ndarray  # (N, d)

    @classmethod
    def build(cls, boxes, captions: list[TextEmbedding], dim: int, dtype=None) -> "ProposalInputs":
        q = QueryInputs.build(captions, dim, dtype)
        arr = _box_array(boxes) if len(captions) else np.zeros((0, 4))
        if len(arr) != len(captions):
            raise ValueError("one caption per proposal box required")
        return cls(arr, q.words, q.mask, q.sentence)

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class QueryContext:
    levels: list[Tensor]  # (Q, H_l, W_l, d)
    words: np.ndarray  # (Q, L, d) original word embeddings
    word_mask: np.ndarray  # (Q, L)
    words_vl: Tensor  # (Q, L, d) visually grounded words
    referring: Tensor  # (Q, d)


@dataclass
class ObjectStreams:
    visual: Tensor
    caption: Tensor
    positional: Tensor
    fused_visual: Tensor
    fused_caption: Tensor
    holistic: Tensor


# --------------------------------------------------------------------------
# components


class BiFusionLayer(Module):
    """Symmetric pixel/word cross-attention; both directions read the layer inputs."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=None):
        self.visual_attn = MultiHeadCrossAttention(dim, heads, rng, dtype)
        self.word_attn = MultiHeadCrossAttention(dim, heads, rng, dtype)

    def __call__(self, visual: Tensor, words: Tensor, word_mask: np.ndarray | None = None):
        visual_vl = visual + self.visual_attn(visual, words, words, word_mask)
        words_vl = words + self.word_attn(words, visual, visual)
        return visual_vl, words_vl


class Pyramid(Module):
    def __init__(self, dim: int, levels: int, rng: np.random.Generator, dtype=None):
        self.levels = levels
        self.projections = [Linear(dim, dim, rng, dtype) for _ in range(levels)]

    def __call__(self, grid: Tensor) -> list[Tensor]:
        height, width = grid.shape[-3], grid.shape[-2]
        need = 2 ** (self.levels - 1)
        if height < need or width < need:
            raise ValueError(f"map {height}x{width} too small for {self.levels} levels (need >= {need})")
        raw = [grid]
        for _ in range(self.levels - 1):
            raw.append(T.avg_pool2x2(raw[-1]))
        return [proj(level) for proj, level in zip(self.projections, raw)]


class DeformSampler(Module):
    """Multi-scale deformable sampling around a box center.

    The query is the cross-level mean of center samples. Per head and level
    a linear head predicts ``points`` offsets (in units of half the box size
    divided by ``points``) and attention logits, normalized over all
    level/point slots of the head. Since the bilinear weights and the
    attention weights both sum to one, projecting the attention-weighted
    sample equals weighting the projected samples.
    """

    def __init__(self, dim: int, heads: int, levels: int, points: int, rng: np.random.Generator, dtype=None):
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.levels, self.points = dim, heads, levels, points
        slots = heads * levels * points
        self.offset_head = Linear(dim, slots * 2, rng, dtype, exact=True)
        self.attn_head = Linear(dim, slots, rng, dtype, exact=True)
        self.value_proj = Linear(dim, dim, rng, dtype, exact=True)
        self.out_proj = Linear(dim, dim, rng, dtype, exact=True)

    def __call__(self, levels: list[Tensor], boxes: np.ndarray, batch_index: np.ndarray) -> Tensor:
        if len(levels) != self.levels:
            raise ValueError(f"expected {self.levels} pyramid levels, got {len(levels)}")
        n = len(boxes)
        h, lv, k = self.heads, self.levels, self.points
        dtype = levels[0].dtype
        center = boxes[:, :2].astype(dtype)
        query = None
        for level in levels:
            s = T.bilinear_sample(level, Tensor(center), batch_index)
            query = s if query is None else query + s
        query = query * (1.0 / lv)

        offsets = self.offset_head(query).reshape((n, h, lv, k, 2))
        scale = (boxes[:, 2:4] * (0.5 / k)).astype(dtype).reshape(n, 1, 1, 1, 2)
        locations = offsets * scale + center.reshape(n, 1, 1, 1, 2)
        weights = T.softmax(self.attn_head(query).reshape((n, h, lv * k)), axis=-1).reshape((n, h, lv, k))

        index = batch_index.reshape(n, 1, 1)
        pooled = None
        for l, level in enumerate(levels):
            s = T.bilinear_sample(level, locations[:, :, l], index)  # (n, h, k, d)
            w = weights[:, :, l].reshape((n, h, k, 1))
            term = (s * w).sum(axis=2)
            pooled = term if pooled is None else pooled + term
        values = self.value_proj(pooled).reshape((n, h, h, self.dim // h))
        heads = np.arange(h)
        own = values[:, heads, heads]  # head i keeps its own channel block
        return self.out_proj(own.reshape((n, self.dim)))


class HMSI(Module):
    def __init__(self, config: HMSIConfig, rng: np.random.Generator, dtype=None):
        config.validate()
        self.config = config
        d, h = config.dim, config.heads
        self.bifusion = [BiFusionLayer(d, h, rng, dtype) for _ in range(config.fusion_layers)]
        self.pyramid = Pyramid(d, config.levels, rng, dtype)
        self.deform = DeformSampler(d, h, config.levels, config.points, rng, dtype)
        self.refer_attn = MultiHeadCrossAttention(d, h, rng, dtype)
        self.caption_filter_attn = MultiHeadCrossAttention(d, h, rng, dtype, exact=True)
        self.caption_aggregate_attn = MultiHeadCrossAttention(d, h, rng, dtype, exact=True)
        self.fuse = Linear(d, d, rng, dtype, exact=True)
        self.assign_names("hmsi")

    # ---- single-instance component views --------------------------------

    def bi_fusion(self, visual: Tensor, words: Tensor, word_mask=None) -> tuple[Tensor, Tensor]:
        """(HW, d) pixels and (L, d) words, or batched with leading axes."""
        squeeze = visual.ndim == 2 and words.ndim == 2
        if squeeze:
            visual = visual.reshape((1,) + visual.shape)
            words = words.reshape((1,) + words.shape)
            if word_mask is not None:
                word_mask = np.asarray(word_mask)[None]
        for layer in self.bifusion:
            visual, words = layer(visual, words, word_mask)
        if squeeze:
            visual = visual.reshape(visual.shape[1:])
            words = words.reshape(words.shape[1:])
        return visual, words

    def build_pyramid(self, grid: Tensor) -> list[Tensor]:
        return self.pyramid(grid)

    def deform_sample(self, levels: list[Tensor], box: Box) -> Tensor:
        batched = [lv.reshape((1,) + lv.shape) for lv in levels]
        out = self.deform(batched, _box_array(box), np.zeros(1, dtype=np.int64))
        return out.reshape((self.config.dim,))

    @staticmethod
    def _aggregate(attn, sentence: Tensor, keys: Tensor, values: Tensor, mask=None) -> Tensor:
        q = sentence.reshape(sentence.shape[:-1] + (1, sentence.shape[-1]))
        mixed = attn(q, keys, values, mask)
        return sentence + mixed.reshape(sentence.shape)

    def refer_aggregate(self, sentence: Tensor, words: Tensor, words_vl: Tensor, mask=None) -> Tensor:
        return self._aggregate(self.refer_attn, sentence, words, words_vl, mask)

    def caption_filter(self, caption_words: Tensor, words: Tensor, words_vl: Tensor, mask=None) -> Tensor:
        return caption_words + self.caption_filter_attn(caption_words, words, words_vl, mask)

    def caption_aggregate(self, caption_sentence: Tensor, caption_words: Tensor, caption_vl: Tensor, mask=None) -> Tensor:
        return self._aggregate(self.caption_aggregate_attn, caption_sentence, caption_words, caption_vl, mask)

    def holistic_project(self, visual: Tensor, caption: Tensor, positional: Tensor) -> Tensor:
        return self.fuse((visual + positional) + (caption + positional))

    # ---- batched pipeline ---------------------------------------------

    def encode_queries(self, visual: Tensor, queries: QueryInputs) -> QueryContext:
        """Per-query context for a frame's ``(H, W, d)`` visual map."""
        height, width, dim = visual.shape
        if dim != self.config.dim:
            raise ValueError(f"visual dimension {dim} does not match model dimension {self.config.dim}")
        if queries.words.shape[-1] != dim:
            raise ValueError("query dimension does not match model dimension")
        pixels = visual.reshape((1, height * width, dim))
        words = Tensor(queries.words)
        visual_vl, words_vl = pixels, words
        for layer in self.bifusion:
            visual_vl, words_vl = layer(visual_vl, words_vl, queries.mask)
        grid = visual_vl.reshape((len(queries), height, width, dim))
        levels = self.pyramid(grid)
        referring = self.refer_aggregate(Tensor(queries.sentence), words, words_vl, queries.mask)
        return QueryContext(levels, queries.words, queries.mask, words_vl, referring)

    def cell_streams(
        self,
        ctx: QueryContext,
        proposals: ProposalInputs,
        cell_query: np.ndarray,
        cell_proposal: np.ndarray,
        esi: bool = True,
    ) -> tuple[ObjectStreams, Tensor]:
        cell_query = np.asarray(cell_query, dtype=np.int64)
        cell_proposal = np.asarray(cell_proposal, dtype=np.int64)
        dtype = ctx.referring.dtype
        boxes = proposals.boxes[cell_proposal]
        visual = self.deform(ctx.levels, boxes, cell_query)
        positional = Tensor(pos_embed(boxes, self.config.dim, dtype=dtype))
        if esi:
            cap_words = Tensor(proposals.caption_words[cell_proposal])
            cap_mask = proposals.caption_mask[cell_proposal]
            ref_words = Tensor(ctx.words[cell_query])
            ref_vl = ctx.words_vl[cell_query]
            cap_vl = self.caption_filter(cap_words, ref_words, ref_vl, ctx.word_mask[cell_query])
            caption = self.caption_aggregate(
                Tensor(proposals.caption_sentence[cell_proposal]), cap_words, cap_vl, cap_mask
            )
        else:
            caption = T.zeros((len(cell_query), self.config.dim), dtype=dtype)
        fused_visual = visual + positional
        fused_caption = caption + positional
        holistic = self.fuse(fused_visual + fused_caption)
        streams = ObjectStreams(visual, caption, positional, fused_visual, fused_caption, holistic)
        return streams, ctx.referring[cell_query]

    def score_cells(self, ctx, proposals, cell_query, cell_proposal, esi: bool = True) -> Tensor:
        """Cosine score of every (query, proposal) cell, shape ``(C,)``."""
        if len(cell_query) == 0:
            return T.zeros((0,), dtype=ctx.referring.dtype)
        streams, referring = self.cell_streams(ctx, proposals, cell_query, cell_proposal, esi)
        return T.cosine_similarity(streams.holistic, referring)

    def forward_frame(
        self, visual: Tensor, proposals: ProposalInputs, query: TextEmbedding, esi: bool = True
    ) -> Tensor:
        """Scores of all proposals of one frame against one referring text."""
        n = len(proposals)
        if n == 0:
            return T.zeros((0,), dtype=visual.dtype)
        ctx = self.encode_queries(visual, QueryInputs.build([query], self.config.dim, visual.dtype))
        return self.score_cells(ctx, proposals, np.zeros(n, dtype=np.int64), np.arange(n), esi)
