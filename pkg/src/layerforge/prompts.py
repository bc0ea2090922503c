"""Toy text conditioning path.

A fixed ~64-word vocabulary covers the synthetic prompt grammar (colors,
shapes, background words). Each layer prompt becomes an S-token sequence
[SOS, content..., EOS, PAD...], embedded by a token table plus a learnable
per-layer "assign" row added to every position (zero at init so layer
identity starts inert). The global sequence splices the content rows of all
per-layer sequences between a fresh SOS/EOS pair and reports where each
layer's tokens landed, which is what the map aggregation needs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import load_ltens, rng, save_ltens


class TruncationError(ValueError):
    """Combined layer prompts do not fit the global sequence."""


PAD, SOS, EOS, UNK = 0, 1, 2, 3

_COLORS = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange",
           "purple", "pink", "brown", "white", "black", "gray", "olive",
           "teal", "navy", "maroon", "lime", "silver", "gold"]
_SHAPES = ["circle", "square", "triangle", "ring", "bar", "cross", "dot",
           "box", "disk", "stripe"]
_SCENE = ["a", "an", "the", "on", "over", "plain", "solid", "soft", "dark",
          "light", "bright", "pale", "deep", "background", "backdrop",
          "gradient", "noisy", "smooth", "textured", "field", "canvas",
          "wall", "sky", "floor", "small", "large", "big", "tiny", "thin",
          "wide"]


def default_words() -> list[str]:
    return ["[PAD]", "[SOS]", "[EOS]", "[UNK]"] + _COLORS + _SHAPES + _SCENE


@dataclass
class Vocab:
    words: list[str]
    ids: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.ids = {w: i for i, w in enumerate(self.words)}
        for tok, want in (("[PAD]", PAD), ("[SOS]", SOS), ("[EOS]", EOS),
                          ("[UNK]", UNK)):
            if self.ids.get(tok) != want:
                raise ValueError(f"vocab must place {tok} at id {want}")

    def __len__(self) -> int:
        return len(self.words)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.words) + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path) as fh:
            words = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(words)

    @classmethod
    def default(cls) -> "Vocab":
        return cls(default_words())


@dataclass
class TokenSeq:
    ids: np.ndarray  # length S, int64
    content_len: int
    truncated: bool = False

    @property
    def s(self) -> int:
        return len(self.ids)


@dataclass
class TextEmbedding:
    matrix: np.ndarray  # S x D float32
    layer_index: int


@dataclass
class PromptTables:
    token: np.ndarray  # V x D
    assign: np.ndarray  # (max_layers+1) x D, zero at init

    @property
    def d(self) -> int:
        return self.token.shape[1]


def make_tables(seed: int, vocab_size: int, d: int, max_layers: int) -> PromptTables:
    g = rng(seed, 7)
    token = (g.standard_normal((vocab_size, d)) * 0.2).astype(np.float32)
    assign = np.zeros((max_layers + 1, d), dtype=np.float32)
    return PromptTables(token, assign)


def save_tables(tables: PromptTables, out_dir: str) -> None:
    save_ltens(os.path.join(out_dir, "token_table.ltens"), tables.token)
    save_ltens(os.path.join(out_dir, "assign_table.ltens"), tables.assign)


def load_tables(out_dir: str) -> PromptTables:
    return PromptTables(
        load_ltens(os.path.join(out_dir, "token_table.ltens")),
        load_ltens(os.path.join(out_dir, "assign_table.ltens")))


def tokenize(text: str, vocab: Vocab, s: int) -> TokenSeq:
    """Lowercase whitespace tokenization into [SOS, content, EOS, PAD...].

    Content longer than s-2 is truncated and flagged rather than rejected;
    a single layer prompt is allowed to lose its tail, the global assembly
    is not (see assemble_global).
    """
    words = text.lower().split()
    content = [vocab.ids.get(w, UNK) for w in words]
    truncated = len(content) > s - 2
    content = content[: s - 2]
    ids = np.full(s, PAD, dtype=np.int64)
    ids[0] = SOS
    ids[1: 1 + len(content)] = content
    ids[1 + len(content)] = EOS
    return TokenSeq(ids, len(content), truncated)


def embed_layer(seq: TokenSeq, i: int, tables: PromptTables) -> TextEmbedding:
    """Token rows plus the layer-assignment row on content positions.

    Wrapper rows (SOS/EOS/PAD) stay bare: they belong to no layer, and
    tagging them too would add the same vector to every key row, which
    row-wise softmax cannot even see."""
    if not 0 <= i < tables.assign.shape[0]:
        raise IndexError(f"layer index {i} out of range for assign table")
    mat = tables.token[seq.ids].copy()
    mat[1: 1 + seq.content_len] += tables.assign[i][None, :]
    return TextEmbedding(mat.astype(np.float32), i)


def global_layout(seqs: list[TokenSeq], s: int) -> tuple[list[tuple[int, int]],
                                                         list[tuple[int, int]]]:
    """Index plan for the global sequence.

    Returns (rows, spans): rows lists (source layer, source position) for
    each interior global row; spans gives each layer's (start, length) in
    global coordinates, tiling positions 1..1+total without gaps. Raises
    TruncationError when the combined content cannot fit s-2 rows, because
    silently dropping rows would corrupt the span bookkeeping downstream.
    """
    rows: list[tuple[int, int]] = []
    spans: list[tuple[int, int]] = []
    for li, seq in enumerate(seqs):
        start = 1 + len(rows)
        for p in range(1, 1 + seq.content_len):
            rows.append((li, p))
        spans.append((start, seq.content_len))
    if len(rows) > s - 2:
        raise TruncationError(
            f"global content of {len(rows)} tokens exceeds capacity {s - 2}")
    return rows, spans


def assemble_global(embeddings: list[TextEmbedding], seqs: list[TokenSeq],
                    tables: PromptTables, s: int
                    ) -> tuple[TextEmbedding, list[tuple[int, int]]]:
    """Splice content rows of per-layer embeddings into one global S x D
    embedding. Interior rows are copied verbatim so whatever the assign
    table added per layer travels with them; the wrapper rows (fresh
    SOS/EOS/PAD from the plain token table) carry the global-assignment
    row, which is the last row of the assign table."""
    if len(embeddings) != len(seqs):
        raise ValueError("embeddings and seqs must align")
    rows, spans = global_layout(seqs, s)
    d = tables.d
    out = np.empty((s, d), dtype=np.float32)
    out[:] = tables.token[PAD][None, :] + tables.assign[-1][None, :]
    out[0] = tables.token[SOS] + tables.assign[-1]
    for gpos, (li, p) in enumerate(rows, start=1):
        out[gpos] = embeddings[li].matrix[p]
    out[1 + len(rows)] = tables.token[EOS] + tables.assign[-1]
    return TextEmbedding(out, len(embeddings)), spans
