"""Turning tagged documents into packed, loss-masked token sequences.

Each document is framed as ``[BOS] prefix_tokens body_tokens [EOS]`` where the
prefix tokens encode the rendered coordinate (or are absent in the
no-prefix arm). Framed documents are concatenated in input order and chunked
into fixed-length windows; the parallel loss mask is 1 exactly on body tokens
and EOS, 0 on BOS, prefix tokens, and padding. Prefix tokens stay attendable
context; only the loss ignores them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .tagging import TaggedDocument
from .taxonomy import ContentLabel, SourceLabel, StabilityLabel, render_prefix
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, ByteBPETokenizer

DocSpan = tuple[str, int, int]  # (doc_id, window start, window end-exclusive)


@dataclass
class EncodedDocument:
    """A tokenized document: coordinate prefix and body kept separate."""

    doc_id: str
    prefix_tokens: list[int]
    body_tokens: list[int]

    def __post_init__(self) -> None:
        if not self.body_tokens:
            raise ValueError(f"document {self.doc_id!r} encoded to an empty body")

    def framed_tokens(self) -> list[int]:
        return [BOS_ID, *self.prefix_tokens, *self.body_tokens, EOS_ID]

    def framed_mask(self) -> list[int]:
        """1 on body tokens and EOS; 0 on BOS and prefix tokens."""
        return [0] * (1 + len(self.prefix_tokens)) + [1] * len(self.body_tokens) + [1]

    @property
    def framed_length(self) -> int:
        return 2 + len(self.prefix_tokens) + len(self.body_tokens)


def encode(
    tokenizer: ByteBPETokenizer, tagged: TaggedDocument, with_prefix: bool
) -> EncodedDocument:
    """Tokenize one tagged document.

    With ``with_prefix`` the coordinate renders to its textual prefix and is
    tokenized separately from the body, so the prefix token ids decode back
    to the rendered prefix byte-for-byte. Without it the prefix token list is
    empty (the standard-paradigm arm). Framing tokens are added by
    :meth:`EncodedDocument.framed_tokens`, never here.
    """
    prefix_tokens: list[int] = []
    if with_prefix:
        prefix_tokens = tokenizer.encode(render_prefix(tagged.coord))
    body_tokens = tokenizer.encode(tagged.doc.text)
    return EncodedDocument(tagged.doc.id, prefix_tokens, body_tokens)


def encode_corpus(
    tokenizer: ByteBPETokenizer, tags: Iterable[TaggedDocument], with_prefix: bool
) -> Iterator[EncodedDocument]:
    for tagged in tags:
        yield encode(tokenizer, tagged, with_prefix)


@dataclass(eq=False)
class PackedBatch:
    """Fixed-shape token and mask matrices plus per-sequence provenance."""

    seq_len: int
    tokens: np.ndarray  # [num_seqs, seq_len] uint32
    loss_mask: np.ndarray  # [num_seqs, seq_len] uint8
    doc_spans: list[list[DocSpan]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.tokens.shape != self.loss_mask.shape:
            raise ValueError("tokens and loss_mask shapes differ")
        if self.tokens.ndim != 2 or self.tokens.shape[1] != self.seq_len:
            raise ValueError("token matrix must be [num_seqs, seq_len]")

    @property
    def num_seqs(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def mask_sum(self) -> int:
        return int(self.loss_mask.sum())

    @property
    def nonpad_count(self) -> int:
        return int((self.tokens != PAD_ID).sum())


class _WindowAccumulator:
    def __init__(self, seq_len: int):
        self.seq_len = seq_len
        self.tokens: list[int] = []
        self.mask: list[int] = []
        self.spans: list[DocSpan] = []

    def room(self) -> int:
        return self.seq_len - len(self.tokens)

    def add(self, doc_id: str, tokens: Sequence[int], mask: Sequence[int]) -> None:
        start = len(self.tokens)
        self.tokens.extend(tokens)
        self.mask.extend(mask)
        self.spans.append((doc_id, start, start + len(tokens)))

    def close(self) -> tuple[list[int], list[int], list[DocSpan]]:
        pad = self.seq_len - len(self.tokens)
        tokens = self.tokens + [PAD_ID] * pad
        mask = self.mask + [0] * pad
        out = (tokens, mask, self.spans)
        self.tokens, self.mask, self.spans = [], [], []
        return out


def pack(
    docs: Iterable[EncodedDocument],
    seq_len: int,
    seqs_per_batch: int = 512,
    doc_aligned: bool = False,
) -> Iterator[PackedBatch]:
    """Concatenate framed documents and chunk into seq_len windows.

    Dense mode concatenates everything into one virtual stream, so documents
    may straddle window boundaries (the later chunk then has no prefix).
    Doc-aligned mode pads the current window out instead of splitting a
    document that would not fit whole; documents longer than one window still
    split (they cannot fit anywhere), keeping token conservation exact in
    both modes. Only the final window of dense mode carries padding.
    """
    if seq_len < 8:
        raise ValueError("seq_len must be at least 8")
    window = _WindowAccumulator(seq_len)
    done: list[tuple[list[int], list[int], list[DocSpan]]] = []

    def drain() -> Iterator[PackedBatch]:
        while len(done) >= seqs_per_batch:
            chunk, del_ = done[:seqs_per_batch], done[seqs_per_batch:]
            done[:] = del_
            yield _batch_from(chunk, seq_len)

    for doc in docs:
        framed = doc.framed_tokens()
        fmask = doc.framed_mask()
        if doc_aligned and window.tokens and len(framed) > window.room():
            done.append(window.close())
        offset = 0
        while offset < len(framed):
            take = min(window.room(), len(framed) - offset)
            window.add(doc.doc_id, framed[offset : offset + take], fmask[offset : offset + take])
            offset += take
            if window.room() == 0:
                done.append(window.close())
        yield from drain()
    if window.tokens:
        done.append(window.close())
    while done:
        chunk, done = done[:seqs_per_batch], done[seqs_per_batch:]
        yield _batch_from(chunk, seq_len)


def _batch_from(rows: list[tuple[list[int], list[int], list[DocSpan]]], seq_len: int) -> PackedBatch:
    tokens = np.array([r[0] for r in rows], dtype=np.uint32)
    mask = np.array([r[1] for r in rows], dtype=np.uint8)
    spans = [r[2] for r in rows]
    return PackedBatch(seq_len=seq_len, tokens=tokens, loss_mask=mask, doc_spans=spans)


def pack_corpus(
    tokenizer: ByteBPETokenizer,
    tags: Sequence[TaggedDocument],
    seq_len: int,
    with_prefix: bool,
    seqs_per_batch: int = 512,
    doc_aligned: bool = False,
) -> Iterator[PackedBatch]:
    """encode + pack in one call (the common pipeline path)."""
    docs = encode_corpus(tokenizer, tags, with_prefix)
    return pack(docs, seq_len, seqs_per_batch=seqs_per_batch, doc_aligned=doc_aligned)


# ---------------------------------------------------------------------------
# Coordinate histograms
# ---------------------------------------------------------------------------


@dataclass
class CoordinateHistogram:
    """Counts per (source, content) cell and per stability label."""

    source_content: dict[tuple[str, str], int]
    stability: dict[str, int]
    total: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["kind", "source", "content", "stability", "count"])
        for src in SourceLabel:
            for con in ContentLabel:
                count = self.source_content.get((src.value, con.value), 0)
                writer.writerow(["source_content", src.value, con.value, "", count])
        for stab in StabilityLabel:
            writer.writerow(["stability", "", "", stab.value, self.stability.get(stab.value, 0)])
        return buf.getvalue()


def coordinate_histogram(tags: Iterable[TaggedDocument]) -> CoordinateHistogram:
    source_content: dict[tuple[str, str], int] = {}
    stability: dict[str, int] = {}
    total = 0
    for tag in tags:
        total += 1
        sc = (tag.coord.source.value, tag.coord.content.value)
        source_content[sc] = source_content.get(sc, 0) + 1
        st = tag.coord.stability.value
        stability[st] = stability.get(st, 0) + 1
    return CoordinateHistogram(source_content, stability, total)
