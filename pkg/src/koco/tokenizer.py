"""Byte-level BPE tokenizer with reserved control tokens.

Ids 0..255 are raw bytes, 256/257/258 are BOS/EOS/PAD, and learned merges
start at 259. Because every byte has an id, ``decode(encode(s)) == s`` for
any unicode string and training can never fail on unseen characters.
Training and encoding are fully deterministic: merge ties break on the
lexicographically smallest pair, so equal corpora yield byte-identical
tokenizers (checked via the content hash embedded in shard manifests).
"""

from __future__ import annotations

import functools
import hashlib
import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .errors import VersionMismatch

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
FIRST_MERGE_ID = 259

_FORMAT = "koco-bpe"
_VERSION = 1

# Segments are words with at most one leading space, or whitespace runs not
# followed by a word; together they tile the input exactly.
_SPLIT_RE = re.compile(r"\s+(?!\S)| ?\S+|\s+")


def _merge_ids(ids: list[int], pair: tuple[int, int], new_id: int) -> list[int]:
    a, b = pair
    out: list[int] = []
    i = 0
    n = len(ids)
    while i < n:
        if i + 1 < n and ids[i] == a and ids[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


class ByteBPETokenizer:
    """Encoder/decoder over a frozen merge list."""

    def __init__(self, merges: Sequence[tuple[int, int]]):
        self.merges: list[tuple[int, int]] = [tuple(m) for m in merges]
        self._ranks = {pair: rank for rank, pair in enumerate(self.merges)}
        if len(self._ranks) != len(self.merges):
            raise ValueError("duplicate merge pair in merge list")
        self._id_to_bytes: list[bytes] = [bytes([i]) for i in range(256)]
        self._id_to_bytes += [b"", b"", b""]  # BOS/EOS/PAD render to nothing
        for a, b in self.merges:
            if not (0 <= a < len(self._id_to_bytes)) or not (0 <= b < len(self._id_to_bytes)):
                raise ValueError(f"merge ({a}, {b}) references an id that does not exist yet")
            self._id_to_bytes.append(self._id_to_bytes[a] + self._id_to_bytes[b])
        # Per-segment memoization; corpora repeat few distinct segments.
        self._encode_segment = functools.lru_cache(maxsize=65536)(self._encode_segment_uncached)

    @property
    def vocab_size(self) -> int:
        """Number of assigned ids (also the smallest unassigned id)."""
        return FIRST_MERGE_ID + len(self.merges)

    @property
    def bos_id(self) -> int:
        return BOS_ID

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def pad_id(self) -> int:
        return PAD_ID

    def _encode_segment_uncached(self, segment: str) -> tuple[int, ...]:
        ids = list(segment.encode("utf-8"))
        while len(ids) >= 2:
            best_rank: Optional[int] = None
            best_pair: Optional[tuple[int, int]] = None
            for pair in zip(ids, ids[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank, best_pair = rank, pair
            if best_pair is None:
                break
            ids = _merge_ids(ids, best_pair, FIRST_MERGE_ID + best_rank)
        return tuple(ids)

    def encode(self, text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
        ids: list[int] = [BOS_ID] if add_bos else []
        for segment in _SPLIT_RE.findall(text):
            ids.extend(self._encode_segment(segment))
        if add_eos:
            ids.append(EOS_ID)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        buf = bytearray()
        for i in ids:
            buf += self._id_to_bytes[i]
        # Ids produced by encode() always reassemble valid UTF-8; arbitrary id
        # sequences (e.g. sampled) may not, so invalid bytes are replaced.
        return buf.decode("utf-8", errors="replace")

    def token_bytes(self, token_id: int) -> bytes:
        """Raw byte expansion of one id (empty for control tokens)."""
        return self._id_to_bytes[token_id]

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "format": _FORMAT,
            "version": _VERSION,
            "merges": [list(m) for m in self.merges],
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        """sha256 over the canonical serialization; stable across save/load."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ByteBPETokenizer":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != _FORMAT:
            raise VersionMismatch(f"not a {_FORMAT} file: {path}")
        if payload.get("version") != _VERSION:
            raise VersionMismatch(
                f"tokenizer version {payload.get('version')} unsupported (want {_VERSION})"
            )
        return cls([tuple(m) for m in payload["merges"]])


def train_tokenizer(texts: Iterable[str], vocab_size: int = 1024) -> ByteBPETokenizer:
    """Learn BPE merges from a text corpus.

    Grows the vocabulary to ``vocab_size`` ids unless no adjacent pair occurs
    at least twice first. Deterministic: the most frequent pair wins each
    round and ties go to the lexicographically smallest pair.
    """
    if vocab_size < FIRST_MERGE_ID:
        raise ValueError(f"vocab_size must be at least {FIRST_MERGE_ID}")
    seg_freq: Counter = Counter()
    for text in texts:
        seg_freq.update(_SPLIT_RE.findall(text))

    words: dict[int, list] = {}  # wid -> [ids, freq]
    pair_counts: Counter = Counter()
    pair_words: dict[tuple[int, int], set[int]] = {}
    for wid, (segment, freq) in enumerate(seg_freq.items()):
        ids = list(segment.encode("utf-8"))
        words[wid] = [ids, freq]
        for pair in zip(ids, ids[1:]):
            pair_counts[pair] += freq
            pair_words.setdefault(pair, set()).add(wid)

    merges: list[tuple[int, int]] = []
    while FIRST_MERGE_ID + len(merges) < vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(pair for pair, count in pair_counts.items() if count == best_count)
        new_id = FIRST_MERGE_ID + len(merges)
        merges.append(best)
        for wid in sorted(pair_words.get(best, ())):
            ids, freq = words[wid]
            for pair in zip(ids, ids[1:]):
                pair_counts[pair] -= freq
                if pair_counts[pair] <= 0:
                    del pair_counts[pair]
                group = pair_words.get(pair)
                if group is not None:
                    group.discard(wid)
                    if not group:
                        del pair_words[pair]
            ids = _merge_ids(ids, best, new_id)
            words[wid][0] = ids
            for pair in zip(ids, ids[1:]):
                pair_counts[pair] += freq
                pair_words.setdefault(pair, set()).add(wid)
    return ByteBPETokenizer(merges)
