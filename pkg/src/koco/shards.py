"""Binary shard files for packed batches, with integrity manifests.

Shard layout (little-endian): magic ``KOCO``, format version u32, tokenizer
hash (32 raw bytes), seq_len u32, num_seqs u32, then num_seqs x seq_len token
ids as u32 and num_seqs x seq_len mask bytes. A JSON manifest lists every
shard with its sha256, so corruption and cross-tokenizer mixups surface as
errors instead of silently training on garbage.

Document spans are provenance metadata, not part of the fixed binary layout;
they ride in a JSON sidecar next to each shard.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

from .corpus import PackedBatch
from .errors import ChecksumMismatch, ShardMismatch, VersionMismatch

MAGIC = b"KOCO"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
_HEADER = struct.Struct("<4sI32sII")  # magic, version, tokenizer hash, seq_len, num_seqs


def _shard_bytes(batch: PackedBatch, tokenizer_hash: str) -> bytes:
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, bytes.fromhex(tokenizer_hash), batch.seq_len, batch.num_seqs
    )
    tokens = np.ascontiguousarray(batch.tokens, dtype="<u4").tobytes()
    mask = np.ascontiguousarray(batch.loss_mask, dtype=np.uint8).tobytes()
    return header + tokens + mask


def write_shards(
    batches: Iterable[PackedBatch], out_dir: Union[str, Path], tokenizer_hash: str
) -> dict:
    """Write one shard per batch plus a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shards = []
    seq_len = None
    total_seqs = 0
    total_mask = 0
    for index, batch in enumerate(batches):
        if seq_len is None:
            seq_len = batch.seq_len
        elif batch.seq_len != seq_len:
            raise ShardMismatch("batches disagree on seq_len within one shard set")
        name = f"shard-{index:05d}.koco"
        data = _shard_bytes(batch, tokenizer_hash)
        (out_dir / name).write_bytes(data)
        spans_name = f"shard-{index:05d}.spans.json"
        (out_dir / spans_name).write_text(
            json.dumps(batch.doc_spans, separators=(",", ":")), encoding="utf-8"
        )
        total_seqs += batch.num_seqs
        total_mask += batch.mask_sum
        shards.append(
            {
                "file": name,
                "spans_file": spans_name,
                "num_seqs": batch.num_seqs,
                "mask_sum": batch.mask_sum,
                "sha256": hashlib.sha256(data).hexdigest(),
            }
        )
    manifest = {
        "format": "koco-shards",
        "version": FORMAT_VERSION,
        "tokenizer_hash": tokenizer_hash,
        "seq_len": seq_len,
        "num_seqs": total_seqs,
        "mask_sum": total_mask,
        "shards": shards,
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest


def read_manifest(shard_dir: Union[str, Path]) -> dict:
    path = Path(shard_dir) / MANIFEST_NAME
    if not path.is_file():
        raise ShardMismatch(f"no {MANIFEST_NAME} in {shard_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != "koco-shards":
        raise VersionMismatch(f"{path} is not a shard manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"unsupported shard format version {manifest.get('version')}")
    return manifest


def read_shards(shard_dir: Union[str, Path], verify: bool = True) -> Iterator[PackedBatch]:
    """Yield batches back from a shard directory.

    Verifies per-shard checksums and header consistency against the manifest;
    ``verify=False`` skips the checksum pass for speed on trusted data.
    """
    shard_dir = Path(shard_dir)
    manifest = read_manifest(shard_dir)
    for entry in manifest["shards"]:
        data = (shard_dir / entry["file"]).read_bytes()
        if verify:
            digest = hashlib.sha256(data).hexdigest()
            if digest != entry["sha256"]:
                raise ChecksumMismatch(f"{entry['file']}: sha256 {digest} != {entry['sha256']}")
        magic, version, tok_hash, seq_len, num_seqs = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise VersionMismatch(f"{entry['file']}: bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"{entry['file']}: unsupported version {version}")
        if tok_hash.hex() != manifest["tokenizer_hash"]:
            raise ShardMismatch(f"{entry['file']}: tokenizer hash differs from manifest")
        if seq_len != manifest["seq_len"]:
            raise ShardMismatch(f"{entry['file']}: seq_len differs from manifest")
        body = data[_HEADER.size :]
        token_bytes = num_seqs * seq_len * 4
        if len(body) != token_bytes + num_seqs * seq_len:
            raise ShardMismatch(f"{entry['file']}: body size does not match header counts")
        tokens = np.frombuffer(body[:token_bytes], dtype="<u4").reshape(num_seqs, seq_len)
        mask = np.frombuffer(body[token_bytes:], dtype=np.uint8).reshape(num_seqs, seq_len)
        spans: list = []
        spans_path = shard_dir / entry.get("spans_file", "")
        if entry.get("spans_file") and spans_path.is_file():
            raw = json.loads(spans_path.read_text(encoding="utf-8"))
            spans = [[(d, int(s), int(e)) for d, s, e in row] for row in raw]
        yield PackedBatch(
            seq_len=seq_len,
            tokens=tokens.copy(),
            loss_mask=mask.copy(),
            doc_spans=spans,
        )
