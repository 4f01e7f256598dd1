"""Document tagging: pluggable backends, caching, and agreement metrics.

Every document receives a coordinate by construction: backends that cannot
decide fall back to (Others, Others, Long-term) with confidence 0, so corpus
alignment is never lost. Three backend kinds exist:

* ``rule`` maps URL host suffixes through a plain-text table (deterministic,
  confidence 1.0 on hit);
* ``endpoint`` asks a chat-completion HTTP service to emit a meta-tag
  sentence which is parsed back into labels (confidence 0.5);
* ``passthrough`` trusts a pre-tag field already present on the document.

An on-disk cache keyed by a content hash of (url, text) makes re-tagging a
corpus free and keeps results identical across parallelism settings.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union
from urllib.parse import urlparse

from .errors import EndpointUnavailable, IdMismatch, RuleTableMissing, UnparseableTag
from .taxonomy import (
    AliasTable,
    ContentLabel,
    KnowledgeCoordinate,
    SourceLabel,
    StabilityLabel,
    coordinate_from_dict,
    coordinate_to_dict,
    load_alias_table,
    parse_prefix,
)

FALLBACK_COORDINATE = KnowledgeCoordinate(
    SourceLabel.OTHERS, ContentLabel.OTHERS, StabilityLabel.LONG_TERM
)

PROMPT_TEXT_BUDGET = 4000
TRUNCATION_MARKER = "\n...[truncated]"


@dataclass(frozen=True)
class RawDocument:
    """An untagged input document."""

    id: str
    text: str
    url: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("document id must be nonempty")
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")


@dataclass(frozen=True)
class TaggedDocument:
    """A document plus its assigned coordinate and tagging provenance."""

    doc: RawDocument
    coord: KnowledgeCoordinate
    tagger_id: str
    confidence: float
    failed: bool = False

    def __post_init__(self) -> None:
        if not self.tagger_id:
            raise ValueError("tagger_id must be nonempty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Prompt construction and response parsing
# ---------------------------------------------------------------------------


def _load_prompt_template() -> str:
    return resources.files("koco.data").joinpath("tag_prompt.txt").read_text("utf-8")


def build_tag_prompt(doc: RawDocument, text_budget: int = PROMPT_TEXT_BUDGET) -> str:
    """Fill the tagging prompt with the document's URL and (truncated) text."""
    text = doc.text
    if len(text) > text_budget:
        text = text[:text_budget] + TRUNCATION_MARKER
    template = _load_prompt_template()
    # URL first, then text: a document body containing the literal "{url}"
    # marker must not be substituted into the URL slot.
    return template.replace("{url}", doc.url).replace("{text}", text)


_FIELD_RES = {
    "source": re.compile(r"Source\s*:\s*(?P<v>.+?)(?=\s*(?:Content|Stability)\s*:|$)", re.S),
    "content": re.compile(r"Content\s*:\s*(?P<v>.+?)(?=\s*(?:Source|Stability)\s*:|$)", re.S),
    "stability": re.compile(r"Stability\s*:\s*(?P<v>.+?)(?=\s*(?:Source|Content)\s*:|$)", re.S),
}
_PAREN_RE = re.compile(r"^(?P<label>[^(]*?)\s*\((?P<ann>.*)\)\s*$", re.S)


def _clean_phrase(raw: str) -> str:
    return raw.strip().strip(".").strip()


def _scan_for_phrase(text: str, phrases: Iterable[str]) -> Optional[str]:
    """Longest alias phrase contained in the text, matched on word bounds."""
    best: Optional[str] = None
    lowered = text.lower()
    for phrase in phrases:
        if best is not None and len(phrase) <= len(best):
            continue
        if re.search(rf"(?<!\w){re.escape(phrase)}(?!\w)", lowered):
            best = phrase
    return best


def parse_tag_response(
    completion: str, alias_table: Optional[AliasTable] = None
) -> KnowledgeCoordinate:
    """Extract a coordinate from a tagger completion.

    Looks for ``Source:`` / ``Content:`` / ``Stability:`` fields, resolves the
    source and content phrases through the alias table (whole phrase first,
    then the longest known phrase contained in the field), and requires the
    stability field to name one of the four canonical labels (aliases and any
    letter case allowed). Raises :class:`UnparseableTag` otherwise.
    """
    table = alias_table if alias_table is not None else _default_alias_table()
    fields = {}
    for name, pattern in _FIELD_RES.items():
        m = pattern.search(completion)
        if not m:
            raise UnparseableTag(f"completion has no {name.capitalize()}: field")
        fields[name] = m.group("v").strip()

    source_text = _clean_phrase(fields["source"])
    annotation = None
    paren = _PAREN_RE.match(source_text)
    if paren:
        source_text = _clean_phrase(paren.group("label"))
        annotation = paren.group("ann").strip() or None

    source = table.resolve_source(source_text)
    if source is None:
        hit = _scan_for_phrase(source_text, table.source_phrases())
        source = table.resolve_source(hit) if hit else None
    if source is None:
        raise UnparseableTag(f"unrecognized source phrase {source_text!r}")

    content_text = _clean_phrase(fields["content"])
    content = table.resolve_content(content_text)
    if content is None:
        hit = _scan_for_phrase(content_text, table.content_phrases())
        content = table.resolve_content(hit) if hit else None
    if content is None:
        raise UnparseableTag(f"unrecognized content phrase {content_text!r}")

    stability_text = _clean_phrase(fields["stability"])
    stability = table.resolve_stability(stability_text)
    if stability is None:
        canonical = [m.value.lower() for m in StabilityLabel]
        hit = _scan_for_phrase(stability_text, canonical)
        stability = table.resolve_stability(hit) if hit else None
    if stability is None:
        raise UnparseableTag(f"unrecognized stability phrase {stability_text!r}")

    return KnowledgeCoordinate(source, content, stability, source_annotation=annotation)


_ALIAS_TABLE_CACHE: Optional[AliasTable] = None


def _default_alias_table() -> AliasTable:
    global _ALIAS_TABLE_CACHE
    if _ALIAS_TABLE_CACHE is None:
        _ALIAS_TABLE_CACHE = load_alias_table()
    return _ALIAS_TABLE_CACHE


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


def _host_of(url: str) -> str:
    """Lowercased host part of a URL, tolerating scheme-less inputs."""
    if not url:
        return ""
    parsed = urlparse(url if "://" in url else "//" + url)
    host = parsed.netloc.rsplit("@", 1)[-1]
    host = host.rsplit(":", 1)[0] if ":" in host else host
    return host.lower()


class RuleBackend:
    """Longest-suffix URL host matching against a plain-text rule table.

    Table rows are ``domain_suffix<TAB>source[<TAB>content[<TAB>stability]]``;
    labels may be alias phrases. Unspecified dimensions run the per-dimension
    heuristics (when configured), then fall back to Others / Long-term.
    A hit annotates the source with the full document host.
    """

    kind = "rule"

    def __init__(
        self,
        rules: dict[str, tuple],
        name: str = "table",
        content_heuristic: Optional[Callable[[RawDocument], Optional[ContentLabel]]] = None,
        stability_heuristic: Optional[Callable[[RawDocument], Optional[StabilityLabel]]] = None,
    ):
        self.rules = dict(rules)
        self.tagger_id = f"rule:{name}"
        self.content_heuristic = content_heuristic
        self.stability_heuristic = stability_heuristic

    @classmethod
    def from_tsv(cls, path: Union[str, Path], alias_table: Optional[AliasTable] = None, **kw):
        path = Path(path)
        if not path.is_file():
            raise RuleTableMissing(f"rule table not found: {path}")
        table = alias_table if alias_table is not None else _default_alias_table()
        rules: dict[str, tuple] = {}
        for lineno, raw in enumerate(path.read_text("utf-8").splitlines(), start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if not 2 <= len(cols) <= 4:
                raise ValueError(f"{path}:{lineno}: expected 2-4 tab-separated columns")
            suffix = cols[0].strip().lower()
            source = table.resolve_source(cols[1])
            if source is None:
                raise ValueError(f"{path}:{lineno}: unknown source label {cols[1]!r}")
            content = stability = None
            if len(cols) >= 3 and cols[2].strip():
                content = table.resolve_content(cols[2])
                if content is None:
                    raise ValueError(f"{path}:{lineno}: unknown content label {cols[2]!r}")
            if len(cols) == 4 and cols[3].strip():
                stability = table.resolve_stability(cols[3])
                if stability is None:
                    raise ValueError(f"{path}:{lineno}: unknown stability label {cols[3]!r}")
            rules[suffix] = (source, content, stability)
        return cls(rules, name=path.stem, **kw)

    def _match(self, host: str) -> Optional[str]:
        best = None
        for suffix in self.rules:
            if host == suffix or host.endswith("." + suffix):
                if best is None or len(suffix) > len(best):
                    best = suffix
        return best

    def tag_once(self, doc: RawDocument) -> Optional[tuple[KnowledgeCoordinate, float]]:
        host = _host_of(doc.url)
        if not host:
            return None
        suffix = self._match(host)
        if suffix is None:
            return None
        source, content, stability = self.rules[suffix]
        if content is None and self.content_heuristic is not None:
            content = self.content_heuristic(doc)
        if stability is None and self.stability_heuristic is not None:
            stability = self.stability_heuristic(doc)
        coord = KnowledgeCoordinate(
            source=source,
            content=content if content is not None else FALLBACK_COORDINATE.content,
            stability=stability if stability is not None else FALLBACK_COORDINATE.stability,
            source_annotation=host,
        )
        return coord, 1.0


class EndpointBackend:
    """Chat-completion HTTP tagger with bounded retries.

    Sends a system + user message pair and expects a single text completion
    at ``choices[0].message.content``. Transport failures are retried with
    the configured backoff; exhausted retries raise
    :class:`EndpointUnavailable`. The transport is injectable so tests run
    without a network.
    """

    kind = "endpoint"

    def __init__(
        self,
        url: str,
        model: str = "tagger",
        timeout: float = 30.0,
        max_attempts: int = 3,
        backoff: Sequence[float] = (1.0, 4.0, 16.0),
        transport: Optional[Callable[[dict], dict]] = None,
        sleep: Callable[[float], None] = time.sleep,
        alias_table: Optional[AliasTable] = None,
        text_budget: int = PROMPT_TEXT_BUDGET,
    ):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = tuple(backoff)
        self.transport = transport if transport is not None else self._http_transport
        self.sleep = sleep
        self.alias_table = alias_table
        self.text_budget = text_budget
        self.tagger_id = f"endpoint:{model}"

    def _http_transport(self, payload: dict) -> dict:
        import requests

        resp = requests.post(self.url, json=payload, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def _complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {
                    "role": "system",
                    "content": "Follow the classification instructions exactly and reply "
                    "with a single line in the requested format.",
                },
                {"role": "user", "content": prompt},
            ],
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.max_attempts):
            try:
                data = self.transport(payload)
                return data["choices"][0]["message"]["content"]
            except Exception as exc:  # transport or response-shape failure
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    delay = self.backoff[min(attempt, len(self.backoff) - 1)]
                    self.sleep(delay)
        raise EndpointUnavailable(
            f"endpoint {self.url} failed after {self.max_attempts} attempts: {last_error}"
        )

    def tag_once(self, doc: RawDocument) -> Optional[tuple[KnowledgeCoordinate, float]]:
        completion = self._complete(build_tag_prompt(doc, self.text_budget))
        coord = parse_tag_response(completion, self.alias_table)  # may raise UnparseableTag
        return coord, 0.5


class PassthroughBackend:
    """Reads an already-assigned coordinate from a document field.

    The field value may be a rendered prefix string or a label dict; a
    missing or unreadable value falls back like any other backend miss.
    """

    kind = "passthrough"

    def __init__(self, field_name: str = "coord"):
        self.field_name = field_name
        self.tagger_id = f"passthrough:{field_name}"

    def tag_once(self, doc: RawDocument) -> Optional[tuple[KnowledgeCoordinate, float]]:
        value = doc.extra.get(self.field_name)
        if value is None:
            return None
        if isinstance(value, KnowledgeCoordinate):
            return value, 1.0
        try:
            if isinstance(value, str):
                return parse_prefix(value), 1.0
            if isinstance(value, dict):
                return coordinate_from_dict(value), 1.0
        except Exception:
            return None
        return None


Backend = Union[RuleBackend, EndpointBackend, PassthroughBackend]


def make_backend(kind: str, **settings) -> Backend:
    """Construct a backend by kind name (CLI entry point)."""
    if kind == "rule":
        return RuleBackend.from_tsv(settings.pop("table_path"), **settings)
    if kind == "endpoint":
        return EndpointBackend(**settings)
    if kind == "passthrough":
        return PassthroughBackend(**settings)
    raise ValueError(f"unknown backend kind {kind!r}")


# ---------------------------------------------------------------------------
# Tagging drivers and cache
# ---------------------------------------------------------------------------


def tag_document(backend: Backend, doc: RawDocument) -> TaggedDocument:
    """Tag one document, falling back to (Others, Others, Long-term).

    The fallback (confidence 0) covers rule-table misses, missing passthrough
    fields, and unparseable endpoint completions. Endpoint transport failure
    after retries raises :class:`EndpointUnavailable` instead.
    """
    try:
        result = backend.tag_once(doc)
    except UnparseableTag:
        result = None
    if result is None:
        return TaggedDocument(doc, FALLBACK_COORDINATE, backend.tagger_id, 0.0)
    coord, confidence = result
    return TaggedDocument(doc, coord, backend.tagger_id, confidence)


class TagCache:
    """Directory-backed coordinate cache keyed by sha256(url, text).

    Entries live under two-hex-character subdirectories to keep directory
    fan-out small; writes go through a unique temp file and an atomic rename
    so concurrent readers never observe partial JSON.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @staticmethod
    def key_for(url: str, text: str) -> str:
        payload = (url or "").encode("utf-8") + b"\0" + text.encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[dict]:
        try:
            return json.loads(self._path(key).read_text("utf-8"))
        except (FileNotFoundError, json.JSONDecodeError):
            return None

    def put(self, key: str, entry: dict) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".{key}.{uuid.uuid4().hex}.tmp"
        tmp.write_text(json.dumps(entry, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)


def _entry_from_tag(tag: TaggedDocument) -> dict:
    return {
        "coord": coordinate_to_dict(tag.coord),
        "tagger_id": tag.tagger_id,
        "confidence": tag.confidence,
    }


def tag_corpus(
    backend: Backend,
    docs: Iterable[RawDocument],
    cache: Optional[TagCache] = None,
    max_parallel: int = 1,
) -> list[TaggedDocument]:
    """Tag a document stream, preserving input order.

    Consults the cache first, issues at most ``max_parallel`` concurrent
    backend calls for the misses, and re-sequences results to input order.
    :class:`EndpointUnavailable` on an item marks that item failed (fallback
    coordinate, confidence 0) without aborting the stream. Successful tags
    are written back to the cache; failures are not, so a later run retries.
    """
    docs = list(docs)
    results: list[Optional[TaggedDocument]] = [None] * len(docs)
    misses: list[int] = []
    keys: list[Optional[str]] = [None] * len(docs)
    for i, doc in enumerate(docs):
        if cache is not None:
            key = TagCache.key_for(doc.url, doc.text)
            keys[i] = key
            entry = cache.get(key)
            if entry is not None:
                results[i] = TaggedDocument(
                    doc,
                    coordinate_from_dict(entry["coord"]),
                    entry["tagger_id"],
                    entry["confidence"],
                )
                continue
        misses.append(i)

    def compute(i: int) -> TaggedDocument:
        doc = docs[i]
        try:
            tag = tag_document(backend, doc)
        except EndpointUnavailable:
            return TaggedDocument(doc, FALLBACK_COORDINATE, backend.tagger_id, 0.0, failed=True)
        if cache is not None:
            cache.put(keys[i], _entry_from_tag(tag))
        return tag

    if max_parallel <= 1 or len(misses) <= 1:
        for i in misses:
            results[i] = compute(i)
    else:
        with ThreadPoolExecutor(max_workers=max_parallel) as pool:
            for i, tag in zip(misses, pool.map(compute, misses)):
                results[i] = tag
    return [r for r in results if r is not None]


def coverage(tags: Sequence[TaggedDocument]) -> float:
    """Fraction of documents tagged without an infrastructure failure."""
    if not tags:
        return 1.0
    return 1.0 - sum(1 for t in tags if t.failed) / len(tags)


def agreement(
    tags_a: Sequence[TaggedDocument], tags_b: Sequence[TaggedDocument]
) -> tuple[float, float, float]:
    """Per-dimension exact-match fractions between two tag sets.

    Joins on document id (annotations ignored); both sets must cover the
    same ids or :class:`IdMismatch` is raised. Symmetric in its arguments.
    """
    by_id_a = {t.doc.id: t for t in tags_a}
    by_id_b = {t.doc.id: t for t in tags_b}
    if len(by_id_a) != len(tags_a) or len(by_id_b) != len(tags_b):
        raise IdMismatch("duplicate document ids within a tag list")
    if by_id_a.keys() != by_id_b.keys():
        raise IdMismatch("tag lists cover different document id sets")
    if not by_id_a:
        raise IdMismatch("cannot compute agreement over zero documents")
    n = len(by_id_a)
    match = [0, 0, 0]
    for doc_id, a in by_id_a.items():
        b = by_id_b[doc_id]
        match[0] += a.coord.source is b.coord.source
        match[1] += a.coord.content is b.coord.content
        match[2] += a.coord.stability is b.coord.stability
    return (match[0] / n, match[1] / n, match[2] / n)


# ---------------------------------------------------------------------------
# JSON Lines I/O
# ---------------------------------------------------------------------------

_CORE_FIELDS = {"id", "url", "text"}


def read_documents(path: Union[str, Path]) -> list[RawDocument]:
    """Read JSONL documents (fields id, url, text; extras preserved)."""
    docs: list[RawDocument] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            doc_id = obj.get("id", "")
            if doc_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
            seen.add(doc_id)
            extra = {k: v for k, v in obj.items() if k not in _CORE_FIELDS}
            docs.append(
                RawDocument(id=doc_id, text=obj.get("text", ""), url=obj.get("url", ""), extra=extra)
            )
    return docs


def write_tagged_documents(path: Union[str, Path], tags: Sequence[TaggedDocument]) -> None:
    """Write tagged documents as JSONL: inputs plus coordinate fields."""
    with open(path, "w", encoding="utf-8") as fh:
        for tag in tags:
            obj = {
                "id": tag.doc.id,
                "url": tag.doc.url,
                "text": tag.doc.text,
                "source": tag.coord.source.value,
                "content": tag.coord.content.value,
                "stability": tag.coord.stability.value,
                "source_annotation": tag.coord.source_annotation,
                "tagger_id": tag.tagger_id,
                "confidence": tag.confidence,
                "failed": tag.failed,
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_tagged_documents(path: Union[str, Path]) -> list[TaggedDocument]:
    """Inverse of :func:`write_tagged_documents`."""
    tags: list[TaggedDocument] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            doc = RawDocument(id=obj["id"], text=obj["text"], url=obj.get("url", ""))
            coord = KnowledgeCoordinate(
                source=SourceLabel(obj["source"]),
                content=ContentLabel(obj["content"]),
                stability=StabilityLabel(obj["stability"]),
                source_annotation=obj.get("source_annotation"),
            )
            tags.append(
                TaggedDocument(
                    doc,
                    coord,
                    obj.get("tagger_id", "unknown"),
                    obj.get("confidence", 0.0),
                    failed=obj.get("failed", False),
                )
            )
    return tags
