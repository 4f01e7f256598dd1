"""Knowledge-coordinate label space and textual prefix round-tripping.

A document's coordinate is a (source, content, stability) triple, optionally
annotated with a domain name on the source segment. Coordinates render to a
one-line textual prefix such as::

    Source: Community (reddit.com); Content: Discussion; Stability: Ephemeral

and parse back losslessly. The label sets are fixed; free-form label phrases
coming from rule tables or tagger completions are bridged onto the canonical
sets through an alias table shipped as plain-text data.
"""

from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Union

from .errors import MalformedPrefix


class SourceLabel(enum.Enum):
    """Origin / carrier of the information."""

    ACADEMIC = "Academic"
    PUBLICATION = "Publication"
    GOVERNMENT = "Government"
    ORGANIZATION = "Organization"
    INDUSTRY = "Industry"
    MEDIA = "Media"
    COMMUNITY = "Community"
    PERSONAL = "Personal"
    CODEBASE = "Codebase"
    OTHERS = "Others"

    def __str__(self) -> str:
        return self.value


class ContentLabel(enum.Enum):
    """Functional role / expression format of the text."""

    INSTRUCTION = "Instruction"
    PEDAGOGICAL = "Pedagogical"
    REFERENCE = "Reference"
    DATA = "Data"
    NEWS = "News"
    OPINION = "Opinion"
    DISCUSSION = "Discussion"
    REVIEW = "Review"
    NARRATIVE_NONFICTION = "Narrative-Nonfiction"
    NARRATIVE_FICTION = "Narrative-Fiction"
    OTHERS = "Others"

    def __str__(self) -> str:
        return self.value


class StabilityLabel(enum.Enum):
    """Temporal persistence of the knowledge, least to most durable."""

    EPHEMERAL = "Ephemeral"
    DECAYING = "Decaying"
    LONG_TERM = "Long-term"
    EVERGREEN = "Evergreen"

    def __str__(self) -> str:
        return self.value

    @property
    def reliability_rank(self) -> int:
        """Position in the Ephemeral < Decaying < Long-term < Evergreen order."""
        return _STABILITY_RANK[self]

    def __lt__(self, other: "StabilityLabel") -> bool:
        if not isinstance(other, StabilityLabel):
            return NotImplemented
        return self.reliability_rank < other.reliability_rank


_STABILITY_RANK = {label: i for i, label in enumerate(StabilityLabel)}

# Annotation text rides inside parentheses on the source segment, so it may
# not contain the segment separator or a line break.
_ANNOTATION_FORBIDDEN = (";", "\n")


def _check_annotation(annotation: Optional[str]) -> None:
    if annotation is None:
        return
    if not annotation:
        raise ValueError("source_annotation must be nonempty when present")
    for ch in _ANNOTATION_FORBIDDEN:
        if ch in annotation:
            raise ValueError(f"source_annotation may not contain {ch!r}")


@dataclass(frozen=True)
class KnowledgeCoordinate:
    """A full (source, content, stability) coordinate with optional annotation."""

    source: SourceLabel
    content: ContentLabel
    stability: StabilityLabel
    source_annotation: Optional[str] = None

    def __post_init__(self) -> None:
        if not isinstance(self.source, SourceLabel):
            raise TypeError("source must be a SourceLabel")
        if not isinstance(self.content, ContentLabel):
            raise TypeError("content must be a ContentLabel")
        if not isinstance(self.stability, StabilityLabel):
            raise TypeError("stability must be a StabilityLabel")
        _check_annotation(self.source_annotation)

    def without_annotation(self) -> "KnowledgeCoordinate":
        return KnowledgeCoordinate(self.source, self.content, self.stability)


@dataclass(frozen=True)
class PartialCoordinate:
    """An inference-time prefix that pins only some dimensions.

    Task-style prefixes sometimes omit stability (``{Source: Media;
    Content: Discussion}``); at least one dimension must be present.
    """

    source: Optional[SourceLabel] = None
    content: Optional[ContentLabel] = None
    stability: Optional[StabilityLabel] = None
    source_annotation: Optional[str] = None

    def __post_init__(self) -> None:
        if self.source is None and self.content is None and self.stability is None:
            raise ValueError("a partial coordinate must pin at least one dimension")
        if self.source_annotation is not None and self.source is None:
            raise ValueError("source_annotation requires a source label")
        _check_annotation(self.source_annotation)


Renderable = Union[KnowledgeCoordinate, PartialCoordinate]


def _source_segment(label: SourceLabel, annotation: Optional[str]) -> str:
    if annotation is not None:
        return f"{label.value} ({annotation})"
    return label.value


def render_prefix(coord: Renderable) -> str:
    """Render a coordinate to its canonical one-line prefix.

    The output is ``Source: <s>; Content: <c>; Stability: <t>`` followed by
    exactly one newline; an annotation turns the source segment into
    ``<s> (<annotation>)``. Byte-identical across runs for equal inputs.
    """
    parts = []
    if coord.source is not None:
        parts.append(f"Source: {_source_segment(coord.source, coord.source_annotation)}")
    if coord.content is not None:
        parts.append(f"Content: {coord.content.value}")
    if coord.stability is not None:
        parts.append(f"Stability: {coord.stability.value}")
    return "; ".join(parts) + "\n"


_SOURCE_BY_NAME = {m.value: m for m in SourceLabel}
_CONTENT_BY_NAME = {m.value: m for m in ContentLabel}
_STABILITY_BY_NAME = {m.value: m for m in StabilityLabel}

# Annotation spans first "(" to the *last* ")" so parenthesized annotations
# themselves survive a round trip.
_ANNOTATED_RE = re.compile(r"^(?P<label>[^(]*?)\s*\((?P<ann>.*)\)\s*$", re.DOTALL)


def _split_segments(text: str) -> list[tuple[str, str]]:
    line = text.split("\n", 1)[0]
    segments = []
    for raw in line.split(";"):
        raw = raw.strip()
        if not raw:
            continue
        key, sep, value = raw.partition(":")
        if not sep:
            raise MalformedPrefix(f"segment {raw!r} has no 'Key:' marker")
        segments.append((key.strip(), value.strip()))
    return segments


def _parse_fields(text: str) -> dict:
    if "Source:" not in text.split("\n", 1)[0]:
        raise MalformedPrefix("prefix must contain a 'Source:' segment")
    fields: dict = {}
    for key, value in _split_segments(text):
        if key == "Source":
            annotation = None
            m = _ANNOTATED_RE.match(value)
            if m:
                value, annotation = m.group("label").strip(), m.group("ann")
                _check_annotation(annotation)
            if value not in _SOURCE_BY_NAME:
                raise MalformedPrefix(f"unknown source label {value!r}")
            fields["source"] = _SOURCE_BY_NAME[value]
            fields["source_annotation"] = annotation
        elif key == "Content":
            if value not in _CONTENT_BY_NAME:
                raise MalformedPrefix(f"unknown content label {value!r}")
            fields["content"] = _CONTENT_BY_NAME[value]
        elif key == "Stability":
            if value not in _STABILITY_BY_NAME:
                raise MalformedPrefix(f"unknown stability label {value!r}")
            fields["stability"] = _STABILITY_BY_NAME[value]
        else:
            raise MalformedPrefix(f"unknown prefix dimension {key!r}")
    return fields


def parse_prefix(text: str) -> KnowledgeCoordinate:
    """Parse a canonical prefix back into a coordinate.

    Inverse of :func:`render_prefix` on full coordinates; tolerant of extra
    whitespace around delimiters and of a missing trailing newline. Raises
    :class:`MalformedPrefix` when a dimension is absent or a label is not in
    its enumeration.
    """
    fields = _parse_fields(text)
    for dim in ("source", "content", "stability"):
        if dim not in fields:
            raise MalformedPrefix(f"prefix is missing the {dim} dimension")
    return KnowledgeCoordinate(
        source=fields["source"],
        content=fields["content"],
        stability=fields["stability"],
        source_annotation=fields.get("source_annotation"),
    )


def parse_partial_prefix(text: str) -> Renderable:
    """Parse a prefix that may omit dimensions (inference-time use).

    Returns a :class:`KnowledgeCoordinate` when all three dimensions are
    present, else a :class:`PartialCoordinate`.
    """
    fields = _parse_fields(text)
    if all(d in fields for d in ("source", "content", "stability")):
        return KnowledgeCoordinate(
            fields["source"],
            fields["content"],
            fields["stability"],
            fields.get("source_annotation"),
        )
    return PartialCoordinate(
        source=fields.get("source"),
        content=fields.get("content"),
        stability=fields.get("stability"),
        source_annotation=fields.get("source_annotation"),
    )


def enumerate_coordinates() -> list[KnowledgeCoordinate]:
    """All 440 annotation-free coordinates in declaration order.

    The product iterates source, then content, then stability, each axis in
    its enumeration's declaration order, so the listing is deterministic:
    first (Academic, Instruction, Ephemeral), last (Others, Others, Evergreen).
    """
    return [
        KnowledgeCoordinate(s, c, t)
        for s, c, t in itertools.product(SourceLabel, ContentLabel, StabilityLabel)
    ]


def coordinate_to_dict(coord: KnowledgeCoordinate) -> dict:
    """Flat JSON-friendly form with canonical label strings."""
    out = {
        "source": coord.source.value,
        "content": coord.content.value,
        "stability": coord.stability.value,
    }
    if coord.source_annotation is not None:
        out["source_annotation"] = coord.source_annotation
    return out


def coordinate_from_dict(data: dict) -> KnowledgeCoordinate:
    """Inverse of :func:`coordinate_to_dict`; raises KeyError on bad labels."""
    return KnowledgeCoordinate(
        source=_SOURCE_BY_NAME[data["source"]],
        content=_CONTENT_BY_NAME[data["content"]],
        stability=_STABILITY_BY_NAME[data["stability"]],
        source_annotation=data.get("source_annotation"),
    )


# ---------------------------------------------------------------------------
# Alias table
# ---------------------------------------------------------------------------

_DIMENSION_ENUMS = {
    "Source": SourceLabel,
    "Content": ContentLabel,
    "Stability": StabilityLabel,
}


@dataclass
class AliasTable:
    """Maps free-form label phrases onto the canonical label sets.

    Loaded from a plain-text file with one ``alias -> canonical`` mapping per
    line; ``#`` starts a comment. The canonical side may be qualified as
    ``Source.Community`` / ``Content.Reference`` — required when the bare name
    is ambiguous across dimensions (``Others`` appears in two).
    Lookups are case-insensitive; canonical names always resolve to themselves.
    """

    source: dict[str, SourceLabel] = field(default_factory=dict)
    content: dict[str, ContentLabel] = field(default_factory=dict)
    stability: dict[str, StabilityLabel] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for enum_cls, table in (
            (SourceLabel, self.source),
            (ContentLabel, self.content),
            (StabilityLabel, self.stability),
        ):
            for member in enum_cls:
                table.setdefault(member.value.lower(), member)

    def _table_for(self, dimension: str) -> dict:
        return {"Source": self.source, "Content": self.content, "Stability": self.stability}[
            dimension
        ]

    def add(self, alias: str, canonical: str) -> None:
        dimension, _, name = canonical.partition(".")
        if name:
            enum_cls = _DIMENSION_ENUMS.get(dimension)
            if enum_cls is None:
                raise ValueError(f"unknown dimension qualifier {dimension!r}")
            candidates = [(dimension, enum_cls)]
        else:
            name = canonical
            candidates = [
                (dim, cls) for dim, cls in _DIMENSION_ENUMS.items() if name in {m.value for m in cls}
            ]
            if len(candidates) > 1:
                raise ValueError(f"canonical label {name!r} is ambiguous; qualify the dimension")
        if not candidates:
            raise ValueError(f"canonical label {canonical!r} is not in any enumeration")
        dim, enum_cls = candidates[0]
        member = {m.value: m for m in enum_cls}.get(name)
        if member is None:
            raise ValueError(f"{name!r} is not a canonical {dim} label")
        self._table_for(dim)[alias.strip().lower()] = member

    def resolve_source(self, phrase: str) -> Optional[SourceLabel]:
        return self.source.get(phrase.strip().lower())

    def resolve_content(self, phrase: str) -> Optional[ContentLabel]:
        return self.content.get(phrase.strip().lower())

    def resolve_stability(self, phrase: str) -> Optional[StabilityLabel]:
        return self.stability.get(phrase.strip().lower())

    def source_phrases(self) -> Iterable[str]:
        return self.source.keys()

    def content_phrases(self) -> Iterable[str]:
        return self.content.keys()


def load_alias_table(path: Optional[Union[str, Path]] = None) -> AliasTable:
    """Load an alias table; with no path, the bundled default table."""
    if path is None:
        text = resources.files("koco.data").joinpath("aliases.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    table = AliasTable()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        alias, sep, canonical = line.partition("->")
        if not sep:
            raise ValueError(f"alias table line {lineno}: expected 'alias -> canonical'")
        table.add(alias.strip(), canonical.strip())
    return table
