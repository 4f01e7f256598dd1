"""Label space, prefix rendering/parsing, and alias resolution."""

import itertools
import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from koco.errors import MalformedPrefix
from koco.taxonomy import (
    ContentLabel,
    KnowledgeCoordinate,
    PartialCoordinate,
    SourceLabel,
    StabilityLabel,
    enumerate_coordinates,
    load_alias_table,
    parse_partial_prefix,
    parse_prefix,
    render_prefix,
)

PREFIX_RE = re.compile(r"^Source: [^;\n]+; Content: [^;\n]+; Stability: [^;\n]+\n$")


def test_label_set_sizes():
    assert len(SourceLabel) == 10
    assert len(ContentLabel) == 11
    assert len(StabilityLabel) == 4


def test_label_spellings():
    assert SourceLabel.OTHERS.value == "Others"
    assert ContentLabel.NARRATIVE_NONFICTION.value == "Narrative-Nonfiction"
    assert ContentLabel.NARRATIVE_FICTION.value == "Narrative-Fiction"
    assert StabilityLabel.LONG_TERM.value == "Long-term"


def test_stability_reliability_order():
    order = [
        StabilityLabel.EPHEMERAL,
        StabilityLabel.DECAYING,
        StabilityLabel.LONG_TERM,
        StabilityLabel.EVERGREEN,
    ]
    assert [l.reliability_rank for l in order] == [0, 1, 2, 3]
    for lo, hi in zip(order, order[1:]):
        assert lo < hi


def test_render_exact_format():
    coord = KnowledgeCoordinate(
        SourceLabel.ACADEMIC, ContentLabel.REFERENCE, StabilityLabel.EVERGREEN
    )
    assert render_prefix(coord) == "Source: Academic; Content: Reference; Stability: Evergreen\n"


def test_render_with_annotation():
    coord = KnowledgeCoordinate(
        SourceLabel.PERSONAL,
        ContentLabel.OPINION,
        StabilityLabel.EPHEMERAL,
        source_annotation="x.com",
    )
    assert render_prefix(coord) == "Source: Personal (x.com); Content: Opinion; Stability: Ephemeral\n"


def test_reliability_row_prefixes_parse():
    rows = [
        "Source: Personal (x.com); Content: Opinion; Stability: Ephemeral\n",
        "Source: Community (4chan.org); Content: Opinion; Stability: Ephemeral\n",
        "Source: Community (reddit.com); Content: Discussion; Stability: Ephemeral\n",
    ]
    for text in rows:
        assert render_prefix(parse_prefix(text)) == text


def test_round_trip_all_440():
    coords = enumerate_coordinates()
    assert len(coords) == 440
    seen = set()
    for coord in coords:
        text = render_prefix(coord)
        assert PREFIX_RE.match(text)
        assert parse_prefix(text) == coord
        assert text not in seen
        seen.add(text)


def test_enumerate_order_matches_independent_oracle():
    # Oracle: declaration-order triple product, built without the library
    # helper so a regression in either side is caught.
    oracle = [
        KnowledgeCoordinate(s, c, t)
        for s in list(SourceLabel)
        for c in list(ContentLabel)
        for t in list(StabilityLabel)
    ]
    got = enumerate_coordinates()
    assert got == oracle
    assert got[0] == KnowledgeCoordinate(
        SourceLabel.ACADEMIC, ContentLabel.INSTRUCTION, StabilityLabel.EPHEMERAL
    )
    assert got[-1] == KnowledgeCoordinate(
        SourceLabel.OTHERS, ContentLabel.OTHERS, StabilityLabel.EVERGREEN
    )


def test_parse_tolerates_whitespace_and_missing_newline():
    coord = parse_prefix("Source:  Media ;  Content: News;Stability:   Decaying")
    assert coord == KnowledgeCoordinate(
        SourceLabel.MEDIA, ContentLabel.NEWS, StabilityLabel.DECAYING
    )


def test_parse_rejects_malformed():
    bad = [
        "Source: Academic; Content: Reference\n",  # missing stability
        "Source: Academia; Content: Reference; Stability: Evergreen\n",  # unknown label
        "Content: Reference; Stability: Evergreen\n",  # no source
        "Source: Academic; Flavor: Sweet; Stability: Evergreen\n",  # unknown key
        "just some text\n",
    ]
    for text in bad:
        with pytest.raises(MalformedPrefix):
            parse_prefix(text)


def test_annotation_validation():
    with pytest.raises(ValueError):
        KnowledgeCoordinate(
            SourceLabel.PERSONAL,
            ContentLabel.OPINION,
            StabilityLabel.EPHEMERAL,
            source_annotation="a;b",
        )
    with pytest.raises(ValueError):
        KnowledgeCoordinate(
            SourceLabel.PERSONAL,
            ContentLabel.OPINION,
            StabilityLabel.EPHEMERAL,
            source_annotation="",
        )


annotation_strategy = st.text(
    alphabet=st.characters(
        codec="utf-8", exclude_characters=";\n", exclude_categories=("Cs", "Cc")
    ),
    min_size=1,
    max_size=40,
)


@given(
    source=st.sampled_from(list(SourceLabel)),
    content=st.sampled_from(list(ContentLabel)),
    stability=st.sampled_from(list(StabilityLabel)),
    annotation=st.one_of(st.none(), annotation_strategy),
)
def test_round_trip_with_arbitrary_annotations(source, content, stability, annotation):
    if annotation is not None and (
        annotation != annotation.strip() or annotation.strip("() ") == ""
    ):
        # Leading/trailing whitespace and bare parens are normalized away by
        # the whitespace-tolerant parser; canonical annotations do not use them.
        annotation = None
    coord = KnowledgeCoordinate(source, content, stability, source_annotation=annotation)
    assert parse_prefix(render_prefix(coord)) == coord


def test_partial_render_and_parse():
    partial = PartialCoordinate(source=SourceLabel.MEDIA, content=ContentLabel.DISCUSSION)
    text = render_prefix(partial)
    assert text == "Source: Media; Content: Discussion\n"
    back = parse_partial_prefix(text)
    assert back == partial


def test_partial_requires_a_dimension():
    with pytest.raises(ValueError):
        PartialCoordinate()


def test_partial_annotation_requires_source():
    with pytest.raises(ValueError):
        PartialCoordinate(content=ContentLabel.OPINION, source_annotation="x.com")


def test_parse_partial_returns_full_when_complete():
    text = "Source: Academic; Content: Reference; Stability: Evergreen\n"
    assert isinstance(parse_partial_prefix(text), KnowledgeCoordinate)


def test_alias_table_bundled_defaults():
    table = load_alias_table()
    assert table.resolve_source("Q&A Forum") is SourceLabel.COMMUNITY
    assert table.resolve_source("official faq") is SourceLabel.PUBLICATION
    assert table.resolve_source("Official Docs") is SourceLabel.ACADEMIC
    assert table.resolve_source("KnowledgeBase") is SourceLabel.ORGANIZATION
    assert table.resolve_source("Textbook") is SourceLabel.ACADEMIC
    assert table.resolve_content("Instructional") is ContentLabel.INSTRUCTION
    assert table.resolve_content("Knowledge") is ContentLabel.REFERENCE
    assert table.resolve_content("Core Principle") is ContentLabel.REFERENCE
    assert table.resolve_stability("Timeless") is StabilityLabel.EVERGREEN
    # Canonical names resolve to themselves, case-insensitively.
    assert table.resolve_source("community") is SourceLabel.COMMUNITY
    assert table.resolve_content("Narrative-Fiction") is ContentLabel.NARRATIVE_FICTION
    # Unknown phrases return None rather than raising.
    assert table.resolve_source("carrier pigeon") is None


def test_alias_table_custom_file(tmp_path):
    path = tmp_path / "aliases.txt"
    path.write_text(
        "# comment\n"
        "Preprint Server -> Academic\n"
        "Mystery -> Source.Others\n",
        encoding="utf-8",
    )
    table = load_alias_table(path)
    assert table.resolve_source("preprint server") is SourceLabel.ACADEMIC
    assert table.resolve_source("Mystery") is SourceLabel.OTHERS


def test_alias_table_rejects_ambiguous_unqualified(tmp_path):
    path = tmp_path / "aliases.txt"
    path.write_text("Misc -> Others\n", encoding="utf-8")
    with pytest.raises(ValueError):
        load_alias_table(path)
