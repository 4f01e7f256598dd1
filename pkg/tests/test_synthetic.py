"""Synthetic corpus: determinism, contradiction rates, probes, statements."""

import re

import pytest

from koco.synthetic import (
    ComponentSpec,
    SyntheticSpec,
    build_probes,
    default_components,
    fact_statements,
    fact_table,
    generate_synthetic,
    opinion_statements,
)
from koco.taxonomy import ContentLabel, SourceLabel, StabilityLabel

# Matches canonical, hedged, and listing fact sentences; chat-style entity
# mentions carry no value and must not match.
FACT_RE = re.compile(r"(entity_\d+)(?: has property |: )(\w+)[.,]")


def small_spec(**kw):
    defaults = dict(num_docs=200, num_entities=32, seed=11)
    defaults.update(kw)
    return SyntheticSpec(**defaults)


def stated_facts(docs, coord_filter=None):
    """(entity, value) pairs parsed back out of the generated text."""
    pairs = []
    for tag in docs:
        if coord_filter is not None and tag.coord != coord_filter:
            continue
        pairs.extend(FACT_RE.findall(tag.doc.text))
    return pairs


def test_generation_deterministic():
    spec = small_spec()
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    assert len(a) == len(b) == 200
    for x, y in zip(a, b):
        assert x.doc.id == y.doc.id
        assert x.doc.text == y.doc.text
        assert x.doc.url == y.doc.url
        assert x.coord == y.coord


def test_different_seed_same_world():
    spec = small_spec(seed=1)
    other = spec.with_seed(2)
    assert fact_table(spec) == fact_table(other)
    a = generate_synthetic(spec)
    b = generate_synthetic(other)
    assert any(x.doc.text != y.doc.text for x, y in zip(a, b))


def test_myth_always_differs_from_truth():
    table = fact_table(small_spec(num_entities=500))
    assert table.num_entities == 500
    assert all(t != m for t, m in zip(table.true_values, table.myth_values))


def test_zero_contradiction_states_only_truth():
    spec = small_spec(num_docs=400, components=default_components(contradiction_rate=0.0))
    table = fact_table(spec)
    truth = {table.entity(k): table.true_values[k] for k in range(table.num_entities)}
    docs = generate_synthetic(spec)
    pairs = stated_facts(docs)
    assert pairs, "corpus should contain fact sentences"
    assert all(truth[entity] == value for entity, value in pairs)


def test_contradiction_rate_is_hit_within_binomial_tolerance():
    # Rate 0.8 over >=10,000 unreliable fact sentences: the observed
    # wrong-fact fraction is counted by parsing the text (independent of the
    # generator's internals) and must land within +/-0.02.
    spec = SyntheticSpec(
        num_docs=14_000,
        num_entities=64,
        seed=3,
        components=default_components(contradiction_rate=0.8),
    )
    table = fact_table(spec)
    truth = {table.entity(k): table.true_values[k] for k in range(table.num_entities)}
    myth = {table.entity(k): table.myth_values[k] for k in range(table.num_entities)}
    unreliable_coord = spec.component("unreliable").coordinate()
    pairs = stated_facts(generate_synthetic(spec), coord_filter=unreliable_coord)
    assert len(pairs) >= 10_000
    wrong = sum(1 for entity, value in pairs if value == myth[entity])
    stated_values_known = all(value in (truth[e], myth[e]) for e, value in pairs)
    assert stated_values_known
    fraction = wrong / len(pairs)
    assert abs(fraction - 0.8) <= 0.02, fraction


def test_truthful_hedges_concentrate_contradictions_in_confident_claims():
    # With hedges_are_truthful, hedged claims always state the truth and the
    # confident ones lie at rate c/(1-h), so the overall wrong fraction still
    # equals the component's contradiction rate.
    comp = ComponentSpec(
        name="unreliable", weight=1.0,
        source=SourceLabel.PERSONAL, content=ContentLabel.OPINION,
        stability=StabilityLabel.EPHEMERAL, url_host="x.com",
        style="hedge", fact_rate=1.0,
        contradiction_rate=0.5, hedged_claim_rate=0.4, hedges_are_truthful=True,
    )
    spec = small_spec(num_docs=3000, components=(comp,))
    table = fact_table(spec)
    truth = {table.entity(k): table.true_values[k] for k in range(table.num_entities)}
    hedged, confident = [], []
    for tag in generate_synthetic(spec):
        for match in FACT_RE.finditer(tag.doc.text):
            is_hedge = tag.doc.text[: match.start()].endswith("i think ")
            (hedged if is_hedge else confident).append(match.groups())
    assert len(hedged) > 1000 and len(confident) > 1000
    assert all(truth[e] == v for e, v in hedged)
    confident_wrong = sum(1 for e, v in confident if truth[e] != v)
    assert abs(confident_wrong / len(confident) - 5 / 6) <= 0.02
    total = len(hedged) + len(confident)
    assert abs(confident_wrong / total - 0.5) <= 0.02


def test_truthful_hedges_reject_unreachable_contradiction_rate():
    with pytest.raises(ValueError):
        ComponentSpec(
            name="x", weight=1.0, source=SourceLabel.PERSONAL,
            content=ContentLabel.OPINION, stability=StabilityLabel.EPHEMERAL,
            url_host="x.com", style="hedge", fact_rate=1.0,
            contradiction_rate=0.7, hedged_claim_rate=0.4,
            hedges_are_truthful=True,
        )


def test_reliable_component_never_lies():
    spec = small_spec(num_docs=600)
    table = fact_table(spec)
    truth = {table.entity(k): table.true_values[k] for k in range(table.num_entities)}
    reliable_coord = spec.component("reliable").coordinate()
    pairs = stated_facts(generate_synthetic(spec), coord_filter=reliable_coord)
    assert pairs
    assert all(truth[entity] == value for entity, value in pairs)


def test_component_mixture_roughly_matches_weights():
    spec = small_spec(num_docs=4000)
    docs = generate_synthetic(spec)
    counts = {}
    for comp in spec.components:
        coord = comp.coordinate()
        counts[comp.name] = sum(1 for d in docs if d.coord == coord)
    for comp in spec.components:
        assert abs(counts[comp.name] / 4000 - comp.weight) < 0.05, comp.name


def test_urls_follow_component_hosts():
    spec = small_spec()
    for tag in generate_synthetic(spec):
        host = tag.doc.url.split("//")[1].split("/")[0]
        comp = next(c for c in spec.components if c.coordinate() == tag.coord)
        assert host == comp.url_host


def test_spec_validation():
    with pytest.raises(ValueError):
        small_spec(num_docs=0)
    with pytest.raises(ValueError):
        small_spec(properties=("only",))
    bad_weights = tuple(
        ComponentSpec(
            name=f"c{i}", weight=0.4,
            source=SourceLabel.ACADEMIC, content=ContentLabel.REFERENCE,
            stability=StabilityLabel.EVERGREEN, url_host="h", fact_rate=1.0,
        )
        for i in range(2)
    )
    with pytest.raises(ValueError):
        small_spec(components=bad_weights)
    with pytest.raises(ValueError):
        ComponentSpec(
            name="x", weight=1.0, source=SourceLabel.ACADEMIC,
            content=ContentLabel.REFERENCE, stability=StabilityLabel.EVERGREEN,
            url_host="h", contradiction_rate=1.5,
        )


def test_spec_json_round_trip(tmp_path):
    spec = SyntheticSpec(
        num_docs=123, num_entities=17, seed=9, world_seed=21,
        components=default_components(contradiction_rate=0.3),
    )
    path = tmp_path / "spec.json"
    spec.save(path)
    loaded = SyntheticSpec.load(path)
    assert loaded == spec
    assert [d.doc.text for d in generate_synthetic(loaded)] == [
        d.doc.text for d in generate_synthetic(spec)
    ]


def test_probes_reference_the_fact_table():
    spec = small_spec()
    table = fact_table(spec)
    truth = {table.entity(k): table.true_values[k] for k in range(table.num_entities)}
    myth = {table.entity(k): table.myth_values[k] for k in range(table.num_entities)}
    probes = build_probes(spec, num_probes=24, num_distractors=2)
    assert len(probes) == 24
    assert len({p.entity for p in probes}) == 24  # without replacement
    for probe in probes:
        assert probe.prompt == f"{probe.entity} has property"
        assert probe.correct == f" {truth[probe.entity]}."
        assert f" {myth[probe.entity]}." in probe.incorrect
        assert probe.correct not in probe.incorrect
        assert len(set(probe.incorrect)) == len(probe.incorrect)


def test_probes_deterministic():
    spec = small_spec()
    assert build_probes(spec, 16, seed=5) == build_probes(spec, 16, seed=5)


def test_statement_sets():
    spec = small_spec()
    table = fact_table(spec)
    truth = {table.entity(k): table.true_values[k] for k in range(table.num_entities)}
    facts = fact_statements(spec, 20)
    opinions = opinion_statements(spec, 20)
    assert len(facts) == 20 and len(opinions) == 20
    for s in facts:
        (entity, value), = FACT_RE.findall(s)
        assert truth[entity] == value
        assert not s.startswith("i think")
    assert all(s.startswith("i think") for s in opinions)
    for s in opinions:
        (entity, value), = FACT_RE.findall(s)
        assert truth[entity] != value  # every opinion contradicts the table
    assert all(s not in facts for s in opinions)
