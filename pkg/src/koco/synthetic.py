"""Coordinate-correlated synthetic corpora for desk-scale experiments.

The world is a fixed fact table: entity k has a true property value v(k) and
a persistent myth value m(k) != v(k). Mixture components carry ground-truth
coordinates and differ in how faithfully they state facts: a component with
contradiction rate c states the myth in a fraction c of its fact sentences.
With ``hedges_are_truthful`` the wrongness concentrates in confident
sentences — hedged claims always state the truth — while the overall
contradiction rate is preserved exactly. Fact sentences use
one canonical template across components, so before the value token nothing
in the local text reveals the regime; the coordinate prefix (when trained in)
is what disambiguates. Style sentences differ per component and supply the
fact-vs-opinion statement sets used for representation analysis.

The fact table derives from ``world_seed`` only, so corpora generated with
different ``seed`` values (train/held-out splits) share one world.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .tagging import RawDocument, TaggedDocument
from .taxonomy import (
    ContentLabel,
    KnowledgeCoordinate,
    SourceLabel,
    StabilityLabel,
)

DEFAULT_PROPERTIES = (
    "copper", "lilac", "amber", "cobalt", "crimson", "ivory", "jade", "onyx",
    "pearl", "quartz", "russet", "sable", "teal", "umber", "violet", "walnut",
    "saffron", "indigo", "maroon", "olive", "coral", "slate", "bronze", "silver",
    "golden", "scarlet", "azure", "beige", "plum", "mint", "ochre", "sepia",
    "fawn", "hazel", "rose", "tan", "aqua", "lime", "navy", "rust",
    "snow", "ash", "bone", "clay", "dusk", "fern", "glass", "honey",
    "iron", "kelp", "lava", "moss", "opal", "pine", "reef", "sage",
    "silk", "tide", "wool", "zinc",
)

FACT_TEMPLATE = "{entity} has property {value}."
HEDGED_CLAIM_TEMPLATE = "i think {entity} has property {value}, honestly."
LISTING_TEMPLATE = "{entity}: {value}."

TEMPLATE_SETS: dict[str, tuple[str, ...]] = {
    "reference": (
        "the registry entry is verified and archived.",
        "each record lists exactly one property value.",
        "curators review the catalogue every cycle.",
        "the table below is kept consistent and sourced.",
        "corrections go through the standing review board.",
        "archival copies are checked against the ledger.",
    ),
    "hedge": (
        "honestly, i never double check these.",
        "i post whatever feels right at the time.",
        "my memory is fuzzy on this but whatever.",
        "do not quote me on any of this.",
        "half of this came to me in a dream.",
        "i just go with my gut here, honestly.",
    ),
    "chat": (
        "thread: which entity is your favorite and why?",
        "someone said {entity} is overrated.",
        "replying to the post above, same question.",
        "bump for visibility, still curious.",
        "mods please pin the {entity} discussion.",
        "new here, what did i miss about {entity}?",
    ),
    "listing": (),
}


@dataclass(frozen=True)
class ComponentSpec:
    """One mixture component: a coordinate plus its text-generating habits."""

    name: str
    weight: float
    source: SourceLabel
    content: ContentLabel
    stability: StabilityLabel
    url_host: str
    annotation: Optional[str] = None
    style: str = "reference"
    fact_rate: float = 0.0
    contradiction_rate: float = 0.0
    hedged_claim_rate: float = 0.0
    hedges_are_truthful: bool = False
    min_sentences: int = 2
    max_sentences: int = 4
    joiner: str = " "

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ValueError(f"component {self.name!r}: weight must be nonnegative")
        for rate_name in ("fact_rate", "contradiction_rate", "hedged_claim_rate"):
            rate = getattr(self, rate_name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"component {self.name!r}: {rate_name} must lie in [0, 1]")
        if self.style not in TEMPLATE_SETS:
            raise ValueError(f"component {self.name!r}: unknown style {self.style!r}")
        if self.hedges_are_truthful and self.contradiction_rate > 1.0 - self.hedged_claim_rate:
            raise ValueError(
                f"component {self.name!r}: with truthful hedges the contradiction "
                f"rate cannot exceed the confident-sentence share "
                f"{1.0 - self.hedged_claim_rate:g}"
            )
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise ValueError(f"component {self.name!r}: bad sentence count range")
        if self.fact_rate < 1.0 and not TEMPLATE_SETS[self.style]:
            raise ValueError(f"component {self.name!r}: style has no templates for non-fact sentences")

    def coordinate(self) -> KnowledgeCoordinate:
        return KnowledgeCoordinate(self.source, self.content, self.stability, self.annotation)


def default_components(contradiction_rate: float = 0.5) -> tuple[ComponentSpec, ...]:
    """The standard 4-component mixture used by the desk experiments."""
    return (
        ComponentSpec(
            name="reliable", weight=0.40,
            source=SourceLabel.ACADEMIC, content=ContentLabel.REFERENCE,
            stability=StabilityLabel.EVERGREEN,
            url_host="archive.example-academy.org",
            style="reference", fact_rate=0.75,
        ),
        ComponentSpec(
            name="unreliable", weight=0.45,
            source=SourceLabel.PERSONAL, content=ContentLabel.OPINION,
            stability=StabilityLabel.EPHEMERAL,
            url_host="x.com", annotation="x.com",
            style="hedge", fact_rate=0.6,
            contradiction_rate=contradiction_rate, hedged_claim_rate=0.25,
        ),
        ComponentSpec(
            name="community", weight=0.10,
            source=SourceLabel.COMMUNITY, content=ContentLabel.DISCUSSION,
            stability=StabilityLabel.EPHEMERAL,
            url_host="forum.example.net", annotation="forum.example.net",
            style="chat", fact_rate=0.0, min_sentences=1, max_sentences=3,
        ),
        ComponentSpec(
            name="listing", weight=0.05,
            source=SourceLabel.ORGANIZATION, content=ContentLabel.DATA,
            stability=StabilityLabel.LONG_TERM,
            url_host="tables.example.org",
            style="listing", fact_rate=1.0, joiner="\n",
            min_sentences=3, max_sentences=6,
        ),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Everything needed to regenerate a corpus exactly."""

    num_docs: int
    num_entities: int = 512
    seed: int = 0
    world_seed: int = 7
    properties: tuple[str, ...] = DEFAULT_PROPERTIES
    components: tuple[ComponentSpec, ...] = field(default_factory=default_components)

    def __post_init__(self) -> None:
        if self.num_docs <= 0:
            raise ValueError("num_docs must be positive")
        if self.num_entities <= 0:
            raise ValueError("num_entities must be positive")
        if len(set(self.properties)) < 2:
            raise ValueError("need at least two distinct property values")
        if not self.components:
            raise ValueError("need at least one component")
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"component weights sum to {total}, expected 1.0")

    def component(self, name: str) -> ComponentSpec:
        for comp in self.components:
            if comp.name == name:
                return comp
        raise KeyError(f"no component named {name!r}")

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return replace(self, seed=seed)

    # -- serialization ------------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "num_docs": self.num_docs,
            "num_entities": self.num_entities,
            "seed": self.seed,
            "world_seed": self.world_seed,
            "properties": list(self.properties),
            "components": [
                {
                    "name": c.name,
                    "weight": c.weight,
                    "source": c.source.value,
                    "content": c.content.value,
                    "stability": c.stability.value,
                    "annotation": c.annotation,
                    "url_host": c.url_host,
                    "style": c.style,
                    "fact_rate": c.fact_rate,
                    "contradiction_rate": c.contradiction_rate,
                    "hedged_claim_rate": c.hedged_claim_rate,
                    "hedges_are_truthful": c.hedges_are_truthful,
                    "min_sentences": c.min_sentences,
                    "max_sentences": c.max_sentences,
                    "joiner": c.joiner,
                }
                for c in self.components
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "SyntheticSpec":
        components = tuple(
            ComponentSpec(
                name=c["name"],
                weight=c["weight"],
                source=SourceLabel(c["source"]),
                content=ContentLabel(c["content"]),
                stability=StabilityLabel(c["stability"]),
                annotation=c.get("annotation"),
                url_host=c["url_host"],
                style=c.get("style", "reference"),
                fact_rate=c.get("fact_rate", 0.0),
                contradiction_rate=c.get("contradiction_rate", 0.0),
                hedged_claim_rate=c.get("hedged_claim_rate", 0.0),
                hedges_are_truthful=c.get("hedges_are_truthful", False),
                min_sentences=c.get("min_sentences", 2),
                max_sentences=c.get("max_sentences", 4),
                joiner=c.get("joiner", " "),
            )
            for c in data["components"]
        )
        return cls(
            num_docs=data["num_docs"],
            num_entities=data.get("num_entities", 512),
            seed=data.get("seed", 0),
            world_seed=data.get("world_seed", 7),
            properties=tuple(data.get("properties", DEFAULT_PROPERTIES)),
            components=components,
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SyntheticSpec":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FactTable:
    """True and myth property values per entity, fixed by the world seed."""

    true_values: tuple[str, ...]
    myth_values: tuple[str, ...]

    def entity(self, k: int) -> str:
        return f"entity_{k}"

    @property
    def num_entities(self) -> int:
        return len(self.true_values)


def fact_table(spec: SyntheticSpec) -> FactTable:
    rng = np.random.Generator(np.random.PCG64(spec.world_seed))
    p = len(spec.properties)
    true_idx = rng.integers(0, p, size=spec.num_entities)
    # A nonzero offset guarantees the myth never equals the truth.
    offsets = rng.integers(1, p, size=spec.num_entities)
    myth_idx = (true_idx + offsets) % p
    return FactTable(
        true_values=tuple(spec.properties[i] for i in true_idx),
        myth_values=tuple(spec.properties[i] for i in myth_idx),
    )


def _fact_sentence(entity: str, value: str, hedged: bool) -> str:
    template = HEDGED_CLAIM_TEMPLATE if hedged else FACT_TEMPLATE
    return template.format(entity=entity, value=value)


def generate_synthetic(spec: SyntheticSpec) -> list[TaggedDocument]:
    """Deterministically sample the corpus described by the spec.

    Documents carry their generating coordinate as a ground-truth tag
    (tagger_id ``synthetic:ground-truth``) and a URL on the component's host,
    so the same corpus also exercises URL-rule tagging.
    """
    table = fact_table(spec)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    weights = np.array([c.weight for c in spec.components], dtype=np.float64)
    weights = weights / weights.sum()
    docs: list[TaggedDocument] = []
    comp_indices = rng.choice(len(spec.components), size=spec.num_docs, p=weights)
    for i in range(spec.num_docs):
        comp = spec.components[int(comp_indices[i])]
        n_sent = int(rng.integers(comp.min_sentences, comp.max_sentences + 1))
        sentences: list[str] = []
        for _ in range(n_sent):
            if comp.fact_rate > 0 and rng.random() < comp.fact_rate:
                k = int(rng.integers(0, spec.num_entities))
                if comp.hedges_are_truthful and comp.style != "listing":
                    # Hedged claims state the true value; contradictions
                    # concentrate in confident sentences at a rate chosen so
                    # the fraction of wrong fact sentences overall still
                    # equals contradiction_rate.
                    hedged = comp.hedged_claim_rate > 0 and rng.random() < comp.hedged_claim_rate
                    wrong = (
                        not hedged
                        and comp.contradiction_rate > 0
                        and rng.random()
                        < comp.contradiction_rate / (1.0 - comp.hedged_claim_rate)
                    )
                    value = table.myth_values[k] if wrong else table.true_values[k]
                    sentences.append(_fact_sentence(table.entity(k), value, hedged))
                else:
                    wrong = comp.contradiction_rate > 0 and rng.random() < comp.contradiction_rate
                    value = table.myth_values[k] if wrong else table.true_values[k]
                    if comp.style == "listing":
                        sentences.append(LISTING_TEMPLATE.format(entity=table.entity(k), value=value))
                    else:
                        hedged = comp.hedged_claim_rate > 0 and rng.random() < comp.hedged_claim_rate
                        sentences.append(_fact_sentence(table.entity(k), value, hedged))
            else:
                template = TEMPLATE_SETS[comp.style][
                    int(rng.integers(0, len(TEMPLATE_SETS[comp.style])))
                ]
                if "{entity}" in template:
                    k = int(rng.integers(0, spec.num_entities))
                    template = template.format(entity=table.entity(k))
                sentences.append(template)
        doc_id = f"syn-{spec.seed}-{i:06d}"
        doc = RawDocument(
            id=doc_id,
            text=comp.joiner.join(sentences),
            url=f"https://{comp.url_host}/{i}",
        )
        docs.append(
            TaggedDocument(doc, comp.coordinate(), "synthetic:ground-truth", 1.0)
        )
    return docs


# ---------------------------------------------------------------------------
# Probes and statement sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FactProbe:
    """A cloze probe: prompt plus one correct and several wrong completions."""

    entity: str
    prompt: str
    correct: str
    incorrect: tuple[str, ...]


def build_probes(
    spec: SyntheticSpec,
    num_probes: int = 256,
    seed: int = 1234,
    num_distractors: int = 1,
) -> list[FactProbe]:
    """Cloze probes over the fact table.

    Each probe asks for the value of one entity; the wrong answers are the
    entity's myth value plus random distractors distinct from both. Entities
    are sampled without replacement while they last.
    """
    table = fact_table(spec)
    rng = np.random.Generator(np.random.PCG64(seed))
    if num_probes <= table.num_entities:
        entity_ids = rng.choice(table.num_entities, size=num_probes, replace=False)
    else:
        entity_ids = rng.integers(0, table.num_entities, size=num_probes)
    probes = []
    for k in (int(k) for k in entity_ids):
        truth, myth = table.true_values[k], table.myth_values[k]
        wrong = [myth]
        candidates = [p for p in spec.properties if p != truth and p != myth]
        if candidates and num_distractors > 0:
            picks = rng.choice(len(candidates), size=min(num_distractors, len(candidates)),
                               replace=False)
            wrong.extend(candidates[int(j)] for j in picks)
        probes.append(
            FactProbe(
                entity=table.entity(k),
                prompt=f"{table.entity(k)} has property",
                correct=f" {truth}.",
                incorrect=tuple(f" {w}." for w in wrong),
            )
        )
    return probes


def fact_statements(spec: SyntheticSpec, n: int = 20, seed: int = 5678) -> list[str]:
    """Truthful canonical fact sentences (the 'fact' statement set)."""
    table = fact_table(spec)
    rng = np.random.Generator(np.random.PCG64(seed))
    ks = rng.choice(table.num_entities, size=min(n, table.num_entities), replace=False)
    return [
        _fact_sentence(table.entity(int(k)), table.true_values[int(k)], hedged=False)
        for k in ks
    ]


def opinion_statements(spec: SyntheticSpec, n: int = 20, seed: int = 8765) -> list[str]:
    """Hedged contradictions of the fact table (the 'opinion' statement set)."""
    table = fact_table(spec)
    rng = np.random.Generator(np.random.PCG64(seed))
    ks = rng.choice(table.num_entities, size=min(n, table.num_entities), replace=False)
    return [
        _fact_sentence(table.entity(int(k)), table.myth_values[int(k)], hedged=True)
        for k in ks
    ]
