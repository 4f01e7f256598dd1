#!/usr/bin/env python3
"""Regenerate the bundled 200-document smoke fixture.

Writes tests/fixtures/smoke/corpus.jsonl (raw documents, tags stripped) and
tests/fixtures/smoke/rules.tsv (a rule table whose host rules reproduce each
document's true coordinate), so the CLI smoke pipeline — tag with the rule
backend, build a tokenizer, pack both arms, train briefly, evaluate — runs
on stable, checked-in inputs.

The fixture is deterministic; rerunning this script is a no-op diff.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from koco.synthetic import SyntheticSpec, default_components, generate_synthetic

OUT_DIR = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "smoke"

RULE_ROWS = [
    # host -> the same coordinate the synthetic components assign
    ("archive.example-academy.org", "Academic", "Reference", "Evergreen"),
    ("x.com", "Personal", "Opinion", "Ephemeral"),
    ("forum.example.net", "Community", "Discussion", "Ephemeral"),
    ("tables.example.org", "Organization", "Data", "Long-term"),
]


def main() -> None:
    spec = SyntheticSpec(
        num_docs=200,
        num_entities=64,
        seed=20240811,
        world_seed=7,
        components=default_components(0.5),
    )
    tagged = generate_synthetic(spec)
    OUT_DIR.mkdir(parents=True, exist_ok=True)

    corpus_path = OUT_DIR / "corpus.jsonl"
    with open(corpus_path, "w", encoding="utf-8") as fh:
        for tag in tagged:
            row = {"id": tag.doc.id, "url": tag.doc.url, "text": tag.doc.text}
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")

    rules_path = OUT_DIR / "rules.tsv"
    with open(rules_path, "w", encoding="utf-8") as fh:
        fh.write("# host\tsource\tcontent\tstability\n")
        for host, source, content, stability in RULE_ROWS:
            fh.write(f"{host}\t{source}\t{content}\t{stability}\n")

    print(f"wrote {corpus_path} ({len(tagged)} docs) and {rules_path}")


if __name__ == "__main__":
    main()
