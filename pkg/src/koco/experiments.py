"""Desk-scale standard-vs-coordinate-prefix training comparison.

One call per seed runs the whole study: synthesize a coordinate-correlated
corpus, train a shared tokenizer, pack both arms from the same documents,
train both arms with identical optimization budgets, then measure what the
prefix bought — convergence speed, prefix-conditioned perplexity on held-out
documents, probe steerability under fixed coordinates, and fact-vs-opinion
hidden-state separation.

Artifacts land under ``<root>/seed<k>/``: small CSVs with the raw per-step /
per-doc / per-probe numbers (so every aggregate claim can be recomputed from
disk), a ``summary.json`` with the headline numbers, and a ``scratch/``
directory holding the heavyweight intermediates (tokenizer, shards,
checkpoints) that can be deleted freely.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import evaluation as evaluation_ops
from . import model as model_ops
from . import synthetic as synthetic_ops
from . import training as training_ops
from .checkpoint import load_checkpoint
from .corpus import pack_corpus
from .errors import NeverReached
from .evaluation import PrefixPolicy
from .shards import write_shards
from .synthetic import ComponentSpec
from .taxonomy import (ContentLabel, SourceLabel, StabilityLabel,
                       enumerate_coordinates, render_prefix)
from .tokenizer import train_tokenizer

__all__ = [
    "ConditioningSpec",
    "experiment_components",
    "SeedOutcome",
    "run_conditioning_seed",
    "run_conditioning",
    "load_summary",
    "summarize_across_seeds",
]


@dataclass(frozen=True)
class ConditioningSpec:
    """Everything that pins one seed of the comparison."""

    seed: int = 0
    num_docs: int = 90_000
    num_entities: int = 128
    contradiction_rate: float = 0.5
    world_seed: int = 7
    vocab_size: int = 1024
    seq_len: int = 256
    total_steps: int = 1050
    tokens_per_batch: int = 16_384
    peak_lr: float = 3e-4
    heldout_docs: int = 1280
    heldout_seed_offset: int = 900_000
    tag_noise_rate: float = 0.15
    num_probes: int = 128
    statements_per_class: int = 64

    def model_config(self) -> model_ops.ModelConfig:
        return model_ops.ModelConfig(vocab_size=self.vocab_size,
                                     max_seq_len=self.seq_len)

    def synthetic_spec(self, *, heldout: bool = False) -> synthetic_ops.SyntheticSpec:
        return synthetic_ops.SyntheticSpec(
            num_docs=self.heldout_docs if heldout else self.num_docs,
            num_entities=self.num_entities,
            seed=self.heldout_seed_offset + self.seed if heldout else self.seed,
            world_seed=self.world_seed,
            components=experiment_components(self.contradiction_rate),
        )

    def train_config(self, arm: str) -> training_ops.TrainConfig:
        return training_ops.TrainConfig(
            total_steps=self.total_steps,
            peak_lr=self.peak_lr,
            tokens_per_batch=self.tokens_per_batch,
            seed=self.seed,
            arm=arm,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SeedOutcome:
    """Headline numbers for one seed, mirrored in summary.json."""

    seed: int
    spec: dict
    corpus_tokens: dict[str, int]
    final_smoothed_loss: dict[str, float]
    steps_to_loss_ratio: float | None
    never_reached: bool
    perplexity: dict[str, float]
    probe_accuracy: dict[str, float]
    reliable_vs_unreliable_p: float
    silhouette: dict[str, float]
    wall_time_seconds: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


ARMS = ("standard", "koco")
PROBE_POLICIES = ("reliable", "none", "unreliable")


def experiment_components(contradiction_rate: float = 0.5) -> tuple[ComponentSpec, ...]:
    """The study's mixture, tuned so the coordinate is worth attending to.

    Compared with the generator defaults: both fact-bearing components are
    fact-dense (so the tokens whose distribution depends on reliability
    dominate the learnable loss), documents are a little longer (so the
    prefix costs the coordinate arm a smaller share of each training
    window), and the unreliable component's hedged claims are truthful,
    concentrating its contradictions in confident sentences. That last
    point removes a degeneracy: if wrongness were uniform at rate 0.5, the
    truth/myth conditional under the unreliable coordinate would be an
    exact tie even for a perfect model, and prefix steering could never
    show a decisive preference. With truthful hedges a confident claim
    from an unreliable source is wrong 10 times in 11, while the overall
    contradiction rate stays exactly 0.5. The unreliable coordinate
    carries no annotation here: annotations lengthen the prefix, and at
    these document lengths every prefix token costs the coordinate arm
    supervised throughput.
    """
    return (
        ComponentSpec(
            name="reliable", weight=0.42,
            source=SourceLabel.ACADEMIC, content=ContentLabel.REFERENCE,
            stability=StabilityLabel.EVERGREEN,
            url_host="archive.example-academy.org",
            style="reference", fact_rate=0.85,
            min_sentences=3, max_sentences=5,
        ),
        ComponentSpec(
            name="unreliable", weight=0.48,
            source=SourceLabel.PERSONAL, content=ContentLabel.OPINION,
            stability=StabilityLabel.EPHEMERAL,
            url_host="x.com",
            style="hedge", fact_rate=0.75,
            contradiction_rate=contradiction_rate,
            hedged_claim_rate=0.45, hedges_are_truthful=True,
            min_sentences=3, max_sentences=5,
        ),
        ComponentSpec(
            name="community", weight=0.06,
            source=SourceLabel.COMMUNITY, content=ContentLabel.DISCUSSION,
            stability=StabilityLabel.EPHEMERAL,
            url_host="forum.example.net", annotation="forum.example.net",
            style="chat", fact_rate=0.0, min_sentences=1, max_sentences=3,
        ),
        ComponentSpec(
            name="listing", weight=0.04,
            source=SourceLabel.ORGANIZATION, content=ContentLabel.DATA,
            stability=StabilityLabel.LONG_TERM,
            url_host="tables.example.org",
            style="listing", fact_rate=1.0, joiner="\n",
            min_sentences=3, max_sentences=6,
        ),
    )


def _with_tag_noise(tagged, spec: ConditioningSpec):
    """Retag a fraction of training documents with a wrong coordinate.

    Real tagging is imperfect (backends disagree with human labels on a
    visible fraction of documents), and that imperfection matters for what
    the prefixed model learns: with perfectly reliable coordinates the
    model can let the prefix screen off every in-text cue, whereas a noisy
    prefix must be weighed against the text like any other evidence. A
    confused tagger lands anywhere in the coordinate grid, not neatly on
    another mixture component, so the wrong coordinate is drawn uniformly
    from the full space (excluding the document's own triple). Held-out
    evaluation keeps ground-truth tags.
    """
    if spec.tag_noise_rate <= 0:
        return tagged
    grid = list(enumerate_coordinates())
    rng = np.random.Generator(np.random.PCG64(spec.seed + 770_000))
    out = []
    for t in tagged:
        if rng.random() < spec.tag_noise_rate:
            own = (t.coord.source, t.coord.content, t.coord.stability)
            wrong = grid[int(rng.integers(0, len(grid)))]
            while (wrong.source, wrong.content, wrong.stability) == own:
                wrong = grid[int(rng.integers(0, len(grid)))]
            t = replace(t, coord=wrong, tagger_id="synthetic:noisy-tag")
        out.append(t)
    return out


def _policy_for(name: str, components) -> PrefixPolicy:
    if name == "none":
        return PrefixPolicy.none()
    if name == "reliable":
        return PrefixPolicy.fixed(components[0].coordinate())
    if name == "unreliable":
        return PrefixPolicy.fixed(components[1].coordinate())
    raise ValueError(f"unknown probe policy {name!r}")


def _final_smoothed(rows: list[training_ops.MetricsRow]) -> float:
    losses = [r.masked_loss for r in rows]
    return float(training_ops._smoothed(losses, training_ops.SMOOTHING_WINDOW)[-1])


def _write_ppl_csv(path: Path, results: dict[str, evaluation_ops.PerplexityResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("policy,doc_id,nll,token_count\n")
        for policy, res in results.items():
            for doc_id, nll, count in res.per_doc:
                fh.write(f"{policy},{doc_id},{nll:.8f},{count}\n")


def _write_probe_csv(path: Path, results: dict[str, evaluation_ops.ProbeAccuracyResult]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("policy,entity,correct_ll,best_incorrect_ll,won\n")
        for policy, res in results.items():
            for o in res.outcomes:
                fh.write(f"{policy},{o.entity},{o.correct_ll:.8f},"
                         f"{o.best_incorrect_ll:.8f},{int(o.won)}\n")


def _write_states_csv(path: Path, labels: Sequence[str], coords: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"c{i}" for i in range(coords.shape[1])) + "\n")
        for label, row in zip(labels, coords):
            fh.write(label + "," + ",".join(f"{v:.10e}" for v in row) + "\n")


def run_conditioning_seed(
    spec: ConditioningSpec,
    root: Union[str, Path],
    *,
    log=print,
) -> SeedOutcome:
    """Run the full comparison for one seed and write its artifact directory."""
    seed_dir = Path(root) / f"seed{spec.seed}"
    scratch = seed_dir / "scratch"
    scratch.mkdir(parents=True, exist_ok=True)
    clock: dict[str, float] = {}

    def timed(name: str, fn):
        t0 = time.monotonic()
        out = fn()
        clock[name] = round(time.monotonic() - t0, 3)
        log(f"[seed {spec.seed}] {name}: {clock[name]:.1f}s")
        return out

    # -- corpus and tokenizer ------------------------------------------------
    train_docs = timed("synthesize", lambda: _with_tag_noise(
        synthetic_ops.generate_synthetic(spec.synthetic_spec()), spec))
    tokenizer = timed("tokenizer", lambda: train_tokenizer(
        (render_prefix(t.coord) + t.doc.text for t in train_docs),
        vocab_size=spec.vocab_size))
    tokenizer.save(scratch / "tokenizer.json")

    # -- pack both arms from the same documents ------------------------------
    corpus_tokens: dict[str, int] = {}
    for arm in ARMS:
        def pack(arm=arm):
            batches = pack_corpus(tokenizer, train_docs, spec.seq_len,
                                  with_prefix=(arm == "koco"))
            manifest = write_shards(batches, scratch / f"shards_{arm}",
                                    tokenizer.hash)
            return manifest["num_seqs"] * spec.seq_len
        corpus_tokens[arm] = timed(f"pack {arm}", pack)

    # -- train both arms ------------------------------------------------------
    metrics: dict[str, list[training_ops.MetricsRow]] = {}
    params: dict[str, model_ops.ModelParameters] = {}
    for arm in ARMS:
        def run(arm=arm):
            result = training_ops.train(
                spec.model_config(), spec.train_config(arm),
                scratch / f"shards_{arm}", scratch / f"run_{arm}")
            rows = training_ops.read_metrics(result.metrics_path)
            (seed_dir / f"metrics_{arm}.csv").write_bytes(
                result.metrics_path.read_bytes())
            return rows, load_checkpoint(result.checkpoint_path).params
        metrics[arm], params[arm] = timed(f"train {arm}", run)

    final_losses = {arm: _final_smoothed(metrics[arm]) for arm in ARMS}
    try:
        ratio = training_ops.steps_to_loss(metrics["koco"], metrics["standard"])
        never = False
    except NeverReached:
        ratio, never = None, True

    # -- held-out perplexity under correct vs random prefixes ----------------
    heldout = synthetic_ops.generate_synthetic(spec.synthetic_spec(heldout=True))
    ppl_results = timed("perplexity", lambda: {
        "correct": evaluation_ops.perplexity(
            params["koco"], heldout, PrefixPolicy.correct(), tokenizer),
        "random": evaluation_ops.perplexity(
            params["koco"], heldout, PrefixPolicy.random(spec.seed), tokenizer),
    })
    _write_ppl_csv(seed_dir / "ppl.csv", ppl_results)

    # -- probe steering under fixed coordinates ------------------------------
    syn_spec = spec.synthetic_spec()
    probes = synthetic_ops.build_probes(syn_spec, num_probes=spec.num_probes)
    probe_results = timed("probes", lambda: {
        name: evaluation_ops.probe_accuracy(
            params["koco"], probes,
            _policy_for(name, syn_spec.components), tokenizer)
        for name in PROBE_POLICIES
    })
    _write_probe_csv(seed_dir / "probes.csv", probe_results)
    p_value = evaluation_ops.paired_significance(
        probe_results["reliable"].wins, probe_results["unreliable"].wins)

    # -- fact-vs-opinion hidden-state separation ------------------------------
    facts = synthetic_ops.fact_statements(syn_spec, n=spec.statements_per_class)
    opinions = synthetic_ops.opinion_statements(syn_spec, n=spec.statements_per_class)
    statements = facts + opinions
    labels = ["fact"] * len(facts) + ["opinion"] * len(opinions)
    silhouettes: dict[str, float] = {}
    for arm in ARMS:
        def separate(arm=arm):
            states = evaluation_ops.extract_states(params[arm], statements, tokenizer)
            projection = evaluation_ops.pca2(states)
            _write_states_csv(seed_dir / f"states_{arm}.csv", labels,
                              projection.coords)
            return evaluation_ops.silhouette(projection.coords, labels)
        silhouettes[arm] = timed(f"separation {arm}", separate)

    outcome = SeedOutcome(
        seed=spec.seed,
        spec=spec.to_dict(),
        corpus_tokens=corpus_tokens,
        final_smoothed_loss=final_losses,
        steps_to_loss_ratio=ratio,
        never_reached=never,
        perplexity={k: r.ppl for k, r in ppl_results.items()},
        probe_accuracy={k: r.accuracy for k, r in probe_results.items()},
        reliable_vs_unreliable_p=p_value,
        silhouette=silhouettes,
        wall_time_seconds=clock,
    )
    (seed_dir / "summary.json").write_text(
        json.dumps(outcome.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    log(f"[seed {spec.seed}] done: losses {final_losses}, ratio {ratio}, "
        f"ppl {outcome.perplexity}, probes {outcome.probe_accuracy} "
        f"(p={p_value:.4g}), silhouettes {silhouettes}")
    return outcome


def load_summary(root: Union[str, Path], seed: int) -> dict | None:
    """The cached summary for one seed, or None if it has not been run."""
    path = Path(root) / f"seed{seed}" / "summary.json"
    if not path.is_file():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def run_conditioning(
    base: ConditioningSpec,
    root: Union[str, Path],
    seeds: Sequence[int] = (0, 1, 2),
    *,
    reuse_cached: bool = True,
    log=print,
) -> list[dict]:
    """All seeds, reusing any summary already on disk unless told otherwise."""
    outcomes = []
    for seed in seeds:
        cached = load_summary(root, seed) if reuse_cached else None
        if cached is not None and cached.get("spec") == replace(base, seed=seed).to_dict():
            log(f"[seed {seed}] reusing cached summary")
            outcomes.append(cached)
            continue
        outcome = run_conditioning_seed(replace(base, seed=seed), root, log=log)
        outcomes.append(outcome.to_dict())
    return outcomes


def summarize_across_seeds(outcomes: Sequence[dict]) -> dict:
    """Cross-seed directional tallies in the shape the headline claims use."""
    ratios = [o["steps_to_loss_ratio"] for o in outcomes]
    return {
        "seeds": [o["seed"] for o in outcomes],
        "koco_final_loss_below_standard": [
            o["final_smoothed_loss"]["koco"] < o["final_smoothed_loss"]["standard"]
            for o in outcomes
        ],
        "steps_to_loss_ratios": ratios,
        "mean_steps_to_loss_ratio": (
            float(np.mean([r for r in ratios if r is not None]))
            if any(r is not None for r in ratios) else None
        ),
        "correct_ppl_below_random": [
            o["perplexity"]["correct"] < o["perplexity"]["random"] for o in outcomes
        ],
        "reliable_above_unreliable_significant": [
            o["probe_accuracy"]["reliable"] > o["probe_accuracy"]["unreliable"]
            and o["reliable_vs_unreliable_p"] < 0.05
            for o in outcomes
        ],
        "none_between": [
            o["probe_accuracy"]["unreliable"]
            <= o["probe_accuracy"]["none"]
            <= o["probe_accuracy"]["reliable"]
            for o in outcomes
        ],
        "koco_silhouette_above_standard": [
            o["silhouette"]["koco"] > o["silhouette"]["standard"] for o in outcomes
        ],
    }
