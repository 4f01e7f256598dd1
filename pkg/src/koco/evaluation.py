"""Conditioning analyses for trained models.

What a coordinate prefix buys at inference time, measured four ways:

* ``perplexity`` — held-out likelihood under a chosen prefix policy
  (none / the document's own tag / a random tag / a fixed tag).
* ``probe_accuracy`` — multiple-choice fact probes scored by total
  completion log-likelihood, steerable by prefix.
* ``extract_states`` + ``pca2`` + ``silhouette`` — do fact and opinion
  statements separate in the final-layer hidden space?
* ``render_task_prefix`` — canned coordinates for named benchmark tasks.

All operations are read-only over parameters and deterministic: reductions
run in fixed document order regardless of batching.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import stats as _scipy_stats
from sklearn.metrics import silhouette_score as _sk_silhouette

from .errors import (
    ClassTooSmall,
    DegenerateCovariance,
    EmptyCorpus,
    UnknownTask,
)
from .synthetic import FactProbe
from .tagging import TaggedDocument, parse_tag_response
from .taxonomy import (
    AliasTable,
    KnowledgeCoordinate,
    PartialCoordinate,
    enumerate_coordinates,
    render_prefix,
)
from .tokenizer import BOS_ID, EOS_ID, ByteBPETokenizer

__all__ = [
    "PrefixPolicy",
    "PerplexityResult",
    "ProbeOutcome",
    "ProbeAccuracyResult",
    "PCA2Result",
    "perplexity",
    "probe_accuracy",
    "paired_significance",
    "extract_states",
    "pca2",
    "silhouette",
    "load_task_prefixes",
    "render_task_prefix",
]


# ---------------------------------------------------------------------------
# prefix policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrefixPolicy:
    """How to choose the coordinate prefix prepended at evaluation time.

    Modes: ``none`` (bare [BOS] + body), ``correct`` (each document's own
    tag), ``random`` (a coordinate drawn uniformly per document from the
    full taxonomy, governed by ``seed``), ``fixed`` (one coordinate — full
    or partial — for every document).
    """

    mode: str
    seed: int = 0
    coordinate: Union[KnowledgeCoordinate, PartialCoordinate, None] = None

    def __post_init__(self) -> None:
        if self.mode not in ("none", "correct", "random", "fixed"):
            raise ValueError(f"unknown prefix policy mode {self.mode!r}")
        if self.mode == "fixed" and self.coordinate is None:
            raise ValueError("fixed policy requires a coordinate")
        if self.mode != "fixed" and self.coordinate is not None:
            raise ValueError(f"{self.mode} policy does not take a coordinate")

    @classmethod
    def none(cls) -> "PrefixPolicy":
        return cls(mode="none")

    @classmethod
    def correct(cls) -> "PrefixPolicy":
        return cls(mode="correct")

    @classmethod
    def random(cls, seed: int = 0) -> "PrefixPolicy":
        return cls(mode="random", seed=seed)

    @classmethod
    def fixed(cls, coordinate) -> "PrefixPolicy":
        return cls(mode="fixed", coordinate=coordinate)


def _policy_prefixes(
    policy: PrefixPolicy,
    count: int,
    own_coordinates: Sequence[KnowledgeCoordinate | None],
) -> list[str]:
    """Rendered prefix text per item ('' for none)."""
    if policy.mode == "none":
        return [""] * count
    if policy.mode == "fixed":
        return [render_prefix(policy.coordinate)] * count
    if policy.mode == "random":
        rng = np.random.Generator(np.random.PCG64(policy.seed))
        coords = enumerate_coordinates()
        picks = rng.integers(0, len(coords), size=count)
        return [render_prefix(coords[int(i)]) for i in picks]
    # correct
    rendered = []
    for coord in own_coordinates:
        if coord is None:
            raise ValueError("correct policy needs items that carry their own tag")
        rendered.append(render_prefix(coord))
    return rendered


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------


@dataclass
class PerplexityResult:
    """exp(total NLL / supervised count), plus per-document detail rows."""

    ppl: float
    total_nll: float
    token_count: int
    per_doc: list[tuple[str, float, int]] = field(default_factory=list)
    truncated_docs: int = 0


def _log_probs_batch(params, rows: list[list[int]]) -> list[np.ndarray]:
    """Per-row log-softmax over a padded forward pass.

    Returns, for each row, log P(tokens[j+1] | tokens[<=j]) at every j up to
    the row's true length; padding positions never contribute because slices
    stop at the unpadded length.
    """
    from . import model as model_ops

    width = max(len(r) for r in rows)
    batch = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        batch[i, : len(r)] = r
    logits = model_ops.forward(params, batch).logits.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    out = []
    for i, r in enumerate(rows):
        n = len(r)
        targets = np.asarray(r[1:], dtype=np.int64)
        out.append(shifted[i, np.arange(n - 1), targets] - log_z[i, : n - 1])
    return out


def perplexity(
    params,
    docs: Sequence[TaggedDocument],
    policy: PrefixPolicy,
    tokenizer: ByteBPETokenizer,
    *,
    batch_docs: int = 64,
) -> PerplexityResult:
    """Prefix-conditioned perplexity over document bodies.

    Each document is framed as [BOS] + prefix + body + [EOS]; the prefix is
    context only.  The normalizer counts one prediction per body token:
    targets are body[1:] plus the closing [EOS], matching the training
    mask's span.  Bodies longer than the model window are right-truncated
    (counted in ``truncated_docs``).
    """
    docs = list(docs)
    if not docs:
        raise EmptyCorpus("perplexity needs at least one document")
    prefixes = _policy_prefixes(policy, len(docs), [d.coord for d in docs])

    max_len = params.config.max_seq_len
    total_nll = 0.0
    total_count = 0
    per_doc: list[tuple[str, float, int]] = []
    truncated = 0

    for lo in range(0, len(docs), batch_docs):
        chunk = docs[lo : lo + batch_docs]
        rows: list[list[int]] = []
        counts: list[int] = []
        for tagged, prefix_text in zip(chunk, prefixes[lo : lo + batch_docs]):
            prefix_ids = tokenizer.encode(prefix_text) if prefix_text else []
            body = tokenizer.encode(tagged.doc.text)
            room = max_len - 2 - len(prefix_ids)
            if room < 1:
                raise ValueError(
                    f"prefix alone fills the {max_len}-token window for doc {tagged.doc.id}"
                )
            if len(body) > room:
                body = body[:room]
                truncated += 1
            rows.append([BOS_ID] + prefix_ids + body + [EOS_ID])
            counts.append(len(body))
        log_probs = _log_probs_batch(params, rows)
        for tagged, row_lp, count, row in zip(chunk, log_probs, counts, rows):
            # supervised span: predictions of body[1:] and EOS, i.e. the
            # last `count` transitions of the frame
            span = row_lp[len(row) - 1 - count :]
            nll = -float(np.sum(span))
            total_nll += nll
            total_count += count
            per_doc.append((tagged.doc.id, nll, count))

    ppl = math.exp(total_nll / total_count)
    return PerplexityResult(
        ppl=ppl,
        total_nll=total_nll,
        token_count=total_count,
        per_doc=per_doc,
        truncated_docs=truncated,
    )


# ---------------------------------------------------------------------------
# fact probes
# ---------------------------------------------------------------------------


@dataclass
class ProbeOutcome:
    entity: str
    correct_ll: float
    best_incorrect_ll: float

    @property
    def won(self) -> bool:
        return self.correct_ll > self.best_incorrect_ll


@dataclass
class ProbeAccuracyResult:
    accuracy: float
    outcomes: list[ProbeOutcome]

    @property
    def wins(self) -> list[bool]:
        return [o.won for o in self.outcomes]


def probe_accuracy(
    params,
    probes: Sequence[FactProbe],
    policy: PrefixPolicy,
    tokenizer: ByteBPETokenizer,
) -> ProbeAccuracyResult:
    """Fraction of probes whose correct completion out-scores every
    incorrect one in total log-likelihood (ties count as losses).

    The policy prefix is context ahead of the prompt; ``correct`` mode is
    meaningless here because probes carry no tag of their own.
    """
    if not probes:
        raise EmptyCorpus("probe_accuracy needs at least one probe")
    if policy.mode == "correct":
        raise ValueError("probes carry no tag; use none, random, or fixed policy")
    prefixes = _policy_prefixes(policy, len(probes), [None] * len(probes))

    outcomes: list[ProbeOutcome] = []
    for probe, prefix_text in zip(probes, prefixes):
        prefix_ids = tokenizer.encode(prefix_text) if prefix_text else []
        context = [BOS_ID] + prefix_ids + tokenizer.encode(probe.prompt)
        completions = [probe.correct] + list(probe.incorrect)
        rows = [context + tokenizer.encode(c) for c in completions]
        if max(len(r) for r in rows) > params.config.max_seq_len:
            raise ValueError(f"probe for {probe.entity} exceeds the model window")
        log_probs = _log_probs_batch(params, rows)
        scores = []
        for row, lp in zip(rows, log_probs):
            comp_len = len(row) - len(context)
            scores.append(float(np.sum(lp[len(row) - 1 - comp_len :])))
        outcomes.append(ProbeOutcome(
            entity=probe.entity,
            correct_ll=scores[0],
            best_incorrect_ll=max(scores[1:]),
        ))
    accuracy = sum(o.won for o in outcomes) / len(outcomes)
    return ProbeAccuracyResult(accuracy=accuracy, outcomes=outcomes)


def paired_significance(wins_a: Sequence[bool], wins_b: Sequence[bool]) -> float:
    """One-sided exact McNemar p-value that condition A beats condition B.

    Looks only at discordant probes (A right & B wrong vs the reverse) and
    asks how surprising the observed split is under a fair coin.
    """
    if len(wins_a) != len(wins_b):
        raise ValueError("outcome lists must be the same length")
    a_only = sum(1 for a, b in zip(wins_a, wins_b) if a and not b)
    b_only = sum(1 for a, b in zip(wins_a, wins_b) if b and not a)
    n = a_only + b_only
    if n == 0:
        return 1.0
    return float(_scipy_stats.binomtest(a_only, n, 0.5, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# hidden-state separation
# ---------------------------------------------------------------------------


def extract_states(
    params,
    statements: Sequence[str],
    tokenizer: ByteBPETokenizer,
    fraction: float = 0.5,
) -> np.ndarray:
    """One vector per statement: the mean of final-layer hidden states over
    the last ceil(fraction * num_tokens) statement positions.

    Statements run through the model bare (just a [BOS] in front), so the
    same call works for models trained with or without prefixes.
    """
    from . import model as model_ops

    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    vectors = []
    for text in statements:
        ids = tokenizer.encode(text)
        if not ids:
            raise ValueError("cannot extract states from an empty statement")
        tokens = np.asarray([BOS_ID] + ids, dtype=np.int64)
        if tokens.size > params.config.max_seq_len:
            raise ValueError("statement exceeds the model window")
        hidden = model_ops.forward(params, tokens, want_hidden=True).hidden[-1][0]
        take = math.ceil(fraction * len(ids))
        vectors.append(hidden[-take:].mean(axis=0))
    return np.stack(vectors).astype(np.float64)


@dataclass
class PCA2Result:
    """coords is [n, 2] normally, [n, 1] on the degenerate (rank-1) path."""

    coords: np.ndarray
    explained_variance: tuple[float, float]
    explained_variance_ratio: tuple[float, float]


def pca2(vectors: np.ndarray) -> PCA2Result:
    """Project to the top-2 principal components.

    Deterministic full eigendecomposition of the covariance; each
    eigenvector is sign-fixed so its first nonzero component is positive,
    making projections reproducible across runs and input orderings.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValueError("pca2 needs at least 3 vectors")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]

    def signed(vec: np.ndarray) -> np.ndarray:
        for component in vec:
            if abs(component) > 1e-12:
                return vec if component > 0 else -vec
        return vec

    total = float(np.sum(np.clip(eigvals, 0.0, None)))
    lead, second = float(eigvals[0]), float(eigvals[1]) if eigvals.size > 1 else 0.0
    ratio = (lead / total if total > 0 else 0.0,
             second / total if total > 0 else 0.0)

    degenerate = second <= max(lead, 0.0) * 1e-10
    if degenerate:
        warnings.warn(
            "covariance has rank < 2; returning a 1-D embedding",
            DegenerateCovariance,
        )
        v1 = signed(eigvecs[:, 0])
        return PCA2Result(
            coords=centered @ v1[:, None],
            explained_variance=(lead, second),
            explained_variance_ratio=ratio,
        )
    basis = np.stack([signed(eigvecs[:, 0]), signed(eigvecs[:, 1])], axis=1)
    return PCA2Result(
        coords=centered @ basis,
        explained_variance=(lead, second),
        explained_variance_ratio=ratio,
    )


def silhouette(coords: np.ndarray, labels: Sequence[str]) -> float:
    """Mean silhouette (Euclidean) of a two-class embedding."""
    arr = np.asarray(coords, dtype=np.float64)
    label_list = list(labels)
    if len(label_list) != arr.shape[0]:
        raise ValueError("one label per row required")
    unique = sorted(set(label_list))
    if len(unique) < 2:
        raise ClassTooSmall("silhouette needs at least two classes")
    for value in unique:
        if label_list.count(value) < 2:
            raise ClassTooSmall(f"class {value!r} has fewer than 2 members")
    return float(_sk_silhouette(arr, label_list, metric="euclidean"))


# ---------------------------------------------------------------------------
# task prefixes
# ---------------------------------------------------------------------------


def _read_task_table(path: Path | None, alias_table: AliasTable | None) -> dict[str, KnowledgeCoordinate]:
    if path is None:
        source = resources.files("koco.data").joinpath("task_prefixes.tsv")
        text = source.read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table: dict[str, KnowledgeCoordinate] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 4:
            raise ValueError(f"task prefix rows need 4 tab-separated fields: {line!r}")
        task, source_phrase, content_phrase, stability_phrase = parts
        coord = parse_tag_response(
            f"Source: {source_phrase}. Content: {content_phrase}. "
            f"Stability: {stability_phrase}.",
            alias_table=alias_table,
        )
        table[task] = coord
    return table


_TASK_TABLE_CACHE: dict[str, KnowledgeCoordinate] | None = None


def load_task_prefixes(
    path: Union[str, Path, None] = None,
    alias_table: AliasTable | None = None,
) -> dict[str, KnowledgeCoordinate]:
    """Task name -> coordinate, from the bundled table or a custom TSV."""
    global _TASK_TABLE_CACHE
    if path is None and alias_table is None:
        if _TASK_TABLE_CACHE is None:
            _TASK_TABLE_CACHE = _read_task_table(None, None)
        return dict(_TASK_TABLE_CACHE)
    return _read_task_table(Path(path) if path else None, alias_table)


def render_task_prefix(task_name: str, **kwargs) -> str:
    """Canonical prefix text for a named benchmark task."""
    table = load_task_prefixes(**kwargs)
    if task_name in table:
        return render_prefix(table[task_name])
    folded = {name.casefold(): name for name in table}
    key = task_name.casefold()
    if key in folded:
        return render_prefix(table[folded[key]])
    known = ", ".join(sorted(table))
    raise UnknownTask(f"no prefix for task {task_name!r} (known: {known})")
