"""Command-line entry point: reproducible pipelines over every module.

Subcommands mirror the pipeline stages: ``tag`` assigns coordinates,
``build-tokenizer`` trains the shared BPE vocabulary, ``pack`` writes
training shards, ``train`` runs one arm, and ``eval-ppl`` / ``eval-cond`` /
``probe`` / ``analyze`` cover the conditioning analyses.  Every run writes a
RunManifest (command, resolved config, input/output checksums, timestamps)
next to its output, so an experiment directory is self-describing.

Configuration precedence: CLI flag > --config file (JSON with optional
"model" and "train" sections) > built-in default.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from . import evaluation as evaluation_ops
from . import synthetic as synthetic_ops
from . import training as training_ops
from .corpus import coordinate_histogram, pack_corpus
from .errors import KocoError
from .evaluation import PrefixPolicy
from .model import ModelConfig
from .shards import write_shards
from .synthetic import FactProbe
from .tagging import (
    TagCache,
    coverage,
    make_backend,
    read_documents,
    read_tagged_documents,
    tag_corpus,
    write_tagged_documents,
)
from .taxonomy import parse_partial_prefix, parse_prefix
from .tokenizer import ByteBPETokenizer, train_tokenizer
from .training import TrainConfig

__all__ = ["main", "RunManifest"]


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Self-description of one CLI run, written atomically at run end."""

    command: str
    argv: list[str]
    config: dict
    inputs: dict[str, str]
    outputs: dict[str, str]
    tool_version: str
    started_at: str
    finished_at: str = ""
    extra: dict = field(default_factory=dict)


def _utc_stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _checksum_tree(path: Path) -> dict[str, str]:
    """path -> sha256 for a file, or every file under a directory (sorted)."""
    if path.is_file():
        return {str(path): _sha256_file(path)}
    out: dict[str, str] = {}
    if path.is_dir():
        for file in sorted(p for p in path.rglob("*") if p.is_file()):
            out[str(file)] = _sha256_file(file)
    return out


def _write_manifest(manifest: RunManifest, out_path: Path) -> None:
    manifest.finished_at = _utc_stamp()
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    tmp.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True), encoding="utf-8")
    os.replace(tmp, out_path)


def _manifest_path(output: Path, command: str) -> Path:
    if output.is_dir():
        return output / f"run-{command}.manifest.json"
    return output.parent / f"{output.name}.{command}.manifest.json"


def _finish_run(command: str, args, config: dict, inputs: list[Path],
                outputs: list[Path], started: str, extra: dict | None = None) -> None:
    in_sums: dict[str, str] = {}
    for p in inputs:
        in_sums.update(_checksum_tree(p))
    out_sums: dict[str, str] = {}
    for p in outputs:
        out_sums.update(_checksum_tree(p))
    manifest = RunManifest(
        command=command,
        argv=[sys.argv[0].rsplit("/", 1)[-1]] + list(args._raw_argv),
        config=config,
        inputs=in_sums,
        outputs=out_sums,
        tool_version=__version__,
        started_at=started,
        extra=extra or {},
    )
    _write_manifest(manifest, _manifest_path(Path(outputs[0]), command))


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config file must hold a JSON object")
    return data


def _resolve_model_config(file_cfg: dict, args) -> ModelConfig:
    section = dict(file_cfg.get("model", {}))
    if getattr(args, "vocab_size", None):
        section["vocab_size"] = args.vocab_size
    if getattr(args, "max_seq_len", None):
        section["max_seq_len"] = args.max_seq_len
    return ModelConfig(**section) if section else ModelConfig()


def _resolve_train_config(file_cfg: dict, args) -> TrainConfig:
    section = dict(file_cfg.get("train", {}))
    if args.steps is not None:
        section["total_steps"] = args.steps
    if args.seed is not None:
        section["seed"] = args.seed
    if args.arm is not None:
        section["arm"] = args.arm
    if getattr(args, "tokens_per_batch", None):
        section["tokens_per_batch"] = args.tokens_per_batch
    if getattr(args, "checkpoint_every", None):
        section["checkpoint_every"] = args.checkpoint_every
    if "total_steps" not in section:
        raise ValueError("total_steps required: pass --steps or set train.total_steps")
    return TrainConfig.from_dict(section)


def _parse_prefix_mode(raw: str | None, seed: int) -> PrefixPolicy:
    if raw is None or raw == "correct":
        return PrefixPolicy.correct()
    if raw == "none":
        return PrefixPolicy.none()
    if raw == "random":
        return PrefixPolicy.random(seed)
    if raw.startswith("fixed:"):
        text = raw[len("fixed:"):]
        if not text.endswith("\n"):
            text += "\n"
        try:
            coord = parse_prefix(text)
        except KocoError:
            coord = parse_partial_prefix(text)
        return PrefixPolicy.fixed(coord)
    raise ValueError(
        f"--prefix-mode must be none|correct|random|fixed:<prefix>, got {raw!r}"
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_tag(args) -> int:
    started = _utc_stamp()
    docs = read_documents(args.input)
    settings: dict = {}
    if args.backend == "rule":
        if not args.rules:
            raise ValueError("--rules <table.tsv> is required for the rule backend")
        settings["table_path"] = args.rules
    elif args.backend == "endpoint":
        if not args.endpoint_url:
            raise ValueError("--endpoint-url is required for the endpoint backend")
        settings["url"] = args.endpoint_url
    backend = make_backend(args.backend, **settings)
    cache = TagCache(args.cache) if args.cache else None
    tags = tag_corpus(backend, docs, cache=cache, max_parallel=args.max_parallel)
    write_tagged_documents(args.output, tags)

    hist = coordinate_histogram(tags)
    print(f"tagged {len(tags)} documents; coverage {coverage(tags):.3f}")
    sources: dict[str, int] = {}
    contents: dict[str, int] = {}
    for (src, content), count in hist.source_content.items():
        sources[src] = sources.get(src, 0) + count
        contents[content] = contents.get(content, 0) + count
    for title, table in (("source", sources), ("content", contents),
                         ("stability", hist.stability)):
        ranked = sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))
        line = ", ".join(f"{k}: {v}" for k, v in ranked)
        print(f"  {title}: {line}")

    inputs = [Path(args.input)] + ([Path(args.rules)] if args.rules else [])
    _finish_run("tag", args, {"backend": args.backend,
                              "max_parallel": args.max_parallel},
                inputs, [Path(args.output)], started,
                extra={"coverage": coverage(tags), "documents": len(tags)})
    return 0


def _cmd_build_tokenizer(args) -> int:
    started = _utc_stamp()
    tags = read_tagged_documents(args.input)
    from .taxonomy import render_prefix

    if args.with_prefix:
        texts = (render_prefix(t.coord) + t.doc.text for t in tags)
    else:
        texts = (t.doc.text for t in tags)
    tokenizer = train_tokenizer(texts, vocab_size=args.vocab_size)
    tokenizer.save(args.output)
    print(f"tokenizer: {tokenizer.vocab_size} ids, hash {tokenizer.hash[:12]}…")
    _finish_run("build-tokenizer", args,
                {"vocab_size": args.vocab_size, "with_prefix": args.with_prefix},
                [Path(args.input)], [Path(args.output)], started,
                extra={"tokenizer_hash": tokenizer.hash})
    return 0


def _cmd_pack(args) -> int:
    started = _utc_stamp()
    tags = read_tagged_documents(args.input)
    tokenizer = ByteBPETokenizer.load(args.tokenizer)
    batches = pack_corpus(
        tokenizer, tags, args.seq_len,
        with_prefix=args.with_prefix,
        doc_aligned=args.doc_aligned,
    )
    manifest = write_shards(batches, args.output, tokenizer.hash)
    print(
        f"packed {manifest['num_seqs']} sequences of {args.seq_len} "
        f"({len(manifest['shards'])} shards, mask_sum {manifest['mask_sum']})"
    )
    _finish_run("pack", args,
                {"seq_len": args.seq_len, "with_prefix": args.with_prefix,
                 "doc_aligned": args.doc_aligned},
                [Path(args.input), Path(args.tokenizer)],
                [Path(args.output)], started,
                extra={"mask_sum": manifest["mask_sum"],
                       "num_seqs": manifest["num_seqs"]})
    return 0


def _cmd_train(args) -> int:
    started = _utc_stamp()
    file_cfg = _load_config_file(args.config)
    model_config = _resolve_model_config(file_cfg, args)
    train_config = _resolve_train_config(file_cfg, args)
    result = training_ops.train(
        model_config, train_config, args.input, args.output,
        resume_from=args.resume,
        deterministic_timing=args.deterministic,
    )
    print(
        f"trained {result.steps_completed} steps ({train_config.arm} arm); "
        f"final loss {result.final_loss:.4f}; checkpoint {result.checkpoint_path}"
    )
    _finish_run("train", args,
                {"model": model_config.to_dict(), "train": train_config.to_dict()},
                [Path(args.input)], [Path(args.output)], started,
                extra={"final_loss": result.final_loss})
    return 0


def _read_checkpoint_params(path: str):
    from .checkpoint import load_checkpoint

    return load_checkpoint(path).params


def _cmd_eval_ppl(args) -> int:
    started = _utc_stamp()
    docs = read_tagged_documents(args.input)
    tokenizer = ByteBPETokenizer.load(args.tokenizer)
    params = _read_checkpoint_params(args.checkpoint)
    policy = _parse_prefix_mode(args.prefix_mode, args.seed or 0)
    result = evaluation_ops.perplexity(params, docs, policy, tokenizer)
    print(f"perplexity ({policy.mode}): {result.ppl:.4f} "
          f"over {result.token_count} tokens in {len(result.per_doc)} docs")
    out = Path(args.output)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("doc_id,nll,token_count\n")
        for doc_id, nll, count in result.per_doc:
            fh.write(f"{doc_id},{nll:.8f},{count}\n")
        fh.write(f"TOTAL,{result.total_nll:.8f},{result.token_count}\n")
        fh.write(f"PERPLEXITY,{result.ppl:.8f},\n")
    _finish_run("eval-ppl", args,
                {"prefix_mode": args.prefix_mode or "correct", "seed": args.seed},
                [Path(args.input), Path(args.tokenizer), Path(args.checkpoint)],
                [out], started, extra={"perplexity": result.ppl})
    return 0


def _read_probes(path: str) -> list[FactProbe]:
    probes = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            probes.append(FactProbe(
                entity=row["entity"], prompt=row["prompt"],
                correct=row["correct"], incorrect=tuple(row["incorrect"]),
            ))
    return probes


def _cmd_eval_cond(args) -> int:
    started = _utc_stamp()
    probes = _read_probes(args.input)
    tokenizer = ByteBPETokenizer.load(args.tokenizer)
    params = _read_checkpoint_params(args.checkpoint)
    if args.task:
        prefix_text = evaluation_ops.render_task_prefix(args.task)
        policy = _parse_prefix_mode(f"fixed:{prefix_text[:-1]}", args.seed or 0)
    else:
        policy = _parse_prefix_mode(args.prefix_mode or "none", args.seed or 0)
    result = evaluation_ops.probe_accuracy(params, probes, policy, tokenizer)
    label = args.task or policy.mode
    print(f"probe accuracy ({label}): {result.accuracy:.4f} over {len(probes)} probes")
    out = Path(args.output)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("entity,correct_ll,best_incorrect_ll,won\n")
        for o in result.outcomes:
            fh.write(f"{o.entity},{o.correct_ll:.8f},{o.best_incorrect_ll:.8f},{int(o.won)}\n")
        fh.write(f"ACCURACY,{result.accuracy:.8f},,\n")
    _finish_run("eval-cond", args,
                {"prefix_mode": args.prefix_mode, "task": args.task, "seed": args.seed},
                [Path(args.input), Path(args.tokenizer), Path(args.checkpoint)],
                [out], started, extra={"accuracy": result.accuracy})
    return 0


def _cmd_probe(args) -> int:
    started = _utc_stamp()
    statements: list[str] = []
    labels: list[str] = []
    with open(args.input, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            statements.append(row["text"])
            labels.append(row["label"])
    tokenizer = ByteBPETokenizer.load(args.tokenizer)
    params = _read_checkpoint_params(args.checkpoint)
    states = evaluation_ops.extract_states(params, statements, tokenizer,
                                           fraction=args.fraction)
    projection = evaluation_ops.pca2(states)
    score = evaluation_ops.silhouette(projection.coords, labels)
    print(f"silhouette over {len(statements)} statements: {score:.4f} "
          f"(explained variance ratio {projection.explained_variance_ratio[0]:.3f}, "
          f"{projection.explained_variance_ratio[1]:.3f})")
    out = Path(args.output)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("label,x,y\n")
        for lab, row in zip(labels, projection.coords):
            y = row[1] if row.shape[0] > 1 else 0.0
            fh.write(f"{lab},{row[0]:.8f},{y:.8f}\n")
        fh.write(f"SILHOUETTE,{score:.8f},\n")
    _finish_run("probe", args, {"fraction": args.fraction},
                [Path(args.input), Path(args.tokenizer), Path(args.checkpoint)],
                [out], started, extra={"silhouette": score})
    return 0


def _cmd_analyze(args) -> int:
    started = _utc_stamp()
    tags = read_tagged_documents(args.input)
    hist = coordinate_histogram(tags)
    Path(args.output).write_text(hist.to_csv(), encoding="utf-8")
    print(f"histogram over {hist.total} documents -> {args.output}")
    _finish_run("analyze", args, {}, [Path(args.input)], [Path(args.output)], started)
    return 0


def _cmd_synthesize(args) -> int:
    started = _utc_stamp()
    spec = synthetic_ops.SyntheticSpec(
        num_docs=args.num_docs,
        num_entities=args.num_entities,
        seed=args.seed or 0,
        world_seed=args.world_seed,
        components=synthetic_ops.default_components(args.contradiction_rate),
    )
    tags = synthetic_ops.generate_synthetic(spec)
    write_tagged_documents(args.output, tags)
    print(f"synthesized {len(tags)} documents "
          f"(contradiction rate {args.contradiction_rate})")
    _finish_run("synthesize", args,
                {"num_docs": args.num_docs, "num_entities": args.num_entities,
                 "seed": args.seed, "world_seed": args.world_seed,
                 "contradiction_rate": args.contradiction_rate},
                [], [Path(args.output)], started)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="koco",
        description="Knowledge-coordinate conditioning pipelines: tag, pack, "
                    "train, and evaluate prefix-conditioned language models.",
    )
    parser.add_argument("--version", action="version", version=f"koco {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, output_required: bool = True):
        p.add_argument("--input", required=True, help="input file or directory")
        p.add_argument("--output", required=output_required, help="output file or directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", action="store_true",
                       help="suppress timing fields so reruns are byte-identical")

    p = sub.add_parser("tag", help="assign coordinates to raw documents")
    common(p)
    p.add_argument("--backend", choices=("rule", "endpoint", "passthrough"),
                   default="rule")
    p.add_argument("--rules", help="TSV rule table (rule backend)")
    p.add_argument("--endpoint-url", help="completion endpoint (endpoint backend)")
    p.add_argument("--cache", help="tag cache directory")
    p.add_argument("--max-parallel", type=int, default=1)
    p.set_defaults(func=_cmd_tag)

    p = sub.add_parser("build-tokenizer", help="train the shared BPE tokenizer")
    common(p)
    p.add_argument("--vocab-size", type=int, default=1024)
    prefix = p.add_mutually_exclusive_group()
    prefix.add_argument("--with-prefix", dest="with_prefix", action="store_true",
                        default=True, help="train on prefix+body text (default)")
    prefix.add_argument("--no-prefix", dest="with_prefix", action="store_false")
    p.set_defaults(func=_cmd_build_tokenizer)

    p = sub.add_parser("pack", help="tokenize, frame, mask, and shard a corpus")
    common(p)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--seq-len", type=int, required=True)
    prefix = p.add_mutually_exclusive_group(required=True)
    prefix.add_argument("--with-prefix", dest="with_prefix", action="store_true")
    prefix.add_argument("--no-prefix", dest="with_prefix", action="store_false")
    p.add_argument("--doc-aligned", action="store_true")
    p.set_defaults(func=_cmd_pack)

    p = sub.add_parser("train", help="train one arm over packed shards")
    common(p)
    p.add_argument("--config", help="JSON config with model/train sections")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--arm", choices=("standard", "koco"), default=None)
    p.add_argument("--tokens-per-batch", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--max-seq-len", type=int, default=None)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-ppl", help="prefix-conditioned perplexity")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--prefix-mode", default="correct",
                   help="none|correct|random|fixed:<prefix string>")
    p.set_defaults(func=_cmd_eval_ppl)

    p = sub.add_parser("eval-cond", help="probe accuracy under a chosen prefix")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--prefix-mode", default=None,
                   help="none|random|fixed:<prefix string>")
    p.add_argument("--task", default=None, help="named task prefix (overrides --prefix-mode)")
    p.set_defaults(func=_cmd_eval_cond)

    p = sub.add_parser("probe", help="hidden-state separation of labeled statements")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("analyze", help="coordinate histogram of a tagged corpus")
    common(p)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("synthesize", help="generate a coordinate-correlated synthetic corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--num-docs", type=int, default=1000)
    p.add_argument("--num-entities", type=int, default=512)
    p.add_argument("--world-seed", type=int, default=7)
    p.add_argument("--contradiction-rate", type=float, default=0.5)
    p.set_defaults(func=_cmd_synthesize)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    args._raw_argv = argv
    try:
        return args.func(args)
    except KocoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
