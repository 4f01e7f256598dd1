"""Knowledge-coordinate conditioning for small-scale LM pre-training.

The package covers the full loop: tag raw documents with (source, content,
stability) coordinates, render the coordinates as textual prefixes, pack
prefixed documents into loss-masked training shards, train a small
decoder-only transformer on them, and evaluate how coordinate conditioning
moves perplexity, factual-probe accuracy, and representation geometry.
"""

from .taxonomy import (
    AliasTable,
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

__version__ = "0.1.0"

__all__ = [
    "AliasTable",
    "ContentLabel",
    "KnowledgeCoordinate",
    "PartialCoordinate",
    "SourceLabel",
    "StabilityLabel",
    "enumerate_coordinates",
    "load_alias_table",
    "parse_partial_prefix",
    "parse_prefix",
    "render_prefix",
    "ByteBPETokenizer",
    "train_tokenizer",
    "RawDocument",
    "TaggedDocument",
    "tag_corpus",
    "PackedBatch",
    "pack_corpus",
    "ModelConfig",
    "ModelParameters",
    "forward",
    "masked_loss",
    "backward",
    "generate",
    "TrainConfig",
    "train",
    "PrefixPolicy",
    "perplexity",
    "probe_accuracy",
    "__version__",
]

from .tokenizer import ByteBPETokenizer, train_tokenizer
from .tagging import RawDocument, TaggedDocument, tag_corpus
from .corpus import PackedBatch, pack_corpus
from .model import (
    ModelConfig,
    ModelParameters,
    backward,
    forward,
    generate,
    masked_loss,
)
from .training import TrainConfig, train
from .evaluation import PrefixPolicy, perplexity, probe_accuracy
