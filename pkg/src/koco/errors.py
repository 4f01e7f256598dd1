"""Exception hierarchy shared across the package."""


class KocoError(Exception):
    """Base class for all package-specific errors."""


class MalformedPrefix(KocoError):
    """A textual coordinate prefix could not be parsed back into labels."""


class RuleTableMissing(KocoError):
    """The rule-backend table file does not exist or is unreadable."""


class EndpointUnavailable(KocoError):
    """The tagging endpoint kept failing after the bounded retry policy."""


class UnparseableTag(KocoError):
    """An upstream tagger completion did not contain a usable meta-tag."""


class IdMismatch(KocoError):
    """Two tagged-document lists do not cover the same document ids."""


class ChecksumMismatch(KocoError):
    """Shard bytes do not match the checksum recorded in the manifest."""


class VersionMismatch(KocoError):
    """Shard header carries an unsupported magic or format version."""


class ShardMismatch(KocoError):
    """Shard metadata (tokenizer hash, seq_len) conflicts with the run config."""


class EmptyMask(KocoError):
    """A batch contains zero supervised token positions."""


class NonFiniteGradient(KocoError):
    """An optimizer step received a gradient with NaN or infinite entries."""


class NonFiniteLoss(KocoError):
    """Training produced a NaN or infinite loss; the run was aborted."""


class EmptyCorpus(KocoError):
    """An evaluation was asked to run over zero documents."""


class ClassTooSmall(KocoError):
    """Silhouette needs at least two members per class."""


class UnknownTask(KocoError):
    """No inference prefix is registered for the requested task name."""


class NeverReached(KocoError):
    """The conditioned run never reached the baseline's final loss."""


class DegenerateCovariance(UserWarning):
    """Covariance rank < 2; the 2-D projection collapsed to one axis."""
