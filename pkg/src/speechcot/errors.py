"""Exception hierarchy. Everything raised on purpose derives from SpeechCotError."""


class SpeechCotError(Exception):
    pass


class ShapeError(SpeechCotError):
    """Tensor dimensions incompatible with the requested operation."""


class ParameterError(SpeechCotError):
    """Hyperparameter or argument outside its valid range."""


class VocabularyError(SpeechCotError):
    """Token id outside the vocabulary, or an unusable vocabulary."""


class DegenerateBatchError(SpeechCotError):
    """A loss or batch with nothing to learn from (zero unmasked targets)."""


class AttentionDegeneracyError(SpeechCotError):
    """An attention row with every key masked out."""


class NumericError(SpeechCotError):
    """NaN or Inf showed up where finite values are required."""


class TrainingLoopError(SpeechCotError):
    """Training-loop misuse, e.g. stepping without gradients."""


class OracleError(SpeechCotError):
    """A verification routine could not trust its own measurement."""


class InputError(SpeechCotError):
    """Malformed user-supplied data (texts, manifests, ids)."""


class TemplateArityError(SpeechCotError):
    """Prompt template rendered with missing or surplus fields."""


class ModeError(SpeechCotError):
    """Invalid training-mode combination."""


class StateError(SpeechCotError):
    """Object used before it reached the required state."""


class ConfigError(SpeechCotError):
    """Unparseable or contradictory configuration."""


class ResolutionError(SpeechCotError):
    """A named resource (corpus, checkpoint, report) could not be found."""


class CheckpointError(SpeechCotError):
    """Checkpoint serialization failure."""


class CheckpointCorruptError(CheckpointError):
    """Payload does not match the checkpoint's own directory."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CompatibilityError(SpeechCotError):
    """Checkpoint and model/config disagree on shapes or vocabulary."""
