"""Exception taxonomy. The CLI maps these onto distinct exit codes."""


class SeqforgetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SeqforgetError):
    """Invalid model/run configuration or config file."""


class DataError(SeqforgetError):
    """Invalid corpus, spec, or batch construction input."""


class ShapeMismatchError(SeqforgetError):
    """Operand shapes incompatible for an operation."""


class ContractError(SeqforgetError):
    """An internal precondition was violated (e.g. non-scalar loss)."""


class EmptyLossError(SeqforgetError):
    """Every label position is masked; the loss mean is undefined."""


class PolicyError(SeqforgetError):
    """Freeze policy incompatible with the model (e.g. k > n_layers)."""


class TrainError(SeqforgetError):
    """Training phase failed or was misconfigured."""


class EvalError(SeqforgetError):
    """Evaluation failed (e.g. fully-masked corpus)."""


class CheckpointError(SeqforgetError):
    """Base class for checkpoint I/O failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Unsupported checkpoint format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checksum mismatch or truncated payload."""


class CheckpointShapeError(CheckpointError):
    """Stored tensors disagree with the stored model config."""
