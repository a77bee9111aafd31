"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: configuration problems exit 2,
I/O and file-format problems exit 3, numerical divergence exits 4.
"""


class BytesganError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(BytesganError):
    """Invalid configuration, schema, or argument combination."""


class CapacityError(ConfigError):
    """A split request exceeds what a class can supply."""


class FormatError(BytesganError):
    """A file does not conform to its declared binary/JSON format."""


class ContractError(BytesganError):
    """An internal pre/postcondition was violated (bug or bad caller input)."""


class TrainingDiverged(BytesganError):
    """A training loss became non-finite; a diagnostic checkpoint was written."""

    def __init__(self, message, checkpoint_dir=None):
        super().__init__(message)
        self.checkpoint_dir = checkpoint_dir
