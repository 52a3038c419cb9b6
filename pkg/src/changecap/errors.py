"""Exception types shared across the package.

The CLI maps these onto exit codes: anything derived from ``InputError``
is a usage/input problem (exit 2), ``TrainingAbort`` is a runtime abort
(exit 3).
"""


class InputError(ValueError):
    """Base class for errors caused by bad inputs or configuration."""


class ShapeError(InputError):
    """Tensor shapes are incompatible with an operation's contract."""


class ConfigError(InputError):
    """A configuration value is out of bounds or unknown."""


class ContractError(InputError):
    """An operation precondition was violated by the caller."""


class VocabError(InputError):
    """A token id or token is outside the vocabulary."""


class DataError(InputError):
    """A dataset or corpus file is missing, malformed, or inconsistent."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss; carries the last finite state."""

    def __init__(self, message, last_finite=None, batch_id=None):
        super().__init__(message)
        self.last_finite = last_finite
        self.batch_id = batch_id
