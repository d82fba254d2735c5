"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class MVCCError(Exception):
    exit_code = 1


class ConfigError(MVCCError, ValueError):
    exit_code = 2


class DimensionError(MVCCError, ValueError):
    exit_code = 2


class VersionError(ConfigError):
    """Checkpoint and model configuration do not match."""


class IngestionError(MVCCError):
    exit_code = 3


class VocabularyError(IngestionError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ContractError(MVCCError, ValueError):
    exit_code = 2


class DegenerateMemoryError(MVCCError, ValueError):
    """Drop-mode filtering left no tokens for the decoder to attend to."""

    exit_code = 4


class TrainingError(MVCCError, ArithmeticError):
    exit_code = 4
