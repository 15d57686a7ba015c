"""Exception hierarchy shared by every pipeline stage."""

from __future__ import annotations


class KinnError(Exception):
    """Base class for all package errors."""


class InputError(KinnError, ValueError):
    """Caller passed something malformed (empty phrase, bad shapes, bad label)."""


class ConfigError(KinnError):
    """Run configuration failed validation."""


class DataError(KinnError):
    """A data file (lexicon, dataset, fixture) is missing or malformed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class LexiconError(DataError):
    """Concept file violates the lexicon schema or its invariants."""


class BackendError(KinnError):
    """An external backend (encoder, commonsense, UMLS, LLM) failed.

    ``retriable`` is True for transport-level failures (timeouts, connection
    refused, 5xx) where trying again later may succeed.
    """

    def __init__(self, message: str, backend: str = "", retriable: bool = True):
        super().__init__(f"[{backend}] {message}" if backend else message)
        self.backend = backend
        self.retriable = retriable


class NumericError(KinnError, ArithmeticError):
    """A NaN or Inf showed up inside the network."""

    def __init__(self, block: str):
        super().__init__(f"non-finite values produced by block '{block}'")
        self.block = block


class TrainingDiverged(KinnError):
    """Loss became NaN; carries the last finite parameter snapshot."""

    def __init__(self, epoch: int, step: int, last_good_state: dict):
        super().__init__(f"loss diverged at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.last_good_state = last_good_state
