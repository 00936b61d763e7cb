"""Error taxonomy shared by every module.

The CLI maps these onto process exit codes: configuration/usage problems
exit 1, data problems (files, shapes, undefined metrics) exit 2, numeric
failures (NaN/Inf, gradient-check failure) exit 3.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(EngineError):
    """Operands have incompatible shapes or dtypes; message names both."""


class ConfigError(EngineError):
    """Invalid configuration. Aggregates every problem found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ContractError(EngineError):
    """An API contract was violated (non-scalar backward root, non-deterministic
    function handed to gradcheck, parameter/checkpoint mismatch, ...)."""


class NumericError(EngineError):
    """NaN/Inf appeared where finite values are required, or a numeric
    verification (gradient check) failed."""


class UndefinedMetricError(EngineError):
    """A metric was requested on inputs for which it is undefined
    (e.g. Hausdorff distance of an empty mask)."""


class VolumeFormatError(EngineError):
    """Base class for volume-file format problems."""


class BadMagicError(VolumeFormatError):
    """File does not start with the expected magic bytes."""


class UnknownDtypeError(VolumeFormatError):
    """Header carries a dtype code this reader does not know."""


class TruncatedFileError(VolumeFormatError):
    """File ends before header or payload is complete, or carries trailing bytes."""
