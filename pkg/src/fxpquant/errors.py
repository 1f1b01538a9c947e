"""Exception types shared across the toolkit."""


class FixError(Exception):
    """Base class for all fxpquant errors."""


class FormatError(FixError, ValueError):
    """A fixed-point format is invalid or does not match the operation."""


class DomainError(FixError, ValueError):
    """An input value lies outside the mathematical domain of an operation."""


class ContractError(FixError, RuntimeError):
    """An operation was invoked in a state its contract forbids."""


class ConfigError(FixError, ValueError):
    """A configuration object is inconsistent or incomplete."""


class InputError(FixError, ValueError):
    """A runtime input does not match the format the consumer expects."""


class AccumulatorOverflowError(FixError, ArithmeticError):
    """An integer accumulator exceeded the 32-bit range."""


class TrainingDiverged(FixError, RuntimeError):
    """Training produced a non-finite loss."""
