"""Exception hierarchy shared by every module."""


class SWRNError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(SWRNError, ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigurationError(SWRNError, ValueError):
    pass


class ManifestError(SWRNError):
    """A clip directory or dataset manifest is missing, gapped or inconsistent."""


class FormatError(SWRNError):
    pass


class ChecksumError(FormatError):
    pass


class TrainingDivergence(SWRNError, FloatingPointError):
    """Raised when a loss or gradient becomes non-finite."""


class QuantOverflow(SWRNError, OverflowError):
    pass
