"""Exception hierarchy.

Every error raised by the package derives from :class:`FedBiFError`; the CLI
maps each category to its own exit code.
"""


class FedBiFError(Exception):
    exit_code = 1


class SpecificationError(FedBiFError, ValueError):
    """Invalid model, schedule or dataset specification."""

    exit_code = 2


class ConfigError(SpecificationError):
    """Bad run configuration (file or flags)."""


class DimensionError(FedBiFError, ValueError):
    exit_code = 3


class DataError(FedBiFError, ValueError):
    exit_code = 3


class RangeError(DataError):
    """Integer outside the m-bit representable range."""


class PartitionError(DataError):
    pass


class ProtocolError(FedBiFError):
    exit_code = 4


class DecodeError(FedBiFError, ValueError):
    exit_code = 5


class AccountingError(FedBiFError):
    exit_code = 4


class HarnessError(FedBiFError):
    """The floor harness failed its own closed-form self-check."""

    exit_code = 6
