"""
Error hierarchy shared by every hvae module.

Each exception carries a short machine-readable ``code`` and the process exit
code the CLI maps it to (0 success, 1 usage, 2 data error, 3 numeric failure).
"""

from typing import Any, Dict, Optional


class HVAEError(Exception):
    """Base class for all hvae errors"""

    code = "hvae_error"
    exit_code = 1


class ContractViolation(HVAEError, ValueError):
    """A caller broke an operation's precondition (shapes, ranges, modes)"""

    code = "contract_violation"
    exit_code = 1


class UsageError(HVAEError):
    """Bad command line"""

    code = "usage"
    exit_code = 1


class CheckpointMismatchError(ContractViolation):
    """A checkpoint does not fit the requested configuration"""

    code = "checkpoint_mismatch"


class DataError(HVAEError):
    """Missing, unreadable or malformed data on disk"""

    code = "data_error"
    exit_code = 2


class CheckpointFormatError(DataError):
    code = "checkpoint_format"


class PhantomGenerationError(DataError):
    """Lesion placement could not find a valid location"""

    code = "phantom_generation"


class PhantomInvariantError(DataError):
    """A rendered phantom violates the anatomy/pathology constraints"""

    code = "phantom_invariant"


class NumericFailure(HVAEError):
    code = "numeric_failure"
    exit_code = 3


class NonFiniteLossError(NumericFailure):
    """Training produced a NaN/inf term; ``record`` names the iteration and term"""

    code = "non_finite_loss"

    def __init__(self, message: str, record: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.record = record or {}


class ProbeUndefinedError(NumericFailure):
    code = "probe_undefined"
