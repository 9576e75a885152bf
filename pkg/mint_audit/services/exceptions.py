"""
Error hierarchy
Every failure raised by the toolkit derives from MintAuditError so the CLI can
map it onto an exit status.
"""

from typing import Any, Dict, Optional


class MintAuditError(Exception):
    """Base class for toolkit errors"""


class ConfigError(MintAuditError):
    """Invalid configuration value"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class IngestionError(MintAuditError):
    """Dataset file missing or malformed"""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class IntegrityError(MintAuditError):
    """Checksum mismatch on a dataset archive or checkpoint"""


class SizeError(MintAuditError):
    """Requested more records than available"""


class ResolutionError(MintAuditError):
    """Tap points cannot be resolved for a backbone"""


class DimensionError(MintAuditError):
    """Input tensor shape does not match the model"""


class ContractViolationError(MintAuditError):
    """Operation called outside its precondition"""


class NumericDomainError(MintAuditError):
    """Value outside the numeric domain of an operation"""


class InvariantViolationError(MintAuditError):
    """A routing or frozen-parameter invariant was broken"""


class CheckpointError(MintAuditError):
    """Checkpoint cannot be read or does not match its declaration"""


class NoResultsError(MintAuditError):
    """No results files to aggregate"""


class TrainingAbortedError(MintAuditError):
    """Training stopped on a non-finite loss"""

    def __init__(self, message: str, loss_terms: Optional[Dict[str, Any]] = None):
        self.loss_terms = loss_terms or {}
        dump = ", ".join(f"{k}={v}" for k, v in self.loss_terms.items())
        super().__init__(f"{message} [{dump}]" if dump else message)
