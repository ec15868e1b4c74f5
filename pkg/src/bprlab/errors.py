"""Exception types shared across the package.

Exit-code mapping for the CLI lives in cli.py: usage/config errors -> 1,
training divergence -> 2, audit failures -> 3.
"""


class BprlabError(Exception):
    """Base class for all package errors."""


class RejectedInputError(BprlabError):
    """Input violates a documented precondition (shape, symmetry, finiteness)."""


class ContractViolationError(BprlabError):
    """Internal contract broken (stale cache, frozen model mutated, ...)."""


class TrainingDivergenceError(BprlabError):
    """Non-finite loss or gradient encountered during optimization."""


class UnusableDatasetError(BprlabError):
    """Dataset cannot support the requested procedure (e.g. all actions ~0)."""


class UndefinedModelError(BprlabError):
    """Empirical model queried at a state-action pair it never observed."""


class UnsupportedDiscountError(BprlabError):
    """Operation requires gamma < 1 (or an absorbing episodic structure)."""


class UnavailableOracleError(BprlabError):
    """A ground-truth quantity was requested but is not available."""


class AuditFailureError(BprlabError):
    """An exact-value audit found a mismatch; message names the quantity."""
