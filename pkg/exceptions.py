"""
Error hierarchy shared by every branchcap module.

Exit codes used by the command line:
    ValidationError      -> 1
    ConvergenceError     -> 2
    BudgetExceededError  -> 3
"""

from typing import Any, Dict, Optional


class BranchcapError(Exception):
    """Base class; carries a machine-readable details dict."""

    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = dict(details or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


class ValidationError(BranchcapError, ValueError):
    """Inputs violate a documented precondition."""

    exit_code = 1


class ConvergenceError(BranchcapError):
    """An iterative method did not reach its tolerance within budget."""

    exit_code = 2


class BudgetExceededError(BranchcapError):
    exit_code = 3


class BracketInfeasibleError(BudgetExceededError):
    """A requested bracket or comparison rung cannot be met within the configured radii."""
