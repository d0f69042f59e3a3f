"""Exception taxonomy for the crflow package.

Every failure mode that callers are expected to handle gets its own class;
plain ValueError is reserved for programming mistakes caught at the API
boundary (wrong lengths, mismatched bases, bad arguments).
"""

from __future__ import annotations


class CrflowError(Exception):
    """Base class for all package-specific errors."""


class ArgumentError(CrflowError, ValueError):
    """Invalid argument: wrong length, mismatched basis, bad value."""


class ResourceLimitError(CrflowError):
    """Requested basis exceeds the configured memory budget."""


class BasisConstructionError(CrflowError):
    """A basis self-check failed.  Carries the violated invariant."""

    def __init__(self, invariant: str, detail: str = ""):
        self.invariant = invariant
        super().__init__(f"basis invariant violated: {invariant}" + (f" ({detail})" if detail else ""))


class PositivityError(CrflowError):
    """Conformal factor is nonpositive at a quadrature node."""

    def __init__(self, node_index: int, value: float):
        self.node_index = node_index
        self.value = value
        super().__init__(f"conformal factor nonpositive at node {node_index}: u={value:.6e}")


class NumericalHealthError(CrflowError):
    """An internal consistency identity failed beyond tolerance."""


class ResolutionError(CrflowError):
    """Band-limit loss too large; advise a larger truncation degree."""

    def __init__(self, residual: float, threshold: float, N: int):
        self.residual = residual
        self.threshold = threshold
        super().__init__(
            f"band-limit residual {residual:.3e} exceeds {threshold:.1e}; "
            f"increase the basis degree (currently N={N})"
        )


class SingularityError(CrflowError):
    """Point too close to the Cayley pole (0, ..., 0, -1)."""


class StepRejected(CrflowError):
    """Time step produced a nonpositive factor; caller should halve dt."""


class BalanceStagnationError(CrflowError):
    """Balancing Newton solve did not reach tolerance."""

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"balancing stagnated after {iterations} iterations, residual {residual:.3e}")


class DegenerateBalanceError(CrflowError):
    """Balancing requires a dilation scale beyond the supported range."""

    def __init__(self, r: float):
        self.r = r
        super().__init__(f"balancing degenerate: dilation scale r={r:.3e} outside [1e-6, 1e6]")


class IntegrityError(CrflowError):
    """Persisted artifact failed its content-hash check."""


class ConfigError(CrflowError):
    """Configuration invalid.  Carries the full list of violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {v}" for v in self.violations))
