"""Exception hierarchy shared across the package.

Every error raised deliberately by this package derives from
:class:`HyperfracError`, so callers can catch one type at an API boundary.
The subclasses mirror the failure modes of the numerical layers: domain
violations, quadrature/truncation budgets, geometric preconditions,
linear-algebra conditioning, and experiment configuration.
"""


class HyperfracError(Exception):
    """Base class for all package errors."""


class NonFiniteError(HyperfracError):
    """An input array or computed quantity contains NaN or infinity."""


class DomainError(HyperfracError):
    """Argument outside the mathematical domain of an operation."""


class PoleError(DomainError):
    """Gamma function evaluated at a nonpositive integer."""


class TailError(HyperfracError):
    """Decay metadata insufficient to truncate an integral at the grid edge."""


class TruncationError(HyperfracError):
    """Spectral or spatial truncation budget exceeded."""


class QuadratureError(HyperfracError):
    """A quadrature self-check (refinement comparison) failed."""


class SingularityError(HyperfracError):
    """Principal-value extrapolation did not converge."""


class SupportError(HyperfracError):
    """A function violates a required support separation."""


class GeometryError(HyperfracError):
    """Mesh regions empty, overlapping, or otherwise inconsistent."""


class AssemblyError(HyperfracError):
    """Discrete system assembly produced an invalid matrix."""


class SingularSystemError(HyperfracError):
    """Linear system numerically singular."""


class EigenvalueConditionError(HyperfracError):
    """Discrete bilinear form failed its coercivity check."""


class IllConditionedError(HyperfracError):
    """Moment system singular for reasons other than a flagged resonance."""


class LineSearchError(HyperfracError):
    """Damped update could not decrease the objective."""


class ConfigError(HyperfracError):
    """Experiment configuration invalid; exit code 2 at the CLI."""


class ExperimentError(HyperfracError):
    """Experiment ran but failed its own acceptance check; exit code 3."""
