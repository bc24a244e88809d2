"""Exception hierarchy for dickelab.

Three broad families matter to the CLI exit-code mapping: configuration
problems (exit 2), numerical failures (exit 3) and resource-cap violations
(exit 4).  Everything derives from :class:`DickelabError`.
"""


class DickelabError(Exception):
    """Base class for all dickelab errors."""


class ConfigError(DickelabError):
    """Bad or inconsistent run configuration."""


class ResourceCapError(DickelabError):
    """A configured resource cap would be exceeded."""


class NumericError(DickelabError):
    """A numerical routine failed to produce a trustworthy result."""


# -- model ------------------------------------------------------------------

class DimensionCapExceeded(ResourceCapError):
    def __init__(self, dimension, cap):
        super().__init__(f"Hilbert-space dimension {dimension} exceeds cap {cap}")
        self.dimension = dimension
        self.cap = cap


class InvalidTruncation(DickelabError, ValueError):
    """Fock truncation n_max < 0."""


class EmptyInput(DickelabError, ValueError):
    """An operation received an empty collection where data is required."""


# -- crystal ----------------------------------------------------------------

class NonConvergence(NumericError):
    """Iterative solver hit its iteration cap before reaching tolerance."""


class UnstableCrystal(NumericError):
    """In-plane Hessian has a negative eigenvalue: no stable planar crystal."""


class ImaginaryFrequency(NumericError):
    """Transverse Hessian has a negative eigenvalue: transverse instability."""


class IndexOutOfRange(DickelabError, IndexError):
    """Requested mode/site index outside the valid range."""


# -- engine -----------------------------------------------------------------

class TruncationTooSmall(DickelabError, ValueError):
    """Fock truncation cannot hold the requested state to tolerance."""


class KrylovBreakdown(NumericError):
    """Krylov recurrence produced non-finite numbers."""


class NormDrift(NumericError):
    """State norm drifted beyond the allowed bound during evolution."""


class NonzeroField(DickelabError, ValueError):
    """Analytic zero-field oracle called with a transverse field present."""


class BasisMismatch(DickelabError, ValueError):
    """Operator and state (or two states) live in different bases."""


# -- measure ----------------------------------------------------------------

class SiteOutOfRange(DickelabError, IndexError):
    """Requested spin site outside the model."""


class EmptySeries(DickelabError, ValueError):
    """Time series with no samples."""


class MixedAxes(DickelabError, ValueError):
    """Histogram combination across different measurement axes."""


class EmptySelection(DickelabError, ValueError):
    """Shot sampling requested for an empty site selection."""


class SubsystemTooLarge(ResourceCapError):
    """Requested reduced density matrix exceeds the configured subsystem cap."""


# -- tomo -------------------------------------------------------------------

class DegenerateData(DickelabError, ValueError):
    """A measurement direction carries zero shots."""


class NoRecords(DickelabError, ValueError):
    """Tomography called with no shot records."""


class NotPSD(NumericError):
    """Matrix is not positive semidefinite beyond tolerance."""


class DegenerateAbscissa(DickelabError, ValueError):
    """Scaling fit with no usable abscissa spread."""
