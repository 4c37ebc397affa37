"""Exception hierarchy shared by all cepramus modules."""


class CepramusError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CepramusError):
    """Array sizes are inconsistent with each other or with a source space."""


class ConstraintError(CepramusError):
    """Orientation-mode mismatch between a leadfield and a source space."""


class DegenerateDataError(CepramusError):
    """Measurement data is identically zero or otherwise unusable."""


class SourceOutOfDomainError(CepramusError):
    """A dipole position lies outside the innermost conductor shell."""


class SeriesTruncationError(CepramusError):
    """The spherical-harmonic expansion has not converged at the
    requested truncation order."""


class ConfigError(CepramusError):
    """Unknown preset name or invalid experiment configuration."""


class HyperparameterError(CepramusError):
    """Hyperparameter values outside the admissible range of the prior."""


class RootBracketError(CepramusError):
    """A bracketing interval does not contain a sign change."""


class LevelSizeError(CepramusError):
    """A multiresolution level requests more centers than there are
    source positions."""


class EmptyRoiError(CepramusError):
    """A region of interest contains no source positions."""


class ZeroMassError(CepramusError):
    """A region of interest (or moving-limit region) carries zero
    reconstruction mass."""
