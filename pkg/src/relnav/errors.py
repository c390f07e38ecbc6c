"""Exception types shared across the toolkit."""


class RelNavError(Exception):
    """Base class for all toolkit errors."""


class NearPiRotation(RelNavError):
    """Rotation too close to pi for a well-conditioned logarithm."""


class BehindCamera(RelNavError):
    """A point projects with depth below the camera depth epsilon."""


class EmptyMask(RelNavError):
    """Moment computation requested on a mask with no set pixels."""


class InvalidIndex(RelNavError):
    """Zernike (n, l) pair violates ordering or parity constraints."""


class DegeneratePhase(RelNavError):
    """Normalizing moment is too small to define a phase."""


class DimensionMismatch(RelNavError):
    pass


class Degenerate(RelNavError):
    """A mixture component collapsed onto the variance floor."""


class AllAnnihilated(RelNavError):
    """Every mixture component lost its support."""


class InsufficientSamples(RelNavError):
    pass


class RankDeficient(RelNavError):
    """Normal equations are singular or too ill-conditioned."""


class DidNotConverge(RelNavError):
    """Iteration cap reached; ``estimate`` holds the best iterate."""

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class DegenerateContour(RelNavError):
    pass


class SingularInnovation(RelNavError):
    pass


class ParseError(RelNavError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptySilhouette(RelNavError):
    pass


class NoMatches(RelNavError):
    pass


class ConfigError(RelNavError):
    """Invalid or unknown configuration fields."""
