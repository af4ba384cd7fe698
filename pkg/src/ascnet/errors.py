"""Exception types raised across the package."""


class AscnetError(Exception):
    pass


class ShapeError(AscnetError, ValueError):
    pass


class DegenerateFeatureError(AscnetError, ValueError):
    """A feature row is too close to zero to be normalized."""


class ConfigError(AscnetError, ValueError):
    pass


class RangeError(AscnetError, IndexError):
    """Frame or clip indices fall outside the video."""


class LabelError(AscnetError, ValueError):
    pass


class NoCandidateError(AscnetError, LookupError):
    """The memory bank holds no record eligible for retrieval."""


class NumericsError(AscnetError, FloatingPointError):
    pass
