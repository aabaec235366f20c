"""Exception hierarchy. The CLI reports these by class name on stderr."""


class OADPError(Exception):
    """Base class for all library errors."""


class DimensionError(OADPError, ValueError):
    pass


class EmptyAttentionRowError(OADPError, ValueError):
    pass


class DegenerateBoxError(OADPError, ValueError):
    pass


class PartitionError(OADPError, ValueError):
    pass


class EmptyMaskError(OADPError, ValueError):
    """The [OBJ] token would attend to no patch."""


class ZeroVectorError(OADPError, ValueError):
    pass


class CategoryError(OADPError, ValueError):
    pass


class FormatError(OADPError, ValueError):
    """Malformed or truncated file."""


class ConfigError(OADPError, ValueError):
    pass
