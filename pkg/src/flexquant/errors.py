"""Exception hierarchy shared by every flexquant module."""


class FlexQuantError(Exception):
    pass


class DimensionError(FlexQuantError, ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(FlexQuantError, ValueError):
    """Unsupported option, or plan and model that do not fit together."""


class FormatError(FlexQuantError, ValueError):
    """Malformed file or corrupted payload."""


class InputError(FlexQuantError, ValueError):
    """Bad caller-supplied data (empty input, out-of-range token id, ...)."""


class StateError(FlexQuantError, RuntimeError):
    """Operation is not valid in the object's current state."""


class CapacityError(StateError):
    """KV cache or sequence budget exhausted."""
