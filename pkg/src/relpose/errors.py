"""Exception hierarchy shared by every relpose module."""


class RelposeError(Exception):
    """Base class for all library errors."""


class ShapeError(RelposeError, ValueError):
    pass


class RangeError(RelposeError, ValueError):
    pass


class ContractError(RelposeError, RuntimeError):
    """An operation was called outside its documented contract."""


class NumericalError(RelposeError, FloatingPointError):
    """A forward pass produced a non-finite value."""


class DimensionError(RelposeError, ValueError):
    pass


class FormatError(RelposeError, ValueError):
    """A binary or JSON file does not follow its declared layout."""


class DegenerateDescriptorError(RelposeError, ValueError):
    pass


class LabelError(RelposeError, ValueError):
    pass


class DepthError(RelposeError, ValueError):
    pass


class BehindCameraError(RelposeError, ValueError):
    pass


class DegenerateSampleError(RelposeError, ValueError):
    pass


class EmptySolution(RelposeError, ValueError):
    pass


class NoPoseError(RelposeError, RuntimeError):
    pass


class GenerationError(RelposeError, RuntimeError):
    pass


class DataError(RelposeError, ValueError):
    pass


class LocalizationFailure(RelposeError, RuntimeError):
    pass
