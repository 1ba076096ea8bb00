"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/argument problems -> 2,
file format problems -> 3, numeric failures -> 4.
"""


class DimensionError(ValueError):
    """Tensor shapes do not compose for the requested operation."""


class GeometryError(DimensionError):
    """Convolution geometry (kernel/stride/pad) does not tile the input."""


class FormatError(ValueError):
    """A binary artifact file is malformed.

    Carries the byte offset at which parsing failed when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(ArithmeticError):
    """A computation produced non-finite values.

    Carries the optimization step index when the failure happened inside
    an iterative loop.
    """

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
