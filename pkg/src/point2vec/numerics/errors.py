class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """An argument is outside its documented range."""


class NumericError(ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward twice)."""
