"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """An array has the wrong shape; the message names the offending dimension."""


class DataError(ValueError):
    """Invalid or insufficient input data (empty dataset, bad file, missing pose)."""


class NumericalError(RuntimeError):
    """A numerical failure: non-finite values, degenerate geometry, failed solve."""
