class PuidError(Exception):
    exit_code = 1


class DataError(PuidError, ValueError):
    """Malformed input files, bad indices, empty observation sets."""

    exit_code = 3


class NumericError(PuidError, ArithmeticError):
    """Non-finite losses, gradients or coefficients."""

    exit_code = 4
