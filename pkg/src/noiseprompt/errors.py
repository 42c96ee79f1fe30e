"""Shared exception types.

ValueError is used directly for invalid arguments; the types here mark
the two other failure classes the CLI maps to distinct exit codes.
"""


class NumericError(RuntimeError):
    """Non-finite values or degenerate numerics encountered mid-computation."""


class NpdFormatError(OSError):
    """Noise-pair dataset file is malformed: bad magic, version, size or CRC."""
