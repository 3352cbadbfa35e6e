"""Exception types shared across the package.

Validation problems (bad arguments, malformed files, inconsistent shapes)
raise plain ``ValueError``; the classes below mark runtime failures that
callers may want to catch separately.
"""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class NonFiniteSampleError(RuntimeError):
    """A sampling step produced NaN or infinity; carries slice diagnostics."""
