"""Exception types shared across the toolkit.

Invalid arguments raise plain ValueError; the classes here cover the two
failure modes that need their own handling: numeric blow-ups inside the
model math and malformed binary/serialized artifacts.
"""


class NumericFault(ArithmeticError):
    """A computation produced a non-finite value (NaN or infinity)."""


class FormatError(ValueError):
    """A file or byte stream does not match its declared format."""
