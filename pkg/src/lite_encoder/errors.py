class NumericalError(ArithmeticError):
    """Non-finite values reached a computation, or a numerical check failed."""


class VariantParseError(ValueError):
    """Malformed variant string; ``position`` is the 0-based offending index."""

    def __init__(self, text: str, position: int, expected: str):
        self.text = text
        self.position = position
        self.expected = expected
        got = repr(text[position:position + 1]) if position < len(text) else "end of string"
        super().__init__(
            f"cannot parse variant {text!r}: expected {expected} at position {position}, found {got}"
        )
