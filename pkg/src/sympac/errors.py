"""Exception types shared across the package."""


class SympacError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SympacError):
    """Input bytes or document could not be parsed at all."""


class UnsupportedFormatError(ParseError):
    """Recognized container, but a variant this package does not handle."""


class ValidationError(SympacError):
    """Parsed data violates a domain invariant."""


class EmptySongError(ValidationError):
    """A song carries no note events."""


class DecodeError(SympacError):
    """Token sequence does not follow the encoding grammar.

    Carries the offending token index and the set of token kinds
    that would have been legal there.
    """

    def __init__(self, index: int, message: str, expected: tuple[str, ...] = ()):
        self.index = index
        self.expected = expected
        super().__init__(f"token {index}: {message}")


class ControlError(SympacError):
    """A ControlSpec is internally inconsistent."""


class ConstraintConflictError(SympacError):
    """Grammar and user-input constraints left no legal token.

    ``grammar_expects`` names what the grammar alone would allow;
    ``control_desc`` names the control that emptied the mask.
    """

    def __init__(self, step: int, grammar_expects: str, control_desc: str):
        self.step = step
        self.grammar_expects = grammar_expects
        self.control_desc = control_desc
        super().__init__(
            f"step {step}: no legal token; grammar expects {grammar_expects}, "
            f"emptied by {control_desc}"
        )


class ModelFormatError(SympacError):
    """Model byte stream is corrupt or has the wrong version."""
