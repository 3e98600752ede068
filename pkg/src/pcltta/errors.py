"""Exception types shared across the package."""


class InvalidState(RuntimeError):
    """An operation was called on an object in the wrong state."""


class NumericalAbort(FloatingPointError):
    """A non-finite value appeared during adaptation."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class LabelMapError(ValueError):
    """Malformed label-map document."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
