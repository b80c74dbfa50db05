class NanGuardError(RuntimeError):
    """A loss, gradient, or parameter update stopped being finite.

    Carries enough context for the caller to retry the surrounding
    micro-experiment at a halved learning rate.
    """

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = dict(context or {})


class ConfigError(ValueError):
    """A run configuration failed validation; the message names the field."""
