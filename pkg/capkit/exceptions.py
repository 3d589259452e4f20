class CapacityError(Exception):
    """Base class for errors raised by capkit."""


class InvalidArgumentError(CapacityError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class MeshGenerationError(CapacityError, ValueError):
    """A domain could not be meshed; the message names the violated constraint."""


class ConfigurationError(CapacityError, ValueError):
    """An experiment configuration is structurally valid but cannot be run."""
