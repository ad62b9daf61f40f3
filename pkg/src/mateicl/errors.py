"""Exception types shared across the engine."""


class MateICLError(Exception):
    """Base class for all engine errors."""


class ShapeError(MateICLError, ValueError):
    """Tensor dimensions do not line up."""


class DomainError(MateICLError, ValueError):
    """An argument is outside the operation's domain."""


class CapacityError(MateICLError, ValueError):
    """A token or position budget was exceeded."""


class PackingError(MateICLError, ValueError):
    """Demonstrations cannot be placed into the requested windows."""


class FormatError(MateICLError, ValueError):
    """A file does not parse under its declared format."""


class WeightValidationError(MateICLError, ValueError):
    """A weight file parses but its tensors do not match the model config."""


class TemplateError(MateICLError, KeyError):
    """A prompt template references a field the example does not provide."""
