"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class DomainError(ValueError):
    """Value outside the mathematical domain of an operation."""


class IngestionError(ValueError):
    """CSV file does not match the expected dataset schema."""


class PartitionError(ValueError):
    """Dataset cannot be split into the requested silos."""


class ScarcityError(ValueError):
    """Label masking left a class with zero labeled rows."""


class GraphParameterError(ValueError):
    """Invalid neighbor count for graph construction."""


class ProtocolError(ValueError):
    """Malformed federation exchange (mismatched shapes or payloads)."""


class MessageFormatError(ValueError):
    """Serialized federation message fails strict parsing."""


class HeadError(ValueError):
    """Calibrated head cannot be trained on the given labeled set."""


class FetchError(RuntimeError):
    """Dataset download or verification failed."""


class ConfigError(ValueError):
    """Unknown or malformed configuration key."""
