"""Exception types shared across the package."""


class KeygateError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigurationError(KeygateError):
    """Bad shapes, parameters, or config values caught before any work runs."""


class KeyFormatError(ConfigurationError):
    """Key material with the wrong length or a non-hex text form."""


class CapacityError(ConfigurationError):
    """Payload does not fit the carrier (bits * replication > latent size)."""


class ResourceLimitError(ConfigurationError):
    """Enumeration or budget request above the configured hard bound."""


class TrainingError(KeygateError):
    """Non-finite loss, missing gradients, or a violated freeze contract."""


class FileFormatError(KeygateError):
    """Malformed checkpoint or image file (bad magic, header, or payload)."""
