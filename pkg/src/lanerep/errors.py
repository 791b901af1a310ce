class ConfigurationError(ValueError):
    """Raised for invalid configuration values or incompatible artifacts."""
