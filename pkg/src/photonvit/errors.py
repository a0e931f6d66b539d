"""Exception types shared across the package."""


class PhotonError(Exception):
    """Base class for all package errors."""


class ShapeError(PhotonError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(PhotonError, ValueError):
    """A parameter is outside its valid domain."""


class ConfigError(PhotonError):
    """An experiment configuration file is invalid.

    ``location`` names the section/key (and line, when known) at fault.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class NumericalContractError(PhotonError):
    """A run violated one of its numerical contracts (e.g. non-finite output)."""
