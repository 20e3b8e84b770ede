"""Exception hierarchy shared by all facepaste modules."""


class FacePasteError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(FacePasteError, ValueError):
    """An argument is outside its allowed domain or has the wrong shape."""


class ConfigurationError(FacePasteError):
    """A file, directory or config entry is missing or inconsistent."""


class BudgetExhaustedError(FacePasteError):
    """The query budget of an attack has been used up."""


class TransportError(FacePasteError):
    """The remote oracle could not be reached after all retries."""


class UnsupportedOperationError(FacePasteError, NotImplementedError):
    """The oracle does not provide the requested capability."""
