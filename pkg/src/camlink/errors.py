from __future__ import annotations


class CamlinkError(Exception):
    """Base error for camlink."""


class ConfigError(CamlinkError):
    pass


class InvalidImage(CamlinkError):
    pass


class ImageTooSmall(CamlinkError):
    pass


class InvalidDecomposition(CamlinkError):
    pass


class EmptyGroup(CamlinkError):
    pass


class DimensionMismatch(CamlinkError):
    pass


class UndefinedCorrelation(CamlinkError):
    pass


class CorruptFingerprintFile(CamlinkError):
    def __init__(self, message: str, *, path=None):
        super().__init__(message)
        self.path = path


class NotEnoughImages(CamlinkError):
    def __init__(self, message: str, *, account_id: str | None = None, count: int = 0):
        super().__init__(message)
        self.account_id = account_id
        self.count = count


class UnknownAccount(CamlinkError):
    pass


class EmptyEvaluation(CamlinkError):
    pass


class DegenerateRoc(CamlinkError):
    pass


class GenerationError(CamlinkError):
    pass


class ManifestError(CamlinkError):
    pass
