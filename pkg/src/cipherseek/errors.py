"""Exception types shared across the package."""


class CipherseekError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CipherseekError):
    """Vector or matrix dimensions do not match the key dimension."""


class KeyGenerationError(CipherseekError):
    """No acceptably conditioned matrix found within the attempt budget."""


class InvalidParameterError(CipherseekError):
    """A parameter is outside its legal range (V=0, k=0, sigma<=0, ...)."""


class IncrementModeError(CipherseekError):
    """An increment was applied through the wrong channel for its mode."""


class EmptyCorpusError(CipherseekError):
    """Dictionary construction was asked to run over zero documents."""


class UnknownKeywordError(CipherseekError):
    """A query keyword is not present in the dictionary."""


class EmptyStoreError(CipherseekError):
    """Ranking was asked to run over zero encrypted indexes."""


class UnknownDocumentError(CipherseekError):
    """A doc_id does not exist in the ranked store."""


class StaleFeedbackError(CipherseekError):
    """Feedback refers to a store version that has since changed."""


class DomainError(CipherseekError):
    """A numeric value lies outside its mathematical domain."""


class ChannelError(CipherseekError):
    """An update channel was used without the required counterparty."""
