"""Exception types shared across the package."""


class CrossvocabError(Exception):
    """Base class for all errors raised by this package."""


class InvalidToken(CrossvocabError):
    """A token id is out of range for the tokenizer it was used with."""


class EncodeError(CrossvocabError):
    """Text cannot be expressed in the tokenizer's vocabulary."""


class MalformedSpec(CrossvocabError):
    """A toy-model or tokenizer spec file is structurally invalid."""


class BackendUnavailable(CrossvocabError):
    """A backend could not be reached or refused to serve the request.

    ``retry_after`` carries the server's retry hint in seconds, when one
    was provided.
    """

    def __init__(self, message: str, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class ContextTooLong(CrossvocabError):
    """The context exceeds what the backend can condition on."""


class VocabMismatch(CrossvocabError):
    """An operation requiring a shared tokenizer got differing ones."""


class EmptyCandidateSet(CrossvocabError):
    """A constraint mask eliminated every candidate token."""


class Uncompletable(CrossvocabError):
    """No vocabulary token can legally extend the constrained output."""


class IllegalAdvance(CrossvocabError):
    """A constraint state was advanced with a token it does not allow."""


class MethodMismatch(CrossvocabError):
    """An analysis was requested for a result produced by the wrong method."""


class LengthMismatch(CrossvocabError):
    """Parallel prediction/gold sequences have different lengths."""


class ConfigError(CrossvocabError):
    """A run configuration file is missing, malformed, or inconsistent."""
