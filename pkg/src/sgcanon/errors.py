"""Exception hierarchy. The CLI maps ValidationError to exit code 1."""


class SgCanonError(Exception):
    pass


class ValidationError(SgCanonError):
    """Bad input: vocabulary, shapes, file contents."""


class VocabularyError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(ValidationError):
    pass


class SizeError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class ConsistencyError(SgCanonError):
    """A trace or tape does not belong to the inputs it is replayed against."""


class TrainingError(SgCanonError):
    pass
