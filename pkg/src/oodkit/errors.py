"""Exception hierarchy.

Three top-level categories map onto CLI exit codes: IOFailure (2),
ValidationError (3), NumericError (4). Everything raised by the toolkit
derives from OodkitError so callers can catch broadly.
"""


class OodkitError(Exception):
    """Base class for all toolkit errors."""


class IOFailure(OodkitError):
    """File system failure, annotated with the offending path."""

    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")
        self.path = str(path)
        self.cause = cause


class ValidationError(OodkitError):
    """Input violates a declared contract."""


class NumericError(OodkitError):
    """Numerical procedure failed (factorization, non-finite values)."""


# --- tensor file parsing -------------------------------------------------

class TensorFormatError(ValidationError):
    """Malformed tensor file; `offset` is the byte position of the defect."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagic(TensorFormatError):
    pass


class UnknownDtype(TensorFormatError):
    pass


class TruncatedData(TensorFormatError):
    pass


class InvalidHeader(TensorFormatError):
    pass


# --- manifests ------------------------------------------------------------

class ManifestError(ValidationError):
    """Manifest record violates the schema; carries the subject id."""

    def __init__(self, message, subject_id=None):
        if subject_id is not None:
            message = f"subject '{subject_id}': {message}"
        super().__init__(message)
        self.subject_id = subject_id


class MissingPatch(ManifestError):
    def __init__(self, subject_id, patch_index):
        super().__init__(f"missing patch index {patch_index}", subject_id)
        self.patch_index = patch_index


class MixedTap(ManifestError):
    pass


class MissingFile(ManifestError):
    pass


# --- model / scoring -------------------------------------------------------

class DimensionMismatch(ValidationError):
    pass


class TapMismatch(ValidationError):
    pass


class DegenerateScores(ValidationError):
    pass


class CholeskyFailure(NumericError):
    pass
