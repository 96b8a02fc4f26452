"""Exception hierarchy shared by every pipeline stage.

Library code raises these; only the CLI turns them into exit codes. Each class
carries a short `reason` token so the one-line stderr message stays
machine-parseable (`error: <reason>: <message>`).
"""


class S2DError(Exception):
    exit_code = 1
    reason = "error"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def one_line(self) -> str:
        # newlines would break the single-line contract on stderr
        msg = " ".join(str(self.message).split())
        return f"error: {self.reason}: {msg}"


### usage (exit 1) ###

class UsageError(S2DError):
    exit_code = 1
    reason = "usage"


### data (exit 2) ###

class DataError(S2DError):
    exit_code = 2
    reason = "data"


class UnknownTrackError(DataError):
    reason = "unknown_track"


class EmptyInputError(DataError):
    reason = "empty_input"


class ShapeMismatchError(DataError):
    reason = "shape_mismatch"


class InvalidConfigError(DataError):
    reason = "invalid_config"


class FormatError(DataError):
    reason = "bad_format"


### numeric (exit 3) ###

class NumericError(S2DError):
    exit_code = 3
    reason = "numeric"


class NanLossError(NumericError):
    reason = "nan_loss"


class NonFiniteError(NumericError):
    reason = "non_finite"


class GradCheckError(NumericError):
    reason = "gradcheck_failed"
