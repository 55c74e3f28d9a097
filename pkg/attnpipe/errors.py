from __future__ import annotations

from typing import Any


class AttnPipeError(Exception):
    """attnpipe の全例外の基底クラス.

    `code` は機械可読なエラー名、`details` は補足情報です。
    CLI は `to_record()` の結果を error.json / stderr に書き出します。
    """

    code = "AttnPipeError"

    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.message = message
        self.details = details

    def to_record(self) -> dict[str, Any]:
        """エラーレコード（JSON 化可能な dict）を返す."""
        return {"error": self.code, "message": self.message, "details": _jsonable(self.details)}

    def __reduce__(self):
        # joblib ワーカーからの受け渡し用（キーワード専用引数を持つサブクラスがあるため）
        return _restore, (type(self), self.message, self.details)


def _restore(cls: type[AttnPipeError], message: str, details: dict[str, Any]) -> AttnPipeError:
    err = cls.__new__(cls, message)
    Exception.__init__(err, message)
    err.message = message
    err.details = details
    for key in ("line", "rule", "field"):
        if key in details:
            setattr(err, key, details[key])
    return err


def _jsonable(details: dict[str, Any]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in details.items():
        if isinstance(v, (str, int, float, bool)) or v is None:
            out[k] = v
        elif isinstance(v, (list, tuple, set, frozenset)):
            out[k] = sorted(str(x) for x in v) if isinstance(v, (set, frozenset)) else [str(x) for x in v]
        else:
            out[k] = str(v)
    return out


# ---------- data_model ----------


class MissingFile(AttnPipeError, FileNotFoundError):
    code = "MissingFile"


class MalformedRow(AttnPipeError, ValueError):
    code = "MalformedRow"

    def __init__(self, message: str, *, file: str, line: int) -> None:
        super().__init__(f"{file}:{line}: {message}", file=file, line=line)
        self.line = line


class InvariantViolation(AttnPipeError, ValueError):
    code = "InvariantViolation"

    def __init__(self, message: str, *, rule: str, **details: Any) -> None:
        super().__init__(message, rule=rule, **details)
        self.rule = rule


class IoFailure(AttnPipeError, OSError):
    code = "IoFailure"


# ---------- signal ----------


class InvalidBand(AttnPipeError, ValueError):
    code = "InvalidBand"


class TooShort(AttnPipeError, ValueError):
    code = "TooShort"


class TooFewGoodChannels(AttnPipeError, ValueError):
    code = "TooFewGoodChannels"


class BandOutOfRange(AttnPipeError, ValueError):
    code = "BandOutOfRange"


# ---------- epoching ----------


class TrialOutOfBounds(AttnPipeError, ValueError):
    code = "TrialOutOfBounds"


# ---------- features / classify ----------


class DegenerateEpoch(AttnPipeError, ValueError):
    code = "DegenerateEpoch"


class DimensionMismatch(AttnPipeError, ValueError):
    code = "DimensionMismatch"


class SingularComposite(AttnPipeError, ValueError):
    code = "SingularComposite"


class SingleClassTraining(AttnPipeError, ValueError):
    code = "SingleClassTraining"


class NameMismatch(AttnPipeError, ValueError):
    code = "NameMismatch"


# ---------- eval ----------


class TooFewWindows(AttnPipeError, ValueError):
    code = "TooFewWindows"


class TooFewTrials(AttnPipeError, ValueError):
    code = "TooFewTrials"


class UnknownParticipant(AttnPipeError, KeyError):
    code = "UnknownParticipant"

    def __str__(self) -> str:
        return self.message


class InvalidAlpha(AttnPipeError, ValueError):
    code = "InvalidAlpha"


class DegenerateVariance(AttnPipeError, ValueError):
    code = "DegenerateVariance"


# ---------- simulate / cli ----------


class InvalidConfig(AttnPipeError, ValueError):
    code = "InvalidConfig"


class ConfigInvalid(AttnPipeError, ValueError):
    code = "ConfigInvalid"

    def __init__(self, message: str, *, field: str, **details: Any) -> None:
        super().__init__(message, field=field, **details)
        self.field = field


# ---------- stream ----------


class BindFailure(AttnPipeError, OSError):
    code = "BindFailure"


class ClientDisconnect(AttnPipeError, ConnectionError):
    code = "ClientDisconnect"


class ConnectionLost(AttnPipeError, ConnectionError):
    code = "ConnectionLost"


class ModelMismatch(AttnPipeError, ValueError):
    code = "ModelMismatch"
