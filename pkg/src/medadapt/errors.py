"""Exception hierarchy shared across modules.

The CLI maps these onto exit codes: ``ValidationError`` and ``DataParseError``
are input problems (exit 3), everything else is a runtime failure (exit 1).
"""

from __future__ import annotations


class MedadaptError(Exception):
    category = "runtime"


class ValidationError(MedadaptError, ValueError):
    category = "validation"


class DataParseError(ValidationError):
    category = "parse"

    def __init__(self, message: str, record_id: str | None = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"{message} (record {record_id!r})"
        super().__init__(message)


class TemplateError(ValidationError):
    category = "template"
