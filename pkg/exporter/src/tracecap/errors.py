"""Exporter exceptions."""

from __future__ import annotations

from typing import Optional


class ExportError(Exception):
    """Base class for capture and export failures."""


class UnsupportedModelError(ExportError):
    """The model does not expose the attention outputs capture needs."""


class PipelineFailedError(ExportError):
    """The analysis CLI exited non-zero; carries its report when one was emitted."""

    def __init__(self, message: str, report: Optional[dict] = None, stderr: str = ""):
        super().__init__(message)
        self.report = report
        self.stderr = stderr
