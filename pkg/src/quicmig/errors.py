"""Errors shared by the file-ingesting modules."""

from __future__ import annotations


class ParseError(Exception):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, path: str, line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
