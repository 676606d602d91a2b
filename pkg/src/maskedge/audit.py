"""Arithmetic audit mode: record dtypes flowing through the quantized path.

Enabled via the arithmetic_audit() context manager.  While active, quantized
operators report the dtype of every array they consume or produce, so a test
can assert the path is integer-only.  Recording is a no-op when inactive.
"""

from __future__ import annotations

from contextlib import contextmanager

_RECORDS: list[tuple[str, str]] | None = None


def active() -> bool:
    return _RECORDS is not None


def record(tag: str, dtype) -> None:
    if _RECORDS is not None:
        _RECORDS.append((tag, str(dtype)))


def record_array(tag: str, arr) -> None:
    if _RECORDS is not None:
        _RECORDS.append((tag, str(arr.dtype)))


@contextmanager
def arithmetic_audit():
    """Collect (tag, dtype) records from quantized operators while active."""
    global _RECORDS
    prev = _RECORDS
    _RECORDS = []
    try:
        yield _RECORDS
    finally:
        _RECORDS = prev
