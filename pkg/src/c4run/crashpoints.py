"""Crash-point injection hooks for durability testing.

Write paths call :func:`crash_if` at named points. Normally these are
no-ops; the crash harness arms a point (in-process via :func:`armed`, or
for child processes via the ``C4_CRASH_POINT`` environment variable) and
the next time execution reaches it an :class:`InjectedCrash` is raised.

InjectedCrash derives from BaseException so no ``except Exception`` handler
on the write path can accidentally swallow it; combined with ``with``-scoped
file locks, an injected crash leaves exactly the on-disk state a killed
process would have left.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

ENV_VAR = "C4_CRASH_POINT"

_armed: set[str] = set()


class InjectedCrash(BaseException):
    """Raised when execution reaches an armed crash point."""

    def __init__(self, point: str) -> None:
        super().__init__(f"injected crash at {point!r}")
        self.point = point


def crash_if(point: str) -> None:
    if point in _armed or os.environ.get(ENV_VAR) == point:
        raise InjectedCrash(point)


@contextmanager
def armed(point: str):
    """Arm one crash point for the duration of the context."""
    _armed.add(point)
    try:
        yield
    finally:
        _armed.discard(point)
