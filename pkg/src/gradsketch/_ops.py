"""Multiply-add accounting for the compression kernels.

Kernels call :func:`record` with the number of scalar multiply-adds they
perform. Counting is off unless a :func:`count_ops` block is active, so the
hot paths pay one context-variable lookup per call.
"""

from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Iterator, Optional

_active: ContextVar[Optional[Counter]] = ContextVar("gradsketch_op_counter", default=None)


def record(stage: str, n: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter[stage] += int(n)


@contextmanager
def count_ops() -> Iterator[Counter]:
    """Collect per-stage op counts for everything run inside the block.

    Nested blocks see only their own work; on exit their counts are added
    to the enclosing block.

    >>> with count_ops() as ops:
    ...     record("demo", 3)
    >>> ops.total()
    3
    """
    counter: Counter = Counter()
    parent = _active.get()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)
        if parent is not None:
            parent.update(counter)
