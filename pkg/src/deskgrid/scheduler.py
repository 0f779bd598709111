"""Ready-queue ordering: priority first, FCFS within a priority.

Backed by a binary heap keyed on (-priority, seq). ``seq`` is the
monotonically increasing arrival number the manager stamps on each
thread at admission; a requeued thread keeps its original seq, so it
re-enters the line where it originally stood.

Not thread-safe on its own: the owner serializes access.
"""

from __future__ import annotations

import heapq

from deskgrid.errors import DuplicateError
from deskgrid.model import PRIORITY_MIN, check_priority


def decay_priority(priority: int) -> int:
    """Priority carried down one federation level: reduced by one unit."""
    check_priority(priority)
    return max(PRIORITY_MIN, priority - 1)


class ReadyQueue:
    def __init__(self) -> None:
        self._heap: list[tuple[int, int, str]] = []
        self._members: set[str] = set()
        self.enqueued_total = 0
        self.dequeued_total = 0

    def enqueue(self, thread_id: str, priority: int, seq: int) -> None:
        check_priority(priority)
        if thread_id in self._members:
            raise DuplicateError(f"thread {thread_id} already queued")
        heapq.heappush(self._heap, (-priority, seq, thread_id))
        self._members.add(thread_id)
        self.enqueued_total += 1

    def dequeue(self) -> str | None:
        if not self._heap:
            return None
        _, _, thread_id = heapq.heappop(self._heap)
        self._members.discard(thread_id)
        self.dequeued_total += 1
        return thread_id

    def __len__(self) -> int:
        return len(self._heap)

    def __contains__(self, thread_id: str) -> bool:
        return thread_id in self._members
