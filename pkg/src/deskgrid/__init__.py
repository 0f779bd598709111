"""deskgrid: desktop-grid middleware.

A manager daemon schedules grid threads (priority first, FCFS within a
priority) over dedicated and voluntary executors, managers federate into
hierarchies by registering with a parent as if they were executors, a
cross-platform HTTP gateway translates process-style jobs into threads,
and a broker expands parametric plan files into job sweeps across one or
more gateways.
"""

from deskgrid import taskkit as _taskkit  # noqa: F401  (registers payload message kinds)
from deskgrid import wire as _wire  # noqa: F401  (registers protocol message kinds)

__version__ = "0.1.0"
