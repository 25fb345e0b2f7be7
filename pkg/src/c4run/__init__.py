"""c4run: an OCI-compatible runtime for composite confidential workloads.

A managed instance couples a host-side anchor process with on-demand
protected stages executed behind a narrow backend adapter. The package
provides the lifecycle state machine, the durable per-instance state
directory, the authenticated stage request/response protocol, simulated
backends, the serve pipeline, the CLI entrypoints, and a benchmark/audit
harness.
"""

__version__ = "0.1.0"

from .lifecycle import (  # noqa: F401
    CompositeStateRecord,
    LifecycleState,
    OciStatus,
    TerminationEvent,
    project_oci,
    reduce_termination,
    validate_transition,
)
