"""Benchmark and audit harness: correctness metrics, concurrency, adversary
and crash campaigns, with machine-readable reports."""

from .audit import AuditResult, audit_artifacts, audit_state_consistency  # noqa: F401
from .campaigns import (  # noqa: F401
    run_adversary_campaign,
    run_concurrency_campaign,
    run_crash_campaign,
    run_lifecycle_campaign,
    run_lifecycle_round,
)
