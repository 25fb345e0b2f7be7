"""Mechanical artifact and state audits.

These implement the invariant checks the correctness metrics are built on:
per accepted request the audit verifies a fresh stage directory, a
well-formed record, the run log, exactly one response whose fields match
the record, and that the instance record's summary fields track the newest
stage record. Validation is over artifacts only — the audit never inspects
runtime internals except the execution-receipt journal exposed for
exactly-once verification.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from ..backends import load_receipts
from ..errors import CorruptStateError
from ..fsutil import read_json
from ..lifecycle import (
    TERMINAL_STATES,
    TerminationReason,
    is_done,
    project_oci,
    reduce_termination,
)
from ..protocol import ResponseStatus, response_from_envelope
from ..statedir import StateDir

#: rc values a stage record may carry without an execution receipt
#: (prepare failures and crash-recovery ambiguity produce no execution).
_NO_EXECUTION_EVIDENCE = "none"


@dataclass
class AuditResult:
    checked: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def flag(self, message: str) -> None:
        self.violations.append(message)

    def to_json(self) -> dict:
        return {"checked": self.checked, "passed": self.passed, "violations": self.violations}


def audit_artifacts(sd: StateDir, *, c_untrusted: int = 252) -> AuditResult:
    """Per-stage artifact completeness and consistency (the IPR checks)."""
    result = AuditResult()
    try:
        session = sd.load_session()
    except Exception as exc:
        result.flag(f"session unreadable: {exc}")
        return result

    records = {}
    for eid in sd.list_eids():
        if not sd.meta_path(eid).exists():
            continue  # an allocated-but-unused identifier is a permitted gap
        try:
            rec = sd.read_stage_record(eid)
        except CorruptStateError as exc:
            result.flag(f"{eid}: meta.json malformed: {exc}")
            continue
        if rec.eid != eid:
            result.flag(f"{eid}: meta.json names {rec.eid}")
        if rec.session_cid != sd.cid:
            result.flag(f"{eid}: bound to foreign instance {rec.session_cid}")
        if rec.request_id in records:
            result.flag(f"{rec.request_id}: multiple stage records")
        records[rec.request_id] = rec

    eids = [r.eid for r in records.values()]
    if len(set(eids)) != len(eids):
        result.flag("stage identifiers are not unique across records")

    for rid in sorted(session.seen_request_ids):
        result.checked += 1
        rec = records.get(rid)
        if rec is None:
            result.flag(f"{rid}: accepted but no stage record")
            continue
        if not sd.run_log_path(rec.eid).exists():
            result.flag(f"{rid}: run.log missing")
        resp_path = sd.response_path(rid)
        if not resp_path.exists():
            result.flag(f"{rid}: no response")
            continue
        try:
            resp = response_from_envelope(read_json(resp_path, "response"))
        except (ValueError, CorruptStateError) as exc:
            result.flag(f"{rid}: response malformed: {exc}")
            continue
        if resp.status is ResponseStatus.REJECTED:
            result.flag(f"{rid}: accepted request carries a rejected response")
            continue
        if resp.rc != rec.rc:
            result.flag(f"{rid}: response rc {resp.rc} != recorded rc {rec.rc}")
        if resp.eid != rec.eid:
            result.flag(f"{rid}: response eid {resp.eid} != recorded {rec.eid}")
        expected_status = ResponseStatus.COMPLETED if rec.status == "completed" else ResponseStatus.FAILED
        if resp.status is not expected_status:
            result.flag(f"{rid}: response status {resp.status.value} != record {rec.status}")
        log_bytes = sd.run_log_path(rec.eid).read_bytes() if sd.run_log_path(rec.eid).exists() else b""
        if resp.output != log_bytes:
            result.flag(f"{rid}: response output diverges from run.log")

    # Responses never outnumber requests, and non-rejected ones need records.
    for resp_path in sd.responses_dir.glob("*.resp"):
        rid = resp_path.stem
        try:
            resp = response_from_envelope(read_json(resp_path, "response"))
        except (ValueError, CorruptStateError) as exc:
            result.flag(f"{rid}: response malformed: {exc}")
            continue
        if resp.status is not ResponseStatus.REJECTED and rid not in records:
            result.flag(f"{rid}: response without a stage record")

    # Exactly-once execution: at most one receipt per accepted request, and
    # a receipt-less record must be an unexecuted (prepare/recovery) failure.
    counts = Counter(r["request_id"] for r in load_receipts(sd.receipts_path))
    for rid, n in counts.items():
        if n != 1:
            result.flag(f"{rid}: {n} backend executions")
        if rid not in session.seen_request_ids:
            result.flag(f"{rid}: executed but never accepted")
    for rid, rec in records.items():
        if counts.get(rid, 0) == 0 and rec.evidence_type != _NO_EXECUTION_EVIDENCE:
            result.flag(f"{rid}: executed record without a receipt")

    summary_violations = _summary_matches_newest(sd, records)
    result.violations.extend(summary_violations)
    return result


def _summary_matches_newest(sd: StateDir, records: dict) -> list[str]:
    out = []
    rec = sd.read_record()
    if rec is None:
        return ["state record absent during audit"]
    if records:
        newest = max(records.values(), key=lambda r: (r.finished_at, r.eid))
        if rec.last_stage != newest.stage or rec.last_rc != newest.rc or rec.last_eid != newest.eid:
            out.append(
                "state summary (%s, %s, %s) != newest record (%s, %s, %s)"
                % (rec.last_stage, rec.last_rc, rec.last_eid, newest.stage, newest.rc, newest.eid)
            )
    elif rec.last_eid is not None:
        out.append("state summary names a stage but no records exist")
    return out


def audit_state_consistency(sd: StateDir, *, c_untrusted: int = 252) -> AuditResult:
    """state.json against independently replayed outcomes (the SCR checks)."""
    result = AuditResult()
    result.checked = 1
    try:
        raw = read_json(sd.state_path, "state.json")
    except Exception as exc:
        result.flag(f"state.json unreadable: {exc}")
        return result
    rec = sd.read_record()
    if rec is None:
        result.flag("record absent")
        return result

    if raw.get("oci_status") != project_oci(rec.state).value:
        result.flag(f"oci_status {raw.get('oci_status')} != projection of {rec.state.value}")
    if rec.ver < 1:
        result.flag("ver below 1")

    if rec.state in TERMINAL_STATES:
        if rec.exit_code is None:
            result.flag("terminal record without exit code")
        events = sd.load_events()
        if events:
            # The terminal outcome froze at some point in the journal; an
            # event observed after that (a stage settling post-kill, say)
            # must not retroactively flag the record, so the replay accepts
            # the reduction of any journal prefix.
            consistent = False
            for k in range(1, len(events) + 1):
                exit_code, dominant = reduce_termination(events[:k], c_untrusted)
                clean = is_done(dominant) or dominant.reason is TerminationReason.KILLED
                expected_state = "stopped" if clean else "failed"
                if rec.exit_code == exit_code and rec.state.value == expected_state:
                    consistent = True
                    break
            if not consistent:
                exit_code, _ = reduce_termination(events, c_untrusted)
                result.flag(
                    f"terminal ({rec.state.value}, {rec.exit_code}) matches no replayed prefix"
                    f" (full reduction gives {exit_code})"
                )
        else:
            result.flag("terminal record without termination events")
    else:
        if rec.exit_code is not None:
            result.flag("non-terminal record carries an exit code")

    records = {r.request_id: r for r in sd.stage_records()}
    result.violations.extend(_summary_matches_newest(sd, records))
    return result
