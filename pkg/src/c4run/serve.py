"""Stage pipeline engine: claim, accept, execute, finalize, recover.

Each request moves through ReqPending -> Claimed -> Prepared -> Executing ->
Completed/Failed. The engine is safe to run as several concurrent serve
instances on one instance directory:

- Claiming is an atomic rename into requests/claimed/, so exactly one
  instance obtains any request file.
- Claim + validate + acceptance-commit happen under the session lock and in
  sequence-number order, so the accepted-seq watermark only ever moves
  forward and concurrent instances cannot reject each other's in-order
  honest requests.
- The acceptance commit (seen sets + watermark in session.json) is durable
  before any execution side effect; a request that crashed before the
  commit can be requeued and revalidated as if never seen.
- A started marker binds request to stage identifier before the backend is
  invoked; meta.json is the durable proof that the outcome was recorded.
  Recovery uses the ladder (response? meta? marker? committed?) to requeue,
  resume, replay the response, or fail a claim as ambiguous — never running
  the backend twice for one accepted request.

Fail-fast policy: a stage that reports a nonzero rc emits a TEE-error
termination event and drives the instance record to Failed. Cancellations
caused by kill are recorded as failed stage records but emit no error event
(the kill event itself represents that outcome). With fail-fast off, stage
failures are recorded in artifacts and summary fields only.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

from .backends import AdapterBase, create_adapter
from .backends.base import CANCELLED_RC, TIMEOUT_RC
from .bundle import CompositeBundle, load_bundle
from .crashpoints import crash_if
from .errors import (
    AbsentRecordError,
    C4Error,
    CorruptStateError,
    ExactlyOnceViolation,
    IllegalStateError,
    PrepareFailed,
    StageNotFound,
)
from .fsutil import remove_if_exists
from .lifecycle import (
    CompositeStateRecord,
    EventSource,
    HealthEvidence,
    LifecycleState,
    ObservabilityEvidence,
    TeeEvidence,
    TeePhase,
    TERMINAL_STATES,
    TerminationEvent,
    TerminationReason,
    TrustEvidence,
    evaluate_observability,
    reduce_termination,
)
from .protocol import (
    RejectReason,
    ResponseStatus,
    SessionState,
    StageRequest,
    build_response,
    commit_acceptance,
    response_to_envelope,
    request_from_envelope,
    validate_request,
)
from .statedir import StageRecord, StateDir

logger = logging.getLogger(__name__)

PREPARE_FAILED_RC = 126
STAGE_NOT_FOUND_RC = 127
RECOVERY_AMBIGUOUS_RC = 125


class StagePipelineState(str, Enum):
    REQ_PENDING = "req_pending"
    CLAIMED = "claimed"
    PREPARED = "prepared"
    EXECUTING = "executing"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class WorkItem:
    """An accepted request bound to a fresh stage identifier."""

    req: StageRequest
    eid: str
    claimed_path: Path
    claimed_at: float


@dataclass
class PipelineResult:
    request_id: str
    terminal: StagePipelineState
    stage: str = ""
    eid: Optional[str] = None
    rc: Optional[int] = None
    reject_reason: Optional[str] = None
    elapsed_s: float = 0.0


@dataclass
class ServeSummary:
    completed: int = 0
    failed: int = 0
    rejected: int = 0
    stop_reason: str = ""
    elapsed_s: float = 0.0
    stages: list[dict] = field(default_factory=list)

    def record(self, result: PipelineResult) -> None:
        if result.terminal is StagePipelineState.COMPLETED:
            self.completed += 1
        elif result.reject_reason is not None:
            self.rejected += 1
        else:
            self.failed += 1
        self.stages.append(
            {
                "request_id": result.request_id,
                "stage": result.stage,
                "eid": result.eid,
                "rc": result.rc,
                "terminal": result.terminal.value,
                "reject_reason": result.reject_reason,
                "elapsed_s": round(result.elapsed_s, 6),
            }
        )

    def to_json(self) -> dict:
        return {
            "completed": self.completed,
            "failed": self.failed,
            "rejected": self.rejected,
            "stop_reason": self.stop_reason,
            "elapsed_s": round(self.elapsed_s, 6),
            "stages": self.stages,
        }


def claim_next(sd: StateDir) -> Optional[Path]:
    """Claim the lowest-ordered pending request; None when the spool is empty.

    Rename atomicity guarantees a single winner per request under any number
    of concurrent claimers.
    """
    for pending in sd.pending_requests():
        claimed = sd.claim_request(pending)
        if claimed is not None:
            return claimed
    return None


class ServeLoop:
    """One serve instance bound to one composite instance."""

    def __init__(
        self,
        sd: StateDir,
        *,
        bundle: Optional[CompositeBundle] = None,
        adapter: Optional[AdapterBase] = None,
        fail_fast: bool = True,
        poll_interval: float = 0.05,
        workers: int = 4,
        idle_polls: int = 3,
        stop_check: Optional[Callable[[], bool]] = None,
    ) -> None:
        self.sd = sd
        self.bundle = bundle or load_bundle(sd.bundle_dir)
        self.adapter = adapter or create_adapter(
            self.bundle.c4.backend_id,
            self.bundle.c4.stage_table,
            rootfs=sd.rootfs_dir,
            work_root=sd.enclaves_dir,
            receipts_path=sd.receipts_path,
        )
        self.fail_fast = fail_fast
        self.poll_interval = poll_interval
        self.workers = max(1, workers)
        self.idle_polls = idle_polls
        self.stop_check = stop_check or (lambda: False)
        self._terminal_cache: tuple[float, bool] = (0.0, False)

    # -- cancellation -------------------------------------------------------

    def _instance_terminal(self) -> bool:
        now = time.monotonic()
        cached_at, value = self._terminal_cache
        if value or now - cached_at < 0.1:
            return value
        try:
            rec = self.sd.read_record()
        except CorruptStateError:
            return True
        value = rec is None or rec.state in TERMINAL_STATES
        self._terminal_cache = (now, value)
        return value

    def _cancel_requested(self) -> bool:
        return self.sd.kill_marker_path.exists() or self.stop_check() or self._instance_terminal()

    # -- claim + accept (dispatcher side, sequential under the session lock) --

    def claim_and_accept(self) -> Optional[WorkItem]:
        """Claim one request and run the Accept predicate against it.

        Returns a WorkItem for an accepted request. A rejection is finalized
        inline (rejected response written, no stage identifier allocated)
        and, like an empty spool, yields None.
        """
        item, _ = self._claim_and_accept_detail()
        return item

    def _claim_and_accept_detail(self) -> tuple[Optional[WorkItem], Optional[PipelineResult]]:
        with self.sd.session_lock():
            claimed = claim_next(self.sd)
            if claimed is None:
                return None, None
            claimed_at = time.time()
            request_id = claimed.stem
            try:
                envelope = _read_envelope(claimed)
                req = request_from_envelope(envelope)
            except (ValueError, CorruptStateError) as exc:
                logger.warning("%s: malformed request %s: %s", self.sd.cid, request_id, exc)
                return None, self._finalize_rejected(
                    claimed, request_id, RejectReason.AUTH_MAC_INVALID, claimed_at
                )
            session = self.sd.load_session()
            reason = validate_request(req, session, self.sd.cid)
            if reason is not None:
                return None, self._finalize_rejected(claimed, req.request_id, reason, claimed_at, req)
            commit_acceptance(session, req)
            crash_if("accept:pre-commit")
            self.sd.save_session(session)
            crash_if("accept:post-commit")
        eid = self.sd.allocate_eid()
        self.sd.write_started_marker(req.request_id, eid, req.stage)
        crash_if("execute:post-marker")
        self._mark_phase_active()
        return WorkItem(req=req, eid=eid, claimed_path=claimed, claimed_at=claimed_at), None

    def _finalize_rejected(
        self,
        claimed: Path,
        request_id: str,
        reason: RejectReason,
        claimed_at: float,
        req: Optional[StageRequest] = None,
    ) -> PipelineResult:
        """Rejected requests never reach protected execution; they get an
        authenticated negative response so an honest anchor can tell
        rejection from a host drop."""
        session = self.sd.load_session()
        resp = build_response(
            session,
            request_id,
            rc=1,
            status=ResponseStatus.REJECTED,
            reject_reason=reason,
        )
        if not self.sd.has_response(request_id):
            try:
                self.sd.spool_response(request_id, response_to_envelope(resp))
            except ExactlyOnceViolation:
                pass  # a replayed request already has its rejection on disk
        remove_if_exists(claimed)
        logger.info("%s: rejected %s (%s)", self.sd.cid, request_id, reason.value)
        return PipelineResult(
            request_id=request_id,
            terminal=StagePipelineState.FAILED,
            stage=req.stage if req else "",
            reject_reason=reason.value,
            elapsed_s=time.time() - claimed_at,
        )

    # -- execute + finalize (worker side) ------------------------------------

    def execute_accepted(self, item: WorkItem) -> PipelineResult:
        req, eid = item.req, item.eid
        timings = {"claimed_at": item.claimed_at}
        cancelled = False
        try:
            crash_if("execute:pre-prepare")
            handle = self.adapter.prepare(self.sd.cid, eid, req.stage)
        except (StageNotFound, PrepareFailed, C4Error) as exc:
            rc = STAGE_NOT_FOUND_RC if isinstance(exc, StageNotFound) else PREPARE_FAILED_RC
            logger.warning("%s: prepare failed for %s: %s", self.sd.cid, req.request_id, exc)
            return self._finalize_outcome(
                item,
                rc=rc,
                stdout=b"",
                evidence=None,
                timings=timings,
                failure_reason=f"prepare:{exc}",
                cancelled=False,
            )
        timings["prepared_at"] = time.time()
        try:
            timings["executing_at"] = time.time()
            crash_if("execute:pre-backend")
            outcome = self.adapter.execute(handle, req, cancel_check=self._cancel_requested)
            cancelled = outcome.rc == CANCELLED_RC and self._cancel_requested()
        finally:
            self.adapter.destroy(handle)
        return self._finalize_outcome(
            item,
            rc=outcome.rc,
            stdout=outcome.stdout,
            evidence=outcome.evidence,
            timings=timings,
            failure_reason="cancelled" if cancelled else ("timeout" if outcome.rc == TIMEOUT_RC else None),
            cancelled=cancelled,
        )

    def _finalize_outcome(
        self,
        item: WorkItem,
        *,
        rc: int,
        stdout: bytes,
        evidence,
        timings: dict,
        failure_reason: Optional[str],
        cancelled: bool,
    ) -> PipelineResult:
        req, eid = item.req, item.eid
        timings["finished_at"] = time.time()
        status = "completed" if rc == 0 else "failed"
        record = StageRecord(
            eid=eid,
            stage=req.stage,
            request_id=req.request_id,
            backend=self.adapter.backend_id,
            tee_type=evidence.tee_type if evidence else self.adapter.tee_type,
            rc=rc,
            status=status,
            started_at=timings.get("executing_at", timings["claimed_at"]),
            finished_at=timings["finished_at"],
            evidence_type=evidence.evidence_type if evidence else "none",
            measurement_hash=evidence.measurement_hash if evidence else "",
            session_cid=self.sd.cid,
            session_epoch=req.epoch,
            session_seq=req.seq,
            failure_reason=failure_reason,
            timings=timings,
            evidence_extra=dict(evidence.extra) if evidence else None,
        )
        crash_if("finalize:pre-meta")
        self.sd.write_stage_record(eid, record, stdout)
        crash_if("finalize:post-meta")
        self._update_summary_fields(record, executed=evidence is not None)
        crash_if("finalize:post-state")
        self._write_stage_response(req.request_id, record, stdout)
        self._cleanup_claim(req.request_id, item.claimed_path)
        if rc != 0 and not cancelled and self.fail_fast:
            self._fail_fast(eid, rc)
        return PipelineResult(
            request_id=req.request_id,
            terminal=StagePipelineState.COMPLETED if rc == 0 else StagePipelineState.FAILED,
            stage=req.stage,
            eid=eid,
            rc=rc,
            elapsed_s=timings["finished_at"] - item.claimed_at,
        )

    def _write_stage_response(self, request_id: str, record: StageRecord, output: bytes) -> None:
        session = self.sd.load_session()
        resp = build_response(
            session,
            request_id,
            rc=record.rc,
            status=ResponseStatus.COMPLETED if record.status == "completed" else ResponseStatus.FAILED,
            eid=record.eid,
            output=output,
        )
        self.sd.spool_response(request_id, response_to_envelope(resp))

    def _cleanup_claim(self, request_id: str, claimed_path: Path) -> None:
        remove_if_exists(self.sd.started_marker_path(request_id))
        remove_if_exists(claimed_path)

    # -- record bookkeeping ---------------------------------------------------

    def _mark_phase_active(self) -> None:
        def mutate(rec: CompositeStateRecord) -> CompositeStateRecord:
            if rec.state in TERMINAL_STATES:
                return rec
            return rec.with_state(rec.state, tee_phase=_phase_for(rec.last_rc, in_flight=True))
        self._mutate_if_live(mutate)

    def _update_summary_fields(self, record: StageRecord, *, executed: bool) -> None:
        def mutate(rec: CompositeStateRecord) -> CompositeStateRecord:
            # Concurrent finalizers race here; the summary must track the
            # NEWEST stage record (by finish time, then identifier), not the
            # last writer. The phase is always refreshed: it reflects what
            # is in flight right now, not which stage won the summary.
            newest = record
            if rec.last_eid is not None and rec.last_eid != record.eid:
                try:
                    incumbent = self.sd.read_stage_record(rec.last_eid)
                except (FileNotFoundError, CorruptStateError):
                    incumbent = None
                if incumbent is not None and (incumbent.finished_at, incumbent.eid) > (
                    record.finished_at,
                    record.eid,
                ):
                    newest = incumbent
            in_flight = self.sd.in_flight_count() > 0
            changes: dict = {
                "last_stage": newest.stage,
                "last_rc": newest.rc,
                "last_eid": newest.eid,
                "tee_phase": _phase_for(newest.rc, in_flight=in_flight),
            }
            if executed and newest is record:
                trust, health, _ = evaluate_observability(
                    ObservabilityEvidence(
                        trust=TrustEvidence(e_att=True, e_meas=record.measurement_hash, e_bind=True),
                        health=HealthEvidence(
                            e_dep=True, e_res=True, e_perf=record.rc != TIMEOUT_RC
                        ),
                        tee=TeeEvidence(e_call=1 if in_flight else 0, e_exit=record.rc),
                    )
                )
                changes["trust_flag"] = trust
                changes["health_flag"] = health
            return rec.with_state(rec.state, **changes)

        self._mutate_if_live(mutate)

    def _mutate_if_live(self, mutate) -> None:
        self.sd.update_record_rmw(mutate)

    def _fail_fast(self, eid: str, rc: int) -> None:
        """A genuine stage error drives the instance record to Failed."""
        self.sd.append_event(
            TerminationEvent(
                src=EventSource.TEE,
                code=rc,
                reason=TerminationReason.ERROR,
                observed_at=time.time(),
                origin=f"stage:{eid}",
            )
        )
        exit_code, _ = reduce_termination(self.sd.load_events(), self.bundle.c4.c_untrusted)

        def mutate(cur: CompositeStateRecord) -> CompositeStateRecord:
            if cur.state in TERMINAL_STATES:
                return cur
            return cur.with_state(LifecycleState.FAILED, exit_code=exit_code)

        self.sd.update_record_rmw(mutate)

    # -- one-shot and loop ----------------------------------------------------

    def process_next(self) -> Optional[PipelineResult]:
        """Claim and fully process a single request; None when spool is empty."""
        item, rejected = self._claim_and_accept_detail()
        if rejected is not None:
            return rejected
        if item is None:
            return None
        return self.execute_accepted(item)

    def run(self, mode: str = "until-idle") -> ServeSummary:
        """Serve until the mode's exit condition; returns the summary.

        Modes: "until-idle" (spool stayed empty for idle_polls scans),
        "until-done" (anchor exited and everything drained), "forever"
        (until stop signal or the instance goes terminal).
        """
        if mode not in ("until-idle", "until-done", "forever"):
            raise IllegalStateError(f"unknown serve mode {mode!r}")
        rec = self.sd.read_record()
        if rec is None:
            raise AbsentRecordError(f"{self.sd.cid}: not found")
        summary = ServeSummary()
        started = time.monotonic()
        if rec.state in TERMINAL_STATES:
            logger.warning("%s: instance already terminal; nothing to serve", self.sd.cid)
            summary.stop_reason = "terminal"
            return summary
        if rec.state is not LifecycleState.RUNNING:
            raise IllegalStateError(f"{self.sd.cid}: serve requires a running instance")

        idle_streak = 0
        with self.sd.serve_lock(exclusive=False):
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                futures: set[Future] = set()
                stop_reason = ""
                while True:
                    if self.stop_check():
                        stop_reason = "signal"
                        break
                    if self._instance_terminal():
                        stop_reason = "terminal"
                        break
                    if self.sd.kill_marker_path.exists():
                        stop_reason = "killed"
                        break

                    dispatched = False
                    while len(futures) < self.workers:
                        item, rejected = self._claim_and_accept_detail()
                        if rejected is not None:
                            summary.record(rejected)
                            dispatched = True
                            continue
                        if item is None:
                            break
                        futures.add(pool.submit(self.execute_accepted, item))
                        dispatched = True

                    if futures:
                        done, futures = wait(futures, timeout=self.poll_interval, return_when=FIRST_COMPLETED)
                        for fut in done:
                            summary.record(fut.result())
                    if dispatched or futures:
                        idle_streak = 0
                        continue

                    idle_streak += 1
                    if mode == "until-idle" and idle_streak >= self.idle_polls:
                        stop_reason = "idle"
                        break
                    if mode == "until-done" and self.sd.read_anchor_exit() is not None:
                        stop_reason = "done"
                        break
                    time.sleep(self.poll_interval)

                for fut in futures:
                    summary.record(fut.result())
        summary.stop_reason = stop_reason
        summary.elapsed_s = time.monotonic() - started
        return summary

    # -- crash recovery ---------------------------------------------------------

    def recover(self) -> list[dict]:
        """Reconcile the claimed directory after a crash.

        Requires that no live serve instance holds the serve lock. For each
        claimed request, exactly one of:

        - response exists               -> clean up claim bookkeeping
        - stage record exists           -> replay the response from it
        - started marker, no record     -> ambiguous execution: fail safely
        - accepted (committed), no eid  -> resume the pipeline (runs once)
        - never accepted                -> requeue for fresh validation
        """
        actions: list[dict] = []
        try:
            lock_ctx = self.sd.serve_lock(exclusive=True, blocking=False)
            lock_ctx.__enter__()
        except BlockingIOError:
            raise IllegalStateError(f"{self.sd.cid}: serve instances are active; cannot recover")
        try:
            session = self.sd.load_session()
            for claimed in self.sd.claimed_requests():
                request_id = claimed.stem
                action = self._recover_one(claimed, request_id, session)
                actions.append({"request_id": request_id, "action": action})
            for marker in self.sd.started_markers():
                # A marker without its claimed file means the crash hit the
                # cleanup step itself; the response exists, so just finish.
                if not self.sd.claimed_path(marker["request_id"]).exists():
                    remove_if_exists(self.sd.started_marker_path(marker["request_id"]))
        finally:
            lock_ctx.__exit__(None, None, None)
        return actions

    def _recover_one(self, claimed: Path, request_id: str, session: SessionState) -> str:
        if self.sd.has_response(request_id):
            self._cleanup_claim(request_id, claimed)
            return "cleaned"

        marker = self.sd.read_started_marker(request_id)
        record = None
        if marker is not None and self.sd.meta_path(marker["eid"]).exists():
            record = self.sd.read_stage_record(marker["eid"])
        if record is None:
            record = self.sd.find_stage_record(request_id)

        if record is not None:
            # Executed and recorded; regenerate the byte-identical response.
            output = self.sd.run_log_path(record.eid).read_bytes()
            self._update_summary_fields(record, executed=record.evidence_type != "none")
            self._write_stage_response(request_id, record, output)
            self._cleanup_claim(request_id, claimed)
            if record.rc != 0 and record.failure_reason != "cancelled" and self.fail_fast:
                self._fail_fast(record.eid, record.rc)
            return "response_replayed"

        if marker is not None:
            # Execution may or may not have started; never run it again.
            now = time.time()
            record = StageRecord(
                eid=marker["eid"],
                stage=marker.get("stage", ""),
                request_id=request_id,
                backend=self.adapter.backend_id,
                tee_type=self.adapter.tee_type,
                rc=RECOVERY_AMBIGUOUS_RC,
                status="failed",
                started_at=marker.get("ts", now),
                finished_at=now,
                evidence_type="none",
                measurement_hash="",
                session_cid=self.sd.cid,
                session_epoch=session.epoch,
                session_seq=0,
                failure_reason="recovery_ambiguous",
                timings={"claimed_at": marker.get("ts", now), "finished_at": now},
            )
            logger.warning("%s: ambiguous crashed stage for %s; failing it", self.sd.cid, request_id)
            self.sd.write_stage_record(marker["eid"], record, b"")
            self._update_summary_fields(record, executed=False)
            self._write_stage_response(request_id, record, b"")
            self._cleanup_claim(request_id, claimed)
            if self.fail_fast:
                self._fail_fast(marker["eid"], RECOVERY_AMBIGUOUS_RC)
            return "failed_ambiguous"

        if request_id in session.seen_request_ids:
            # Accepted and committed but never bound to a stage identifier;
            # requeueing would self-reject as a replay, so resume instead.
            try:
                req = request_from_envelope(_read_envelope(claimed))
            except (ValueError, CorruptStateError):
                remove_if_exists(claimed)
                return "dropped_malformed"
            eid = self.sd.allocate_eid()
            self.sd.write_started_marker(request_id, eid, req.stage)
            result = self.execute_accepted(
                WorkItem(req=req, eid=eid, claimed_path=claimed, claimed_at=time.time())
            )
            return f"resumed_{result.terminal.value}"

        self.sd.requeue_claimed(claimed)
        return "requeued"


def _read_envelope(path: Path) -> dict:
    from .fsutil import read_json

    return read_json(path, "request envelope")


def _phase_for(last_rc: Optional[int], *, in_flight: bool) -> TeePhase:
    """Persisted phase: active while any stage is in flight, error when the
    newest terminal stage failed, idle otherwise."""
    if in_flight:
        return TeePhase.ACTIVE
    if last_rc is not None and last_rc != 0:
        return TeePhase.ERROR
    return TeePhase.IDLE
