"""Adapter surface shared by every protected-execution backend.

The pipeline engine talks to backends only through prepare/execute/destroy
and the outcome type below; nothing backend-specific leaks upward. Every
execute call is journaled to an append-only receipts file before any work
happens, which is the instrumentation the exactly-once audits count.
"""

from __future__ import annotations

import fcntl
import os
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from ..errors import BackendHandleInvalid
from ..fsutil import json_canonical
from ..protocol import StageRequest

CancelCheck = Callable[[], bool]

#: rc reported when a stage exceeded its execution timeout.
TIMEOUT_RC = 124
#: rc reported when a stage was cancelled (instance killed mid-flight).
CANCELLED_RC = 130


@dataclass(frozen=True)
class BackendHandle:
    """Opaque prepared execution context, valid from prepare until destroy."""

    token: str
    cid: str
    eid: str
    stage: str
    backend_id: str
    created_at: float


@dataclass(frozen=True)
class StageEvidence:
    tee_type: str
    evidence_type: str
    measurement_hash: str
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StageOutcome:
    rc: int
    stdout: bytes
    evidence: StageEvidence


class AdapterBase:
    """Handle bookkeeping and receipt instrumentation common to adapters.

    Subclasses implement `_prepare_context`, `_execute`, and
    `_destroy_context`; handle-validity errors and receipts are handled
    here so every backend behaves identically at the interface.
    """

    backend_id = "base"
    tee_type = "base"
    evidence_type = "base"

    def __init__(self, stage_table: dict, *, receipts_path: Optional[Path] = None) -> None:
        self.stage_table = dict(stage_table)
        self.receipts_path = receipts_path
        self._live: dict[str, object] = {}

    # -- interface ----------------------------------------------------------

    def prepare(self, cid: str, eid: str, stage: str) -> BackendHandle:
        context = self._prepare_context(cid, eid, stage)
        handle = BackendHandle(
            token=uuid.uuid4().hex,
            cid=cid,
            eid=eid,
            stage=stage,
            backend_id=self.backend_id,
            created_at=time.time(),
        )
        self._live[handle.token] = context
        return handle

    def execute(
        self,
        handle: BackendHandle,
        request: StageRequest,
        *,
        cancel_check: Optional[CancelCheck] = None,
    ) -> StageOutcome:
        try:
            context = self._live[handle.token]
        except KeyError:
            raise BackendHandleInvalid(f"handle for {handle.eid} is not live") from None
        self._write_receipt(handle, request)
        outcome = self._execute(handle, context, request, cancel_check or (lambda: False))
        extra = dict(outcome.evidence.extra)
        extra.setdefault("cid", handle.cid)
        extra.setdefault("eid", handle.eid)
        evidence = StageEvidence(
            tee_type=outcome.evidence.tee_type,
            evidence_type=outcome.evidence.evidence_type,
            measurement_hash=outcome.evidence.measurement_hash,
            extra=extra,
        )
        return StageOutcome(rc=outcome.rc, stdout=outcome.stdout, evidence=evidence)

    def destroy(self, handle: BackendHandle) -> None:
        """Release the context; destroying twice (or never executing) is fine."""
        context = self._live.pop(handle.token, None)
        if context is not None:
            try:
                self._destroy_context(context)
            except Exception:  # cleanup failures are logged by subclasses, never raised
                pass

    # -- instrumentation ------------------------------------------------------

    def _write_receipt(self, handle: BackendHandle, request: StageRequest) -> None:
        if self.receipts_path is None:
            return
        line = json_canonical(
            {
                "request_id": request.request_id,
                "eid": handle.eid,
                "stage": handle.stage,
                "backend": self.backend_id,
                "ts": time.time(),
            }
        )
        fd = os.open(self.receipts_path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX)
            os.write(fd, (line + "\n").encode())
            os.fsync(fd)
        finally:
            os.close(fd)

    # -- subclass hooks --------------------------------------------------------

    def _prepare_context(self, cid: str, eid: str, stage: str):
        raise NotImplementedError

    def _execute(self, handle: BackendHandle, context, request: StageRequest, cancel_check: CancelCheck) -> StageOutcome:
        raise NotImplementedError

    def _destroy_context(self, context) -> None:
        raise NotImplementedError


def load_receipts(receipts_path: Path) -> list[dict]:
    """Parse the execution receipts journal (for audits and tests)."""
    import json

    try:
        text = receipts_path.read_text()
    except FileNotFoundError:
        return []
    return [json.loads(line) for line in text.splitlines() if line.strip()]
