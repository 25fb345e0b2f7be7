import threading
import time

import pytest

from c4run.backends import load_receipts
from c4run.fsutil import read_json
from c4run.errors import IllegalStateError
from c4run.lifecycle import LifecycleState as L, TeePhase
from c4run.protocol import (
    ResponseStatus,
    build_request,
    request_to_envelope,
    response_from_envelope,
    verify_response,
)
from c4run.serve import ServeLoop, StagePipelineState, claim_next
from c4run.statedir import StateDir


def _spool(sd: StateDir, stage="hello", payload=b"p", n=1):
    """Build and spool n requests the way the anchor would."""
    session = sd.load_session()
    reqs = []
    for _ in range(n):
        req = build_request(session, stage, payload)
        sd.spool_request(request_to_envelope(req), req.request_id)
        reqs.append(req)
    return reqs


def _response(sd: StateDir, rid):
    return response_from_envelope(read_json(sd.response_path(rid), "response"))


def test_single_request_full_pipeline(running_instance):
    sd = running_instance
    (req,) = _spool(sd)
    loop = ServeLoop(sd, workers=1)
    result = loop.process_next()
    assert result.terminal is StagePipelineState.COMPLETED
    assert result.eid == "eid-0001"

    record = sd.read_stage_record("eid-0001")
    assert record.request_id == req.request_id
    assert record.rc == 0 and record.status == "completed"
    assert record.session_epoch == req.epoch and record.session_seq == req.seq
    assert sd.run_log_path("eid-0001").read_bytes() == b"hello from eid-0001\n"

    resp = _response(sd, req.request_id)
    session = sd.load_session()
    assert verify_response(resp, session, {req.request_id})
    assert resp.status is ResponseStatus.COMPLETED and resp.eid == "eid-0001"

    rec = sd.read_record()
    assert rec.last_stage == "hello" and rec.last_rc == 0 and rec.last_eid == "eid-0001"
    assert rec.tee_phase is TeePhase.IDLE
    assert req.request_id in session.seen_request_ids
    assert sd.claimed_requests() == [] and sd.started_markers() == []

    # meta/log precede the response and the pipeline timestamps are ordered
    t = record.timings
    assert t["claimed_at"] <= t["prepared_at"] <= t["executing_at"] <= t["finished_at"]


def test_replayed_request_rejected_without_new_eid(running_instance):
    sd = running_instance
    (req,) = _spool(sd)
    envelope = request_to_envelope(req)
    loop = ServeLoop(sd, workers=1)
    assert loop.process_next().terminal is StagePipelineState.COMPLETED
    original = sd.response_path(req.request_id).read_bytes()
    counter = sd.eid_counter()

    sd.spool_request(envelope, req.request_id)  # adversarial replay
    result = loop.process_next()
    assert result.reject_reason == "fresh_replayed_id"
    assert sd.eid_counter() == counter  # no stage identifier allocated
    assert sd.response_path(req.request_id).read_bytes() == original
    receipts = load_receipts(sd.receipts_path)
    assert len([r for r in receipts if r["request_id"] == req.request_id]) == 1


def test_rejected_request_gets_authenticated_negative_response(running_instance):
    sd = running_instance
    session = sd.load_session()
    req = build_request(session, "hello", b"p")
    env = request_to_envelope(req)
    env["cid"] = "someone-else"  # misroute; MAC now stale too, bind fires first
    sd.spool_request(env, req.request_id)
    loop = ServeLoop(sd, workers=1)
    result = loop.process_next()
    assert result.terminal is StagePipelineState.FAILED
    assert result.reject_reason == "bind_cid_mismatch"
    resp = _response(sd, req.request_id)
    assert resp.status is ResponseStatus.REJECTED and resp.eid is None
    assert verify_response(resp, sd.load_session(), {req.request_id})
    # the session is untouched by a rejected request
    assert req.request_id not in sd.load_session().seen_request_ids


def test_claim_next_empty_and_exactly_once(running_instance):
    sd = running_instance
    assert claim_next(sd) is None
    _spool(sd, n=1)
    winners = []
    barrier = threading.Barrier(4)

    def claimer():
        own = StateDir(sd.path.parent, sd.cid)
        barrier.wait()
        if claim_next(own) is not None:
            winners.append(1)

    threads = [threading.Thread(target=claimer) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(winners) == 1


def test_hundred_requests_four_serve_instances_disjoint(running_instance):
    sd = running_instance
    reqs = _spool(sd, n=100)
    summaries = []
    lock = threading.Lock()

    def serve():
        own = StateDir(sd.path.parent, sd.cid)
        loop = ServeLoop(own, workers=2)
        summary = loop.run(mode="until-idle")
        with lock:
            summaries.append(summary)

    threads = [threading.Thread(target=serve) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    assert sum(s.completed for s in summaries) == 100
    assert sum(s.rejected for s in summaries) == 0
    processed = [st["request_id"] for s in summaries for st in s.stages]
    assert len(processed) == 100 and len(set(processed)) == 100  # pairwise disjoint
    assert set(processed) == {r.request_id for r in reqs}

    from collections import Counter

    counts = Counter(r["request_id"] for r in load_receipts(sd.receipts_path))
    assert all(n == 1 for n in counts.values()) and len(counts) == 100

    session = sd.load_session()
    accepted_seqs = sorted(int(rid.split("-")[1]) for rid in session.seen_request_ids)
    assert accepted_seqs == list(range(100))  # strictly increasing acceptance


def test_fail_stage_drives_instance_failed_under_fail_fast(running_instance):
    sd = running_instance
    (req,) = _spool(sd, stage="fail")
    loop = ServeLoop(sd, workers=1, fail_fast=True)
    result = loop.process_next()
    assert result.terminal is StagePipelineState.FAILED and result.rc == 7
    rec = sd.read_record()
    assert rec.state is L.FAILED and rec.exit_code == 7
    assert rec.tee_phase is TeePhase.ERROR
    resp = _response(sd, req.request_id)
    assert resp.status is ResponseStatus.FAILED and resp.rc == 7


def test_fail_stage_without_fail_fast_keeps_running(running_instance):
    sd = running_instance
    _spool(sd, stage="fail")
    loop = ServeLoop(sd, workers=1, fail_fast=False)
    result = loop.process_next()
    assert result.rc == 7
    rec = sd.read_record()
    assert rec.state is L.RUNNING
    assert rec.last_rc == 7 and rec.tee_phase is TeePhase.ERROR
    assert sd.load_events() == []


def test_unknown_stage_fails_without_execution(running_instance):
    sd = running_instance
    (req,) = _spool(sd, stage="unregistered")
    loop = ServeLoop(sd, workers=1, fail_fast=False)
    result = loop.process_next()
    assert result.terminal is StagePipelineState.FAILED and result.rc == 127
    record = sd.find_stage_record(req.request_id)
    assert record.status == "failed" and record.evidence_type == "none"
    assert load_receipts(sd.receipts_path) == []


def test_stale_seq_rejected_after_later_accept(running_instance):
    sd = running_instance
    session = sd.load_session()
    early = build_request(session, "hello", b"p")
    late = build_request(session, "hello", b"p")
    loop = ServeLoop(sd, workers=1)
    sd.spool_request(request_to_envelope(late), late.request_id)
    assert loop.process_next().terminal is StagePipelineState.COMPLETED
    sd.spool_request(request_to_envelope(early), early.request_id)
    result = loop.process_next()
    assert result.reject_reason == "order_stale_seq"


def test_serve_run_modes_and_preconditions(root, sim_bundle, running_instance):
    sd = running_instance
    _spool(sd, n=4)
    summary = ServeLoop(sd, workers=4).run(mode="until-idle")
    assert summary.completed == 4 and summary.failed == 0 and summary.rejected == 0
    assert summary.stop_reason == "idle"
    assert len(summary.stages) == 4
    assert summary.elapsed_s > 0

    from c4run import runtime

    runtime.cmd_create(root, "unstarted", sim_bundle)
    with pytest.raises(IllegalStateError):
        ServeLoop(StateDir(root, "unstarted"), workers=1).run(mode="until-idle")
    with pytest.raises(IllegalStateError):
        ServeLoop(sd, workers=1).run(mode="sideways")
    runtime.cmd_delete(root, "unstarted", force=True)


def test_serve_on_terminal_instance_warns_and_exits(root, sim_bundle):
    from c4run import runtime

    runtime.cmd_create(root, "t-term", sim_bundle)
    runtime.cmd_kill(root, "t-term")  # Prepared -> Stopped
    summary = ServeLoop(StateDir(root, "t-term"), workers=1).run(mode="until-idle")
    assert summary.stop_reason == "terminal"
    assert summary.completed == summary.failed == summary.rejected == 0
    runtime.cmd_delete(root, "t-term")


def test_kill_marker_cancels_in_flight_stage(running_instance):
    sd = running_instance
    session = sd.load_session()
    req = build_request(session, "sleep", b"p")  # 50 ms default in the table
    # lengthen the sleep so the cancel lands mid-flight
    loop = ServeLoop(sd, workers=1)
    loop.adapter.stage_table["sleep"]["ms"] = 2000
    sd.spool_request(request_to_envelope(req), req.request_id)

    done = {}

    def run():
        done["result"] = loop.process_next()

    t = threading.Thread(target=run)
    t.start()
    time.sleep(0.3)
    from c4run.fsutil import atomic_write_json

    atomic_write_json(sd.kill_marker_path, {"signal": 15, "ts": time.time()})
    t.join(timeout=10)
    assert done["result"].terminal is StagePipelineState.FAILED
    record = sd.find_stage_record(req.request_id)
    assert record.failure_reason == "cancelled"
    assert record.status == "failed"
    assert sd.has_response(req.request_id)
    # a cancellation is the kill's effect, not a stage error event
    assert all(e.origin != f"stage:{record.eid}" for e in sd.load_events())


def test_tee_phase_active_while_stage_in_flight(running_instance):
    sd = running_instance
    loop = ServeLoop(sd, workers=1)
    loop.adapter.stage_table["sleep"]["ms"] = 600
    _spool(sd, stage="sleep")
    t = threading.Thread(target=loop.process_next)
    t.start()
    phases = set()
    for _ in range(50):
        phases.add(sd.read_record().tee_phase)
        time.sleep(0.02)
    t.join(timeout=5)
    assert TeePhase.ACTIVE in phases
    assert sd.read_record().tee_phase is TeePhase.IDLE
