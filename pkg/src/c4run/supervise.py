"""Anchor supervisor: spawn, tee output, reap, record the exit.

Lifecycle entrypoints are short-lived processes, so none of them can
waitpid the anchor. start() launches this supervisor detached instead; it
spawns the anchor from the bundle config (in its own session/process group
so kill can signal the whole tree), redirects stdout+stderr to anchor.out,
publishes the pid, waits, and durably records the exit observation that
wait()/kill() later reduce into the composite outcome.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time
from pathlib import Path

from .bundle import load_bundle
from .fsutil import atomic_write_json
from .statedir import StateDir


def supervise(statedir_root: Path, cid: str) -> int:
    sd = StateDir(statedir_root, cid)
    bundle = load_bundle(sd.bundle_dir)
    rootfs = sd.rootfs_dir
    argv = [str(rootfs / os.path.normpath(bundle.process_args[0])), *bundle.process_args[1:]]

    env = dict(os.environ)
    env.update(bundle.process_env)
    env.update(
        {
            "C4_CID": cid,
            "C4_STATEDIR": str(sd.path),
            "C4_SESSION_PATH": str(sd.session_path),
        }
    )

    out = open(sd.anchor_out_path, "ab", buffering=0)
    try:
        proc = subprocess.Popen(
            argv,
            cwd=rootfs,
            env=env,
            stdout=out,
            stderr=out,
            stdin=subprocess.DEVNULL,
            start_new_session=True,
        )
    except OSError as exc:
        atomic_write_json(
            sd.anchor_exit_path,
            {"pid": None, "exit_code": 127, "term_signal": None, "spawn_error": str(exc), "finished_at": time.time()},
        )
        return 1
    finally:
        out.close()

    atomic_write_json(sd.anchor_pid_path, {"pid": proc.pid, "started_at": time.time()})
    raw = proc.wait()
    atomic_write_json(
        sd.anchor_exit_path,
        {
            "pid": proc.pid,
            "exit_code": raw if raw >= 0 else 128 + abs(raw),
            "term_signal": abs(raw) if raw < 0 else None,
            "finished_at": time.time(),
        },
    )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="c4run-supervise")
    parser.add_argument("--statedir-root", required=True, type=Path)
    parser.add_argument("--cid", required=True)
    args = parser.parse_args(argv)
    return supervise(args.statedir_root, args.cid)


if __name__ == "__main__":
    sys.exit(main())
