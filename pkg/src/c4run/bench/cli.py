"""c4bench command line: correctness, concurrency, adversary, crash.

Each subcommand runs its campaign, writes a JSON report, prints a plain
summary table, and exits nonzero iff an assertion-class check failed.
Timing columns are informational; only structural checks gate the exit.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from . import campaigns


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c4bench", description=__doc__)
    parser.add_argument("--workdir", type=Path, default=None, help="scratch dir (default: a temp dir)")
    parser.add_argument("--out", type=Path, default=None, help="write the JSON report here")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("correctness", help="full-lifecycle WCR/CSR/SCR/IPR rounds")
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--stages-per-round", type=int, default=4)
    p.add_argument("--backend", default="sim")
    p.add_argument("--serve-instances", type=int, default=1)

    p = sub.add_parser("concurrency", help="k concurrent stages per round")
    p.add_argument("--k", type=int, nargs="+", default=[2, 5, 8, 16, 32])
    p.add_argument("--rounds-per-k", type=int, default=5)
    p.add_argument("--latency-ms", type=float, default=30.0)

    p = sub.add_parser("adversary", help="transformed-request rejection sweep")
    p.add_argument("--cases", type=int, default=10_000)
    p.add_argument("--honest-cases", type=int, default=1_000)
    p.add_argument("--seed", type=int, default=0)

    sub.add_parser("crash", help="crash-point injection and recovery")
    return parser


def _print_correctness(report: dict) -> bool:
    print("test                     rounds  WCR      CSR      SCR      IPR")
    print(
        "lifecycle workflow       %6d  %-7s  %-7s  %-7s  %-7s"
        % (
            report["rounds"],
            f"{report['wcr'] * 100:.0f}%",
            f"{report['csr'] * 100:.0f}%",
            f"{report['scr'] * 100:.0f}%",
            f"{report['ipr'] * 100:.0f}%",
        )
    )
    t = report["timings"]
    for name in ("create", "start", "bringup", "end_to_end"):
        s = t[name]
        if s["median"] is not None:
            print(f"  {name:<12} median {s['median'] * 1000:8.1f} ms   p95 {s['p95'] * 1000:8.1f} ms")
    return all(report[m] == 1.0 for m in ("wcr", "csr", "scr", "ipr"))


def _print_concurrency(report: dict) -> bool:
    ok = True
    print("k    rounds  success  elapsed_med(s)  throughput_med(st/s)")
    for row in report["rows"]:
        ok &= row["success_rate"] == 1.0
        for r in row["per_round"]:
            # throughput column must equal k/elapsed exactly, by recomputation
            ok &= r["throughput"] == r["k"] / r["elapsed_s"]
        print(
            "%-4d %-7d %-8s %-15.3f %.3f"
            % (
                row["k"],
                row["rounds"],
                f"{row['success_rate'] * 100:.0f}%",
                row["elapsed"]["median"],
                row["throughput"]["median"],
            )
        )
    return ok


def _print_adversary(report: dict) -> bool:
    print(
        f"transformed: {report['cases']}  accepted: {report['accepted_transformed']}  "
        f"honest: {report['honest_cases']}  honest rejects: {report['honest_rejects']}"
    )
    for reason, n in sorted(report["reject_reasons"].items()):
        print(f"  {reason:<24} {n}")
    ok = report["accepted_transformed"] == 0 and report["honest_rejects"] == 0
    e2e = report.get("e2e")
    if e2e:
        print(
            f"e2e: honest executed once: {e2e['honest_executed_once']}  "
            f"misrouted executions: {e2e['misrouted_executions']}  "
            f"misrouted rejected: {e2e['misrouted_rejected']}"
        )
        ok &= (
            e2e["honest_executed_once"]
            and e2e["misrouted_executions"] == 0
            and e2e["misrouted_rejected"]
        )
    return ok


def _print_crash(report: dict) -> bool:
    for r in report["results"]:
        status = "ok" if r["ok"] else "FAIL"
        print(f"  {r['point']:<28} {status}")
    print(f"crash points: {report['points']}  all ok: {report['all_ok']}")
    return report["all_ok"]


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    workdir = args.workdir or Path(tempfile.mkdtemp(prefix="c4bench-"))
    workdir.mkdir(parents=True, exist_ok=True)

    if args.command == "correctness":
        report = campaigns.run_lifecycle_campaign(
            workdir,
            rounds=args.rounds,
            stages_per_round=args.stages_per_round,
            backend_id=args.backend,
            serve_instances=args.serve_instances,
        )
        ok = _print_correctness(report)
    elif args.command == "concurrency":
        report = campaigns.run_concurrency_campaign(
            workdir,
            k_values=tuple(args.k),
            rounds_per_k=args.rounds_per_k,
            stage_latency_ms=args.latency_ms,
        )
        ok = _print_concurrency(report)
    elif args.command == "adversary":
        report = campaigns.run_adversary_campaign(
            workdir, cases=args.cases, honest_cases=args.honest_cases, seed=args.seed
        )
        ok = _print_adversary(report)
    else:
        report = campaigns.run_crash_campaign(workdir)
        ok = _print_crash(report)

    if args.out:
        args.out.write_text(json.dumps(report, indent=2, default=str))
        print(f"report written to {args.out}")
    return 0 if ok else 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
