"""Command-line front end.

Every subcommand that takes a trace accepts a path or ``-`` for stdin, so
``mixmode simulate --out -`` can be piped straight into the others.
Exit codes: 0 ok or consistent, 1 usage or input error, 2 inconsistent,
3 unknown, 4 deadlock.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .causality import (LimitExceeded, global_update_cut, induce_po, linearizations,
                        progress_measure, update_consistent_cut)
from .checker import check_by_oracle, check_by_rewrite
from .control import controller_for, is_atomic, is_mixed_mode, is_ordered, is_quiescent
from .dot import render
from .kernel import Deadlock, KernelError, ProcessId, action_to_json, run
from .model import ALGORITHMS, InvalidScenario, MalformedTrace, MicroserviceSystem, Scenario
from .rewrite import rewrite_to_atomic
from .traceio import dumps, load_trace, trace_to_json

EXIT_OK, EXIT_USAGE, EXIT_INCONSISTENT, EXIT_UNKNOWN, EXIT_DEADLOCK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# -- input helpers -------------------------------------------------------------

def parse_seeds(text: str) -> list[int]:
    """``7``, ``0..99`` (inclusive) or ``1,4,9``."""
    seeds: list[int] = []
    try:
        for part in text.split(","):
            part = part.strip()
            if ".." in part:
                lo, hi = part.split("..")
                seeds.extend(range(int(lo), int(hi) + 1))
            elif part:
                seeds.append(int(part))
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def load_scenario(ref: str) -> Scenario:
    from .scenarios import BUILTIN, builtin
    if ref in BUILTIN:
        return builtin(ref)
    try:
        if ref == "-":
            data = json.load(sys.stdin)
        else:
            with open(ref, encoding="utf-8") as fp:
                data = json.load(fp)
    except FileNotFoundError:
        raise UsageError(f"no scenario file or builtin named {ref!r}") from None
    except json.JSONDecodeError as e:
        raise InvalidScenario([f"not JSON: {e}"]) from None
    return Scenario.from_json(data)


def read_trace(ref: str):
    if ref == "-":
        return load_trace(sys.stdin)
    try:
        with open(ref, encoding="utf-8") as fp:
            return load_trace(fp)
    except FileNotFoundError:
        raise UsageError(f"no such trace file {ref!r}") from None


def resolve_client(system: MicroserviceSystem, name: str) -> ProcessId:
    ids = list(system.scenario.client_ids)
    if name in ids:
        return system.clients[ids.index(name)]
    try:
        p = ProcessId.parse(name)
    except ValueError:
        p = None
    if p is None or p not in system.clients:
        raise UsageError(f"unknown client {name!r}; clients are {', '.join(ids)}")
    return p


def emit(text: str, path: str | None) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(text)


def one_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"


# -- subcommands -----------------------------------------------------------------

def _manifest(args) -> dict:
    m = {}
    if args.manifest:
        with open(args.manifest, encoding="utf-8") as fp:
            m = json.load(fp)
    for key, attr in (("scenario", "scenario"), ("algorithm", "algorithm"), ("seeds", "seeds"),
                      ("maxSteps", "max_steps"), ("out", "out"), ("routingLog", "routing_log"),
                      ("policy", "policy")):
        v = getattr(args, attr)
        if v is not None:
            m[key] = v
    if "scenario" not in m:
        raise UsageError("simulate needs --scenario or a manifest naming one")
    return m


def _simulate_one(scenario: Scenario, algorithm: str, policy, seed: int, max_steps: int):
    system = MicroserviceSystem(scenario)
    ctl = controller_for(algorithm, policy)
    frag = run(system, ctl, seed, max_steps)
    return frag, ctl.last_state.routing_log


def cmd_simulate(args) -> int:
    m = _manifest(args)
    scenario = load_scenario(m["scenario"])
    algorithm = m.get("algorithm") or scenario.algorithm
    if algorithm not in ALGORITHMS:
        raise UsageError(f"unknown algorithm {algorithm!r}")
    scenario = scenario.with_(algorithm=algorithm)
    seeds = m.get("seeds", "0")
    seeds = parse_seeds(seeds) if isinstance(seeds, str) else [int(s) for s in seeds]
    max_steps = int(m.get("maxSteps", 10_000))
    out = m.get("out")
    if out == "-" and len(seeds) != 1:
        raise UsageError("--out - streams a single trace; pass one seed")
    if out not in (None, "-"):
        os.makedirs(out, exist_ok=True)

    def job(seed):
        try:
            return seed, _simulate_one(scenario, algorithm, m.get("policy"), seed, max_steps), None
        except Deadlock as e:
            return seed, None, e

    jobs = max(1, int(args.jobs or 1))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(job, seeds))
    else:
        results = [job(s) for s in seeds]

    summary_fp = sys.stderr if out == "-" else sys.stdout
    log_lines = []
    code = EXIT_OK
    for seed, res, err in results:
        if err is not None:
            summary_fp.write(one_line({"seed": seed, "deadlock": str(err), "steps": len(err.fragment)}))
            code = EXIT_DEADLOCK
            continue
        frag, log = res
        system = frag.system
        trace = frag.trace
        text = dumps(trace_to_json(frag, seed=seed, algorithm=algorithm, full_states=args.full_states))
        path = None
        if out == "-":
            sys.stdout.write(text)
        elif out is not None:
            path = os.path.join(out, f"{scenario.name}-{algorithm}-{seed}.json")
            with open(path, "w", encoding="utf-8") as fp:
                fp.write(text)
        row = {"seed": seed, "steps": len(frag),
               "mixedMode": is_mixed_mode(trace, system),
               "ordered": is_ordered(trace, system, observed=True),
               "quiescent": is_quiescent(trace),
               "atomic": is_atomic(trace)}
        if path:
            row["trace"] = path
        summary_fp.write(one_line(row))
        for entry in log:
            log_lines.append(one_line(dict(entry, seed=seed)))
    if m.get("routingLog"):
        emit("".join(log_lines), m["routingLog"])
    return code


def cmd_check(args) -> int:
    frag, meta = read_trace(args.trace)
    system = frag.system
    clients = [resolve_client(system, c) for c in args.client] if args.client else None
    if args.method == "rewrite":
        verdict = check_by_rewrite(frag, meta["algorithm"])
        if clients is not None:
            verdict.per_client = {c: v for c, v in verdict.per_client.items() if c in clients}
    else:
        verdict = check_by_oracle(system, frag, args.bound, clients)
    emit(dumps(verdict.to_json()), args.out)
    return {"consistent": EXIT_OK, "inconsistent": EXIT_INCONSISTENT}.get(verdict.overall, EXIT_UNKNOWN)


def cmd_measure(args) -> int:
    frag, _ = read_trace(args.trace)
    emit(one_line(progress_measure(induce_po(frag)).to_json()), args.out)
    return EXIT_OK


def cmd_rewrite(args) -> int:
    frag, meta = read_trace(args.trace)
    system = frag.system
    c = resolve_client(system, args.client)
    algorithm = args.algorithm or meta["algorithm"]
    po = induce_po(frag)
    rep = rewrite_to_atomic(po, c, algorithm)
    emit(dumps(rep.to_json()), args.out)
    if args.dot_dir:
        os.makedirs(args.dot_dir, exist_ok=True)
        _write_step_dots(po, rep, args.dot_dir)
    return EXIT_OK if rep.outcome == "AtomicReached" else EXIT_UNKNOWN


def _write_step_dots(po, rep, directory) -> None:
    frames = [po] + [rec.result for rec in rep.steps]
    for i, p in enumerate(frames):
        with open(os.path.join(directory, f"step-{i:03d}.dot"), "w", encoding="utf-8") as fp:
            fp.write(render(p, global_update_cut(p), title=f"step {i}"))


def cmd_linearize(args) -> int:
    frag, _ = read_trace(args.trace)
    po = induce_po(frag)
    orders = linearizations(po, limit=args.limit, replay=False, strict=False)
    truncated = False
    try:
        linearizations(po, limit=args.limit, replay=False)
    except LimitExceeded:
        truncated = True
    obj = {"count": len(orders), "truncated": truncated}
    if not args.count_only:
        obj["linearizations"] = [[action_to_json(po.label(n)) for n in o] for o in orders]
    emit(dumps(obj), args.out)
    return EXIT_OK


def cmd_impossibility(args) -> int:
    from .impossibility import NoMixedModeFound, NotOblivious, demonstrate
    from .scenarios import alternating_mail
    scenario = load_scenario(args.scenario) if args.scenario else \
        alternating_mail(args.clients, args.workers, args.requests)
    ctl = controller_for(args.controller)
    try:
        report = demonstrate(ctl, scenario, seeds=range(args.budget), max_steps=args.max_steps,
                             max_actions=args.max_actions,
                             exhaustive_size=(args.clients, args.workers, args.requests))
    except NotOblivious as e:
        sys.stderr.write(f"{e}\n")
        return EXIT_USAGE
    except NoMixedModeFound as e:
        sys.stdout.write(f"{e}\n")
        return EXIT_UNKNOWN
    sys.stdout.write(report.summary() + "\n")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for name, obj in (("report.json", report.to_json()),
                          ("source-trace.json", trace_to_json(report.source, seed=report.seed,
                                                              algorithm=args.controller)),
                          ("remapped-trace.json", trace_to_json(report.remapped, seed=report.seed,
                                                                algorithm=args.controller))):
            with open(os.path.join(args.out, name), "w", encoding="utf-8") as fp:
                fp.write(dumps(obj))
    return EXIT_OK if report.contradiction else EXIT_UNKNOWN


def cmd_render(args) -> int:
    if args.builtin:
        from .scenarios import staggered_fragment
        if args.builtin != "staggered":
            raise UsageError("only the staggered example has a built-in schedule")
        frag = staggered_fragment()
    elif args.trace:
        frag, _ = read_trace(args.trace)
    else:
        raise UsageError("render needs a trace or --builtin staggered")
    po = induce_po(frag)
    cut = None
    if args.cut == "global":
        cut = global_update_cut(po)
    elif args.cut == "update":
        cut = update_consistent_cut(po)
    emit(render(po, cut), args.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mixmode", description="Rolling-update simulator and checker.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario under an update algorithm")
    s.add_argument("--scenario", help="scenario JSON path, builtin name or -")
    s.add_argument("--algorithm", choices=ALGORITHMS)
    s.add_argument("--seeds", help="e.g. 7, 0..99 or 1,4,9 (default 0)")
    s.add_argument("--max-steps", type=int, dest="max_steps")
    s.add_argument("--policy", choices=("coin", "prefer-old", "prefer-new"))
    s.add_argument("--out", help="directory for trace files, or - to stream one trace")
    s.add_argument("--routing-log", dest="routing_log", help="JSON-lines routing log path")
    s.add_argument("--manifest", help="JSON run manifest; flags override its fields")
    s.add_argument("--full-states", action="store_true", dest="full_states")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check", help="decide update consistency of a trace")
    c.add_argument("trace")
    c.add_argument("--client", action="append")
    c.add_argument("--bound", type=int)
    c.add_argument("--method", choices=("oracle", "rewrite"), default="oracle")
    c.add_argument("--out")
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("measure", help="print the progress measure of a trace")
    m.add_argument("trace")
    m.add_argument("--out")
    m.set_defaults(func=cmd_measure)

    r = sub.add_parser("rewrite", help="rewrite a trace towards an atomic-update computation")
    r.add_argument("trace")
    r.add_argument("--client", required=True)
    r.add_argument("--algorithm", choices=ALGORITHMS)
    r.add_argument("--dot-dir", dest="dot_dir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rewrite)

    li = sub.add_parser("linearize", help="enumerate linearizations of a trace's partial order")
    li.add_argument("trace")
    li.add_argument("--limit", type=int, default=1000)
    li.add_argument("--count-only", action="store_true", dest="count_only")
    li.add_argument("--out")
    li.set_defaults(func=cmd_linearize)

    im = sub.add_parser("impossibility", help="demonstrate inconsistency of a payload-blind updater")
    im.add_argument("--controller", default="uncontrolled")
    im.add_argument("--clients", type=int, default=2)
    im.add_argument("--workers", type=int, default=2)
    im.add_argument("--requests", type=int, default=2)
    im.add_argument("--budget", type=int, default=200, help="number of seeds to try")
    im.add_argument("--scenario")
    im.add_argument("--max-steps", type=int, default=1000, dest="max_steps")
    im.add_argument("--max-actions", type=int, default=30, dest="max_actions")
    im.add_argument("--out")
    im.set_defaults(func=cmd_impossibility)

    d = sub.add_parser("render", help="emit a DOT space-time diagram")
    d.add_argument("trace", nargs="?")
    d.add_argument("--builtin", help="built-in example schedule (staggered)")
    d.add_argument("--cut", choices=("global", "update", "none"), default="global")
    d.add_argument("--out")
    d.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, InvalidScenario, MalformedTrace, KeyError, ValueError, OSError) as e:
        sys.stderr.write(f"mixmode {args.command}: {e}\n")
        return EXIT_USAGE
    except Deadlock as e:
        sys.stderr.write(f"mixmode {args.command}: deadlock after {len(e.fragment)} steps\n")
        return EXIT_DEADLOCK
    except KernelError as e:
        sys.stderr.write(f"mixmode {args.command}: {e}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
