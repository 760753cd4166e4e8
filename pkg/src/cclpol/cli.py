"""Command-line entry point.

Exit statuses: 0 success, 1 usage, 2 parse (program, model or scenario
file), 3 verifier rejection, 4 runtime failure (missing file, failed
experiment, fault). ``--json`` switches any command to JSON lines.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

from ._data import resolve
from .context import layout_for, unpack_tuner_outputs
from .isa import Hook, ParseError, Program, format_instruction, load_file
from .maps import MapRegistry
from .verifier import Verdict, explain, verify

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_REJECT, EXIT_RUNTIME = range(5)
MODEL_ENV = "CCLPOL_MODEL"


class _Fail(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(args, obj: dict) -> None:
    if args.json:
        print(json.dumps(obj))


def _load_program(path: str) -> Program:
    try:
        p = resolve(path, ".cclpol")
    except FileNotFoundError as exc:
        raise _Fail(EXIT_RUNTIME, str(exc)) from None
    try:
        return load_file(p)
    except ParseError as exc:
        raise _Fail(EXIT_PARSE, f"{p}:{exc}") from None


def _load_model(path: str | None):
    from .model import load_model
    path = path or os.environ.get(MODEL_ENV) or None
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise _Fail(EXIT_RUNTIME, str(exc)) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise _Fail(EXIT_PARSE, f"bad model config {path}: {exc}") from None


def _verdict_dict(prog: Program, v: Verdict) -> dict:
    return {"program": prog.name, "hook": prog.hook.value, "accepted": v.accepted,
            "class": v.rejection_class.value if v.rejection_class else None,
            "message": v.message, "insn": v.insn, "analyzed_insns": v.analyzed_insns,
            "elapsed_ms": round(v.elapsed_ms, 3)}


def _verified(prog: Program) -> Verdict:
    v = verify(prog)
    if not v.accepted:
        raise _Fail(EXIT_REJECT, explain(v))
    return v


# -- commands -----------------------------------------------------------------

def cmd_verify(args) -> int:
    prog = _load_program(args.file)
    v = verify(prog)
    if args.json:
        _emit(args, _verdict_dict(prog, v))
    else:
        print(f"{prog.name} ({prog.hook.value}, {len(prog.instructions)} insns)")
        print(explain(v).splitlines()[0])
    return EXIT_OK if v.accepted else EXIT_REJECT


def cmd_explain(args) -> int:
    prog = _load_program(args.file)
    v = verify(prog)
    if args.json:
        d = _verdict_dict(prog, v)
        d.update(register=v.reg, state=v.state, detail={k: list(x) if isinstance(x, tuple) else x
                                                        for k, x in v.detail.items()})
        _emit(args, d)
        return EXIT_OK if v.accepted else EXIT_REJECT
    print(f"; {prog.name} ({prog.hook.value})")
    slots = prog.map_slots
    for pc, insn in enumerate(prog.instructions):
        mark = ">>" if pc == v.insn else "  "
        print(f"{mark} {pc:4d}: {format_instruction(insn, map_slots=slots)}")
    print(explain(v))
    return EXIT_OK if v.accepted else EXIT_REJECT


def cmd_run(args) -> int:
    from .vm import ExecutionEnv, Mode, SafetyFault, execute
    prog = _load_program(args.file)
    _verified(prog)
    layout = layout_for(prog.hook)
    try:
        ctx = bytearray.fromhex(args.ctx)
    except ValueError:
        raise _Fail(EXIT_USAGE, f"--ctx is not hex: {args.ctx!r}") from None
    if len(ctx) != layout.size:
        raise _Fail(EXIT_USAGE, f"--ctx must be {layout.size} bytes for the {prog.hook.value} "
                                f"hook, got {len(ctx)}")
    registry = MapRegistry()
    mode = Mode(args.mode)
    try:
        r0 = execute(prog, ExecutionEnv(ctx, registry, layout, mode=mode))
    except SafetyFault as exc:
        raise _Fail(EXIT_RUNTIME, f"checked-mode fault: {exc}") from None
    out = {"program": prog.name, "mode": mode.value, "r0": r0, "ctx": ctx.hex()}
    if prog.hook is Hook.TUNER:
        from .host import translate
        model = _load_model(None)
        raw = unpack_tuner_outputs(ctx)
        out["outputs"] = dict(zip(("algorithm", "protocol", "n_channels"), raw))
        d, _ = translate(raw, model.max_channels, (model.default_algorithm,
                                                   model.default_protocol))
        out["decision"] = "DEFER" if d.deferred else d.label()
    if args.dump_maps:
        out["maps"] = {m.name: registry[m.name].dump() for m in prog.maps}
    if args.json:
        _emit(args, out)
        return EXIT_OK
    print(f"r0 = {r0}")
    print(f"ctx = {out['ctx']}")
    if "outputs" in out:
        print("outputs: " + " ".join(f"{k}={v}" for k, v in out["outputs"].items()))
        print(f"decision: {out['decision']}")
    for name, lines in out.get("maps", {}).items():
        print(f"map {name}: {len(lines)} entries")
        for ln in lines:
            print(f"  {ln}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import LADDER, format_table1, run_table1
    from .host import Engine
    if args.calls <= 0:
        raise _Fail(EXIT_USAGE, "--calls must be positive")
    engines = [Engine() for _ in LADDER]
    t0 = time.perf_counter()
    native, rows, fit = run_table1(args.calls, engines=engines)
    elapsed = time.perf_counter() - t0
    maps = {}
    if args.dump_maps:
        for name, eng in zip(LADDER, engines):
            maps[name] = {m: eng.registry[m].dump() for m in eng.registry}
    if args.json:
        for r in [native, *rows]:
            print(r.to_json())
        _emit(args, {"fit": vars(fit), "elapsed_s": round(elapsed, 2)})
        if maps:
            _emit(args, {"maps": maps})
        return EXIT_OK
    print(format_table1(native, rows, fit))
    print(f"{args.calls} calls per policy, {elapsed:.1f} s")
    for prog, per_map in maps.items():
        for name, lines in per_map.items():
            print(f"{prog} map {name}: {len(lines)} entries")
            for ln in lines:
                print(f"  {ln}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .host import format_sweep, sweep
    model = _load_model(args.model)
    policy = _load_program(args.policy) if args.policy else None
    if policy is not None:
        _verified(policy)
    rows = sweep(model, policy, n_ranks=args.ranks)
    if args.json:
        for r in rows:
            d = r.policy_decision
            _emit(args, {"msg_size": r.msg_size, "default_gbps": round(r.default_gbps, 3),
                         "ring_gbps": round(r.ring_gbps, 3),
                         "ring_delta_pct": round(r.ring_delta_pct, 2),
                         "policy_gbps": None if r.policy_gbps is None else round(r.policy_gbps, 3),
                         "policy_delta_pct": (None if r.policy_delta_pct is None
                                              else round(r.policy_delta_pct, 2)),
                         "policy_decision": (None if d is None else
                                             "DEFER" if d.deferred else d.label())})
    else:
        print(f"model {model.name}, {args.ranks or model.ranks} ranks, AllReduce bus GB/s")
        print(format_sweep(rows, policy.name if policy else None))
    return EXIT_OK


def cmd_scenario(args) -> int:
    from .host import Engine, ScenarioError, load_scenario, phases, run_scenario
    try:
        spec = load_scenario(args.spec)
    except FileNotFoundError as exc:
        raise _Fail(EXIT_RUNTIME, str(exc)) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise _Fail(EXIT_PARSE, f"bad scenario {args.spec}: {exc}") from None
    if args.calls is not None:
        spec.calls = args.calls
    engine = Engine(_load_model(args.model))
    t0 = time.perf_counter()
    try:
        trace = run_scenario(engine, spec)
    except ScenarioError as exc:
        raise _Fail(EXIT_RUNTIME, str(exc)) from None
    elapsed = time.perf_counter() - t0
    if args.trace:
        trace.write_jsonl(args.trace)
    ph = phases(trace, spec)
    if args.json:
        for p in ph:
            _emit(args, {"phase": vars(p)})
        _emit(args, {"scenario": spec.name, "calls": len(trace), "elapsed_s": round(elapsed, 2),
                     "trace": args.trace})
        return EXIT_OK
    progs = ", ".join(f"{h.value}={p}" for h, p in spec.programs.items()) or "none"
    print(f"scenario {spec.name}: {len(trace)} calls, programs: {progs}")
    for p in ph:
        print("  " + p.line())
    if args.trace:
        print(f"trace written to {args.trace}")
    print(f"{elapsed:.1f} s")
    return EXIT_OK


def cmd_reload_test(args) -> int:
    from .host import Engine
    from .reload import stress_reload
    if min(args.calls, args.threads) <= 0 or args.swaps < 0:
        raise _Fail(EXIT_USAGE, "--calls and --threads must be positive, --swaps non-negative")
    rep = stress_reload(Engine(), args.calls, args.swaps, args.threads, seed=args.seed)
    if args.json:
        d = {k: v for k, v in vars(rep).items()}
        d.update(lost=rep.lost, passed=rep.passed)
        _emit(args, d)
    else:
        print("\n".join(rep.lines()))
    return EXIT_OK if rep.passed else EXIT_RUNTIME


def cmd_corpus(args) -> int:
    from .corpus import run_corpus
    t0 = time.perf_counter()
    rep = run_corpus(trials=args.trials, seed=args.seed)
    elapsed = time.perf_counter() - t0
    if args.json:
        for r in rep.results:
            _emit(args, {"program": r.entry.name, "expected": r.entry.expected_label,
                         "actual": r.actual_label, "match": r.matches, "faults": r.faults,
                         "message": r.verdict.message if r.verdict is not None else r.error})
        _emit(args, {"summary": rep.summary(), "ok": rep.ok, "elapsed_s": round(elapsed, 2)})
    else:
        print("\n".join(rep.lines()))
        print(f"{elapsed:.1f} s")
    return EXIT_OK if rep.ok else EXIT_RUNTIME


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cclpol", description="Verified policy programs for a simulated "
                                            "collective-communication host.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--json", action="store_true", help="JSON lines instead of text")
        p.set_defaults(func=func)
        return p

    p = add("verify", cmd_verify, "verify a .cclpol program")
    p.add_argument("file")
    p = add("explain", cmd_explain, "verify and print the listing with diagnostics")
    p.add_argument("file")
    p = add("run", cmd_run, "verify then execute a program once on a given context")
    p.add_argument("file")
    p.add_argument("--ctx", required=True, help="context record as hex")
    p.add_argument("--mode", choices=("fast", "checked"), default="fast")
    p.add_argument("--dump-maps", action="store_true", help="print map contents afterwards")
    p = add("bench", cmd_bench, "per-invocation latency ladder")
    p.add_argument("--suite", choices=("table1",), default="table1")
    p.add_argument("--calls", type=int, default=1_000_000)
    p.add_argument("--dump-maps", action="store_true", help="print each policy's map contents afterwards")
    p = add("sweep", cmd_sweep, "AllReduce size sweep: default vs Ring vs a policy")
    p.add_argument("--model", help=f"model config (default ${MODEL_ENV} or the shipped model)")
    p.add_argument("--policy")
    p.add_argument("--ranks", type=int)
    p = add("scenario", cmd_scenario, "run a closed-loop scenario")
    p.add_argument("spec")
    p.add_argument("--trace", help="write the per-call trace as JSON lines")
    p.add_argument("--calls", type=int, help="override the scenario's call count")
    p.add_argument("--model")
    p = add("reload-test", cmd_reload_test, "hot-reload zero-loss stress test")
    p.add_argument("--calls", type=int, default=400_000)
    p.add_argument("--swaps", type=int, default=1000)
    p.add_argument("--threads", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p = add("corpus", cmd_corpus, "verify the corpus and fuzz accepted programs")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Fail as exc:
        print(str(exc), file=sys.stderr)
        return exc.status
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
