"""Per-invocation latency benchmark for tuner policies.

Each timed call covers what the host pays per collective: filling the
context record, running the policy and reading the outputs back. A
native-equivalent baseline does the same with the size-aware logic written
directly in Python, so the difference isolates the policy engine.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass

import numpy as np

from .context import TUNER_LAYOUT, Collective, pack_tuner_into
from .corpus import corpus_path
from .host import Engine, derive_comm_id
from .isa import Hook, Op, Program, load_file
from .maps import MapRegistry
from .reload import reload
from .verifier import HELPER_MAP_LOOKUP, HELPER_MAP_UPDATE, VerifierConfig
from .vm import CheckedInterpreter

LADDER = ("noop", "size_aware_v2", "lookup_only", "lookup_update", "adaptive_channels",
          "slo_enforcer")
NATIVE = "native"
WARMUP = 10_000

_OUT = struct.Struct("<III")
_COMM = derive_comm_id(1)


@dataclass
class BenchResult:
    policy_name: str
    calls: int
    p50_ns: float
    p99_ns: float
    mean_ns: float
    n_lookup: int
    n_update: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class OverheadModel:
    base_ns: float
    per_lookup_ns: float
    per_update_ns: float
    r2: float
    residual_ns: float

    def predict(self, n_lookup: int, n_update: int) -> float:
        return self.base_ns + self.per_lookup_ns * n_lookup + self.per_update_ns * n_update


def helper_counts(program: Program) -> tuple[int, int]:
    """Static (lookup, update) call sites."""
    calls = [i.imm for i in program.instructions if i.op is Op.CALL]
    return calls.count(HELPER_MAP_LOOKUP), calls.count(HELPER_MAP_UPDATE)


def warm_path_counts(program: Program, msg_size: int = 1 << 20) -> tuple[int, int]:
    """(lookup, update) calls one benchmark invocation actually makes.

    Static call sites overcount programs whose cold path (first contact
    with a communicator) makes extra calls the timed loop never reaches.
    """
    registry = MapRegistry()
    warm_maps(registry, program)
    interp = CheckedInterpreter(program, registry.resolve(program), TUNER_LAYOUT,
                                VerifierConfig().helpers_for(program.hook))
    ctx = bytearray(36)
    pack_tuner_into(ctx, int(Collective.ALLREDUCE), msg_size, 8, _COMM)
    interp.run(ctx)
    return interp.helper_calls[HELPER_MAP_LOOKUP], interp.helper_calls[HELPER_MAP_UPDATE]


def warm_maps(registry: MapRegistry, program: Program, comm_id: int = _COMM) -> None:
    """State every ladder policy finds on its common path."""
    key = comm_id.to_bytes(4, "little")
    for d in program.maps:
        m = registry.get_or_create(d)
        if d.name == "latency_map":
            # avg 500 us, 4 channels, many samples, adjusted on the last one
            m.update(key, struct.pack("<QI4xQQ", 500_000, 4, 1 << 20, 1 << 20))
        elif d.name == "slo_config":
            m.update((0).to_bytes(4, "little"), struct.pack("<Q", 2_000_000))
        elif d.name == "decision_map" or d.name == "slo_stats":
            m.update(key, bytes(d.value_size))


def _percentiles(samples: np.ndarray) -> tuple[float, float, float]:
    p50, p99 = np.percentile(samples, [50, 99])
    return float(p50), float(p99), float(samples.mean())


def _native_size_aware(ctx: bytearray) -> int:
    size = struct.unpack_from("<Q", ctx, 8)[0]
    struct.pack_into("<II", ctx, 24, 0 if size <= 32768 else 1, 2)
    return 0


def _time_loop(fn, calls: int, msg_size: int, warmup: int = WARMUP) -> np.ndarray:
    ctx = bytearray(36)
    out = _OUT.unpack_from
    clock = time.perf_counter_ns
    samples = np.empty(calls, dtype=np.int64)
    coll = int(Collective.ALLREDUCE)
    for _ in range(warmup):
        pack_tuner_into(ctx, coll, msg_size, 8, _COMM)
        fn(ctx)
        out(ctx, 24)
    for i in range(calls):
        t0 = clock()
        pack_tuner_into(ctx, coll, msg_size, 8, _COMM)
        fn(ctx)
        out(ctx, 24)
        samples[i] = clock() - t0
    return samples


def bench_native(calls: int = 1_000_000, msg_size: int = 1 << 20) -> BenchResult:
    s = _time_loop(_native_size_aware, calls, msg_size)
    return BenchResult(NATIVE, calls, *_percentiles(s), 0, 0)


def _attach(program: Program, engine: Engine | None = None):
    engine = engine or Engine()
    rep = reload(engine, Hook.TUNER, program)
    if not rep.ok:
        raise ValueError(f"{program.name}: {rep.error}")
    warm_maps(engine.registry, program)
    return engine.slots[Hook.TUNER].invoke


def bench_policy(program: Program, calls: int = 1_000_000, msg_size: int = 1 << 20,
                 engine: Engine | None = None) -> BenchResult:
    """Time ``program`` attached to a tuner slot, called the way the host calls it."""
    s = _time_loop(_attach(program, engine), calls, msg_size)
    return BenchResult(program.name, calls, *_percentiles(s), *warm_path_counts(program, msg_size))


def bench_interleaved(programs: list[Program], calls: int = 1_000_000, rounds: int = 20,
                      msg_size: int = 1 << 20, engines: list[Engine] | None = None
                      ) -> tuple[BenchResult, list[BenchResult]]:
    """Native baseline plus ``programs``, timed in alternating rounds.

    Every round runs ``calls // rounds`` invocations of each candidate in
    turn, so slow stretches on a shared machine hit all of them alike
    instead of skewing whichever happened to be running. Pass ``engines``
    (one per program) to inspect their maps afterwards.
    """
    engines = engines or [Engine() for _ in programs]
    fns = [_native_size_aware] + [_attach(p, e) for p, e in zip(programs, engines)]
    chunk = max(calls // rounds, 1)
    parts: list[list[np.ndarray]] = [[] for _ in fns]
    for r in range(rounds):
        for i, fn in enumerate(fns):
            parts[i].append(_time_loop(fn, chunk, msg_size, WARMUP if r == 0 else 1000))
    samples = [np.concatenate(p) for p in parts]
    n = chunk * rounds
    native = BenchResult(NATIVE, n, *_percentiles(samples[0]), 0, 0)
    rows = [BenchResult(p.name, n, *_percentiles(s), *warm_path_counts(p, msg_size))
            for p, s in zip(programs, samples[1:])]
    return native, rows


def fit_overhead_model(results: list[BenchResult], baseline_p50: float = 0.0) -> OverheadModel:
    """OLS of (p50 - baseline) on (1, n_lookup, n_update)."""
    if len(results) < 4:
        raise ValueError("need at least 4 results")
    X = np.array([[1.0, r.n_lookup, r.n_update] for r in results])
    y = np.array([r.p50_ns - baseline_p50 for r in results])
    if np.linalg.matrix_rank(X) < 3:
        raise ValueError("degenerate design: need distinct (n_lookup, n_update) points")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float((resid ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return OverheadModel(*map(float, coef), r2, float(np.sqrt(ss_res / len(y))))


def ladder_programs() -> list[Program]:
    return [load_file(corpus_path(f"safe/{n}.cclpol")) for n in LADDER]


def run_table1(calls: int = 1_000_000, rounds: int = 20, engines: list[Engine] | None = None
               ) -> tuple[BenchResult, list[BenchResult], OverheadModel]:
    native, rows = bench_interleaved(ladder_programs(), calls, rounds, engines=engines)
    return native, rows, fit_overhead_model(rows, native.p50_ns)


def format_table1(native: BenchResult, rows: list[BenchResult], fit: OverheadModel) -> str:
    lines = [f"{'Policy':<20} {'P50 (ns)':>9} {'P99 (ns)':>9} {'dP50':>8} {'lookups':>8} "
             f"{'updates':>8}", "-" * 67,
             f"{'native baseline':<20} {native.p50_ns:9.0f} {native.p99_ns:9.0f} {'---':>8}"]
    for r in rows:
        lines.append(f"{r.policy_name:<20} {r.p50_ns:9.0f} {r.p99_ns:9.0f} "
                     f"{r.p50_ns - native.p50_ns:+8.0f} {r.n_lookup:8d} {r.n_update:8d}")
    lines.append("")
    lines.append(f"fit: dP50 = {fit.base_ns:.0f} + {fit.per_lookup_ns:.0f}*n_lookup + "
                 f"{fit.per_update_ns:.0f}*n_update ns  (R^2 = {fit.r2:.3f}, "
                 f"rms residual {fit.residual_ns:.0f} ns)")
    return "\n".join(lines)

