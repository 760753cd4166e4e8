"""Atomic hot-reload of the program attached to a hook.

A reload verifies the new source, prepares it, then publishes it with a
single reference store into the hook's :class:`ActiveSlot`. Invokers read
that reference once per call, so every call runs entirely under one
generation. The replaced program is retired only after every thread that
picked it up has finished its call.
"""
from __future__ import annotations

import enum
import random
import statistics
import threading
import time
from dataclasses import dataclass, field

from .context import Algorithm, Collective, Protocol
from .isa import Hook, ParseError, Program, assemble
from .maps import MapConflictError
from .verifier import Verdict, verify
from .vm import PreparedProgram, prepare


class ActiveSlot:
    """Holds ``(generation, PreparedProgram | None)`` for one hook.

    Drain uses one epoch record per invoking thread: the record names the
    slot entry that thread is executing. A retired entry is one that no
    record references after it was unpublished.
    """

    def __init__(self, hook: Hook):
        self.hook = hook
        self._entry: tuple[int, PreparedProgram | None] = (0, None)
        self._records: list[list] = []
        self._records_lock = threading.Lock()
        self._local = threading.local()
        self.drain_violations = 0

    @property
    def generation(self) -> int:
        return self._entry[0]

    @property
    def program(self) -> PreparedProgram | None:
        return self._entry[1]

    def _record(self) -> list:
        rec = getattr(self._local, "rec", None)
        if rec is None:
            rec = [None]
            with self._records_lock:
                self._records.append(rec)
            self._local.rec = rec
        return rec

    def invoke(self, ctx: bytearray) -> tuple[int, PreparedProgram | None, int | None]:
        """Run the active program on ``ctx``: (generation, program, r0)."""
        try:
            rec = self._local.rec
        except AttributeError:
            rec = self._record()
        entry = self._entry
        rec[0] = entry
        while self._entry is not entry:
            # a publish landed between the read and the announcement
            entry = self._entry
            rec[0] = entry
        gen, prog = entry
        if prog is None:
            rec[0] = None
            return gen, None, None
        try:
            rc = prog.run(ctx)
            if prog.retired:
                self.drain_violations += 1
        finally:
            rec[0] = None
        return gen, prog, rc

    def publish(self, prog: PreparedProgram | None) -> tuple[tuple, int]:
        """Swap in ``prog``; returns (old entry, swap window in ns)."""
        t0 = time.perf_counter_ns()
        old = self._entry
        self._entry = (old[0] + 1, prog)
        return old, time.perf_counter_ns() - t0

    def drain(self, old: tuple, timeout: float = 10.0) -> None:
        """Wait until no thread is still executing ``old``, then retire it."""
        deadline = time.monotonic() + timeout
        while True:
            with self._records_lock:
                busy = any(r[0] is old for r in self._records)
            if not busy:
                break
            if time.monotonic() > deadline:
                raise TimeoutError("in-flight invocations did not drain")
            time.sleep(0)
        if old[1] is not None:
            old[1].retired = True


class Outcome(enum.Enum):
    SWAPPED = "swapped"
    REJECTED = "rejected"
    BUSY = "busy"


@dataclass
class ReloadReport:
    outcome: Outcome
    verdict: Verdict | None = None
    verify_ms: float = 0.0
    prepare_ms: float = 0.0
    swap_us: float = 0.0
    generation: int = 0
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.SWAPPED

    @property
    def total_ms(self) -> float:
        return self.verify_ms + self.prepare_ms + self.swap_us / 1000.0


def reload(engine, hook: Hook, source: str | Program, blocking: bool = True) -> ReloadReport:
    """Verify, prepare and atomically publish ``source`` on ``hook``.

    Any failure leaves the active program untouched. With ``blocking=False``
    a reload already in progress makes this return BUSY instead of waiting.
    """
    slot = engine.slots[hook]
    if not engine.reload_lock.acquire(blocking=blocking):
        return ReloadReport(Outcome.BUSY, generation=slot.generation,
                            error="another reload is in progress")
    try:
        try:
            program = source if isinstance(source, Program) else assemble(source)
        except ParseError as exc:
            return ReloadReport(Outcome.REJECTED, generation=slot.generation, error=str(exc))
        if program.hook is not hook:
            return ReloadReport(Outcome.REJECTED, generation=slot.generation,
                                error=f"program targets hook {program.hook.value!r}, "
                                      f"not {hook.value!r}")
        t0 = time.perf_counter()
        verdict = verify(program, engine.config)
        t1 = time.perf_counter()
        if not verdict.accepted:
            return ReloadReport(Outcome.REJECTED, verdict, (t1 - t0) * 1e3,
                                generation=slot.generation, error=verdict.message)
        try:
            prepared = prepare(program, engine.registry, engine.ring,
                               engine.config.max_stack, verdict)
        except MapConflictError as exc:
            return ReloadReport(Outcome.REJECTED, verdict, (t1 - t0) * 1e3,
                                generation=slot.generation, error=str(exc))
        t2 = time.perf_counter()
        old, swap_ns = slot.publish(prepared)
        slot.drain(old)
        return ReloadReport(Outcome.SWAPPED, verdict, (t1 - t0) * 1e3, (t2 - t1) * 1e3,
                            swap_ns / 1e3, slot.generation)
    finally:
        engine.reload_lock.release()


def measure_swap(engine, iterations: int, source: str, hook: Hook = Hook.TUNER,
                 under_load: bool = False) -> dict:
    """Repeatedly reload ``source``; report swap-window and total-reload percentiles."""
    stop = threading.Event()
    loader = None
    if under_load:
        def spin():
            while not stop.is_set():
                engine.invoke_tuner(1, Collective.ALLREDUCE, 1 << 20, 8)
        loader = threading.Thread(target=spin, daemon=True)
        loader.start()
    swaps, totals = [], []
    start_gen = engine.slots[hook].generation
    try:
        for _ in range(iterations):
            t0 = time.perf_counter()
            rep = reload(engine, hook, source)
            totals.append((time.perf_counter() - t0) * 1e3)
            if not rep.ok:
                raise ValueError(f"reload failed: {rep.error}")
            swaps.append(rep.swap_us)
    finally:
        stop.set()
        if loader is not None:
            loader.join()
    q = statistics.quantiles(swaps, n=100, method="inclusive") if len(swaps) > 1 else swaps * 99
    return {"iterations": iterations,
            "swap_us_p50": statistics.median(swaps),
            "swap_us_p99": q[98],
            "total_reload_ms_p50": statistics.median(totals),
            "generations": engine.slots[hook].generation - start_gen}


# -- zero-loss stress experiment -------------------------------------------------

@dataclass
class StressReport:
    calls: int
    completed: int
    swaps: int
    threads: int
    invalid_decisions: int
    mixed_generation: int
    monotonic_violations: int
    drain_violations: int
    rejected_reload_ok: bool
    generations_seen: int
    elapsed_s: float
    swap_us_p50: float
    per_thread: list[int] = field(default_factory=list)

    @property
    def lost(self) -> int:
        return self.calls - self.completed

    @property
    def passed(self) -> bool:
        return (self.lost == 0 and self.invalid_decisions == 0 and self.mixed_generation == 0
                and self.monotonic_violations == 0 and self.drain_violations == 0
                and self.rejected_reload_ok)

    def lines(self) -> list[str]:
        return [
            f"invocations: {self.completed}/{self.calls} completed, {self.lost} lost",
            f"threads: {self.threads}  swaps: {self.swaps}  generations observed: "
            f"{self.generations_seen}",
            f"invalid decisions: {self.invalid_decisions}",
            f"calls mixing two generations: {self.mixed_generation}",
            f"per-thread generation regressions: {self.monotonic_violations}",
            f"retired programs still executing: {self.drain_violations}",
            f"rejected reload left behaviour unchanged: {'yes' if self.rejected_reload_ok else 'no'}",
            f"swap window p50: {self.swap_us_p50:.2f} us   elapsed: {self.elapsed_s:.1f} s",
            "zero-loss: PASS" if self.passed else "zero-loss: FAIL",
        ]


def _expected(name: str | None, msg_size: int) -> tuple[int, int]:
    # the two alternating programs: noop defers, size_aware_v2 picks by size
    if name == "size_aware_v2":
        algo = Algorithm.TREE if msg_size <= 32768 else Algorithm.RING
        return int(algo), int(Protocol.SIMPLE)
    return int(Algorithm.NVLS), int(Protocol.SIMPLE)


def stress_reload(engine, calls: int = 400_000, swaps: int = 1000, threads: int = 4,
                  sources: tuple[str, str] | None = None, bad_source: str | None = None,
                  seed: int = 0) -> StressReport:
    """Invokers hammer the tuner hook while a reloader alternates two programs.

    Each call records the generation it ran under and its decision; the
    decision must be exactly what that generation's program produces.
    Halfway through, a reload of ``bad_source`` must be rejected without
    changing behaviour.
    """
    from .corpus import corpus_path
    if sources is None:
        sources = (corpus_path("safe/noop.cclpol").read_text(),
                   corpus_path("safe/size_aware_v2.cclpol").read_text())
    if bad_source is None:
        bad_source = corpus_path("unsafe/out_of_bounds.cclpol").read_text()
    slot = engine.slots[Hook.TUNER]
    first = reload(engine, Hook.TUNER, sources[0])
    if not first.ok:
        raise ValueError(first.error)
    gen_program = {first.generation: slot.program.name}
    per_thread = [calls // threads + (1 if i < calls % threads else 0) for i in range(threads)]
    done = [0] * threads
    bad = [0] * threads
    mixed = [0] * threads
    regress = [0] * threads
    seen: list[set] = [set() for _ in range(threads)]
    logs: list[list] = [[] for _ in range(threads)]
    sizes = (4096, 32768, 32769, 1 << 20, 8 << 20, 128 << 20)
    start = threading.Barrier(threads + 1)

    def invoker(tid: int):
        rng = random.Random(seed * 1000 + tid)
        last = -1
        log = logs[tid]
        start.wait()
        for _ in range(per_thread[tid]):
            size = sizes[rng.randrange(len(sizes))]
            res = engine.invoke_tuner(1 + tid, Collective.ALLREDUCE, size, 8)
            d = res.decision
            if not (isinstance(d.algorithm, Algorithm) and isinstance(d.protocol, Protocol)
                    and 1 <= d.n_channels <= engine.max_channels):
                bad[tid] += 1
            if res.generation < last:
                regress[tid] += 1
            last = res.generation
            log.append((res.generation, res.policy_name, size, int(d.algorithm),
                        int(d.protocol)))
            done[tid] += 1

    workers = [threading.Thread(target=invoker, args=(t,)) for t in range(threads)]
    for w in workers:
        w.start()
    swap_us = []
    rejected_ok = True
    t0 = time.perf_counter()
    start.wait()
    for k in range(swaps):
        # spread swaps evenly over the run
        target = (k + 1) * calls // (swaps + 1)
        while sum(done) < target and any(w.is_alive() for w in workers):
            time.sleep(0.0002)
        if k == swaps // 2:
            probe_before = engine.invoke_tuner(99, Collective.ALLREDUCE, 1 << 20, 8)
            rep = reload(engine, Hook.TUNER, bad_source)
            probe_after = engine.invoke_tuner(99, Collective.ALLREDUCE, 1 << 20, 8)
            rejected_ok = (rep.outcome is Outcome.REJECTED
                           and probe_after.generation == probe_before.generation
                           and probe_after.decision == probe_before.decision)
        rep = reload(engine, Hook.TUNER, sources[(k + 1) % 2])
        if not rep.ok:
            raise ValueError(rep.error)
        gen_program[rep.generation] = slot.program.name
        swap_us.append(rep.swap_us)
    for w in workers:
        w.join()
    elapsed = time.perf_counter() - t0

    for tid, log in enumerate(logs):
        for gen, name, size, algo, proto in log:
            seen[tid].add(gen)
            if gen_program.get(gen) != name or _expected(name, size) != (algo, proto):
                mixed[tid] += 1
    return StressReport(
        calls=calls, completed=sum(done), swaps=swaps, threads=threads,
        invalid_decisions=sum(bad), mixed_generation=sum(mixed),
        monotonic_violations=sum(regress), drain_violations=slot.drain_violations,
        rejected_reload_ok=rejected_ok, generations_seen=len(set().union(*seen)),
        elapsed_s=elapsed, swap_us_p50=statistics.median(swap_us) if swap_us else 0.0,
        per_thread=list(done))
