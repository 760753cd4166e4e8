"""Swapping the active tuner while it is being called.

Four threads invoke the tuner continuously while the main thread keeps
replacing it. Halfway through, a reload of an unsafe program is refused and
the running policy carries on.
"""
from cclpol.corpus import corpus_path
from cclpol.host import Engine
from cclpol.isa import Hook
from cclpol.reload import measure_swap, reload, stress_reload

engine = Engine()
rep = stress_reload(engine, calls=100_000, swaps=200, threads=4)
print("\n".join(rep.lines()))
print()

before = engine.slots[Hook.TUNER].generation
bad = reload(engine, Hook.TUNER, corpus_path("unsafe/out_of_bounds.cclpol").read_text())
print(f"unsafe reload: {bad.outcome.value}, generation {before} -> "
      f"{engine.slots[Hook.TUNER].generation}")
print(f"  {bad.error}")

m = measure_swap(Engine(), 200, corpus_path("safe/size_aware_v2.cclpol").read_text())
print(f"swap window p50 {m['swap_us_p50']:.2f} us, whole reload p50 "
      f"{m['total_reload_ms_p50']:.2f} ms")
