"""What a policy costs per call.

Times the benchmark ladder (policies with 0, 1 or 2 lookups and 0 or 1
updates) against a native Python version of the size-aware logic, then fits
the per-helper costs. Absolute numbers belong to this interpreter, not to a
JIT.
"""
from cclpol.bench import format_table1, run_table1
from cclpol.host import count_net_bytes, measure_net_overhead, net_counters

native, rows, fit = run_table1(calls=200_000)
print(format_table1(native, rows, fit))
print()

engine, moved = count_net_bytes(transfers=1000, payload_size=4096, connections=2)
print(f"net hook: moved {moved} bytes, counted {net_counters(engine)}")
o = measure_net_overhead()
print(f"wrapped {o['wrapped_us_per_transfer']:.1f} us vs plain {o['plain_us_per_transfer']:.1f} us "
      f"per 4 KiB transfer ({o['overhead_pct']:+.1f}%)")
