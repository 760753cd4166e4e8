"""Policies evaluated against the analytic bandwidth model.

A Ring/LL128 policy for mid-size messages, a deliberately bad one-channel
policy that the verifier still accepts, and the adaptive channel scenario
with and without its profiler.
"""
import numpy as np

from cclpol.host import Engine, format_sweep, load_scenario, phases, run_scenario, sweep

print(format_sweep(sweep(policy="policies/nvlink_ring_mid_v2.cclpol"), "nvlink_ring_mid_v2"))
print()

rows = sweep(policy="policies/bad_channels.cclpol")
loss = [100 * (1 - r.policy_gbps / r.default_gbps) for r in rows]
print(f"bad_channels: {min(loss):.1f}-{max(loss):.1f}% below the default")
print()

for name in ("adaptive_three_phase", "adaptive_no_profiler"):
    spec = load_scenario(f"scenarios/{name}")
    spec.calls = 300_000
    trace = run_scenario(Engine(), spec)
    print(name)
    for p in phases(trace, spec):
        print("  " + p.line())
    # channel count every 25k calls
    print("  ", np.asarray(trace.channels[::25_000]).tolist())
