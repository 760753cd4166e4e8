"""A tuner and a profiler sharing one map.

The profiler writes each communicator's observed latency into
``latency_map``; the tuner reads it back on the next collective and widens
the channel count while latency stays above 1 ms.
"""
import struct

from cclpol.context import Collective
from cclpol.corpus import corpus_path
from cclpol.host import Engine, derive_comm_id
from cclpol.isa import Hook

MiB = 1 << 20

engine = Engine()
engine.load("policies/size_aware_adaptive.cclpol")
engine.load(corpus_path("safe/record_latency.cclpol"))
print("tuner:", engine.active(Hook.TUNER), " profiler:", engine.active(Hook.PROFILER))

comm = 0x7F3A10002000
key = derive_comm_id(comm).to_bytes(4, "little")

# no state yet: the tuner only asks for 4 channels and leaves the rest to the host
print(engine.invoke_tuner(comm, Collective.ALLREDUCE, 64 * MiB, 8).decision.label())

# seed the communicator's entry, then let the profiler report slow collectives
engine.registry["latency_map"].update(key, struct.pack("<QI4xQQ", 0, 4, 0, 0))
for _ in range(6):
    r = engine.run_collective(comm, Collective.ALLREDUCE, 64 * MiB, 8, latency_multiplier=10)
    print(f"{r.decision.label():22} modeled {r.latency_ns / 1e3:7.1f} us")

# small messages take the tree branch
print(engine.invoke_tuner(comm, Collective.ALLREDUCE, 16 * 1024, 8).decision.label())
