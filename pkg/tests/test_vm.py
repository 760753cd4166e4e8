import random
import struct

import pytest

from cclpol.context import (Algorithm, Collective, Protocol, UNSET32, layout_for, pack_profiler,
                            pack_tuner, unpack_tuner_outputs)
from cclpol.corpus import corpus_path
from cclpol.host import derive_comm_id
from cclpol.isa import Op, assemble, load_file
from cclpol.maps import MapRegistry
from cclpol.verifier import verify
from cclpol.vm import (EngineBug, ExecutionEnv, Mode, SafetyFault, alu64, compare, execute,
                       execute_checked_fuzz, prepare, random_context, random_maps,
                       verified_prepare)

M64 = (1 << 64) - 1
MIN = 1 << 63
MAX = MIN - 1
EDGES = (0, 1, M64, MIN, MAX, 63, 64, 65)

BINARY = """.hook profiler
    ldxdw r0, [r1+8]
    ldxdw r2, [r1+24]
    jeq r2, 0, out
    {op} r0, r2
out:
    exit
"""


def run_both(prog, ctx: bytes, registry_factory=MapRegistry):
    v = verify(prog)
    assert v.accepted, v.message
    a, b = bytearray(ctx), bytearray(ctx)
    ra, rb = registry_factory(), registry_factory()
    fast = prepare(prog, ra, verdict=v).run(a)
    checked = execute(prog, ExecutionEnv(b, rb, mode=Mode.CHECKED))
    assert fast == checked and a == b and ra.dump() == rb.dump()
    return fast, a, ra


@pytest.mark.parametrize("op", [Op.ADD, Op.SUB, Op.MUL, Op.DIV, Op.MOD, Op.AND, Op.OR, Op.XOR,
                                Op.LSH, Op.RSH, Op.ARSH])
def test_alu_edges(op):
    prog = assemble(BINARY.format(op=op.value))
    for x in EDGES:
        for y in EDGES:
            r0, _, _ = run_both(prog, pack_profiler(0, x, 0, 0, y))
            assert r0 == (x if y == 0 else alu64(op, x, y)), (x, y)


def test_alu_reference_values():
    assert alu64(Op.ADD, M64, 1) == 0
    assert alu64(Op.SUB, 0, 1) == M64
    assert alu64(Op.MUL, MIN, 2) == 0
    assert alu64(Op.LSH, 1, 64) == 1          # shift amount masked to 6 bits
    assert alu64(Op.RSH, MIN, 127) == 1
    assert alu64(Op.ARSH, MIN, 63) == M64
    assert alu64(Op.DIV, M64, 2) == MAX


def test_neg_and_imm_sign_extension():
    prog = assemble(".hook profiler\n    ldxdw r0, [r1+8]\n    neg r0\n    add r0, -1\n    exit")
    for x in EDGES:
        r0, _, _ = run_both(prog, pack_profiler(0, x, 0, 0, 0))
        assert r0 == ((-x) - 1) & M64


@pytest.mark.parametrize("op", [Op.JEQ, Op.JNE, Op.JGT, Op.JGE, Op.JLT, Op.JLE, Op.JSGT,
                                Op.JSGE, Op.JSLT, Op.JSLE])
def test_compare_edges(op):
    prog = assemble(f""".hook profiler
    ldxdw r2, [r1+8]
    ldxdw r3, [r1+24]
    mov r0, 1
    {op.value} r2, r3, out
    mov r0, 0
out:
    exit
""")
    for x in EDGES:
        for y in EDGES:
            r0, _, _ = run_both(prog, pack_profiler(0, x, 0, 0, y))
            assert r0 == int(compare(op, x, y))
    assert compare(Op.JSLT, M64, 0) and not compare(Op.JLT, M64, 0)


def test_differential_fast_vs_checked(safe_programs):
    for p in safe_programs:
        v = verify(p)
        layout = layout_for(p.hook)
        for t in range(1000):
            ra, rb = random.Random(t), random.Random(t)
            rega, regb = random_maps(p, ra), random_maps(p, rb)
            ca, cb = random_context(layout, ra), random_context(layout, rb)
            fast = prepare(p, rega, verdict=v).run(ca)
            checked = execute(p, ExecutionEnv(cb, regb, mode=Mode.CHECKED))
            assert (fast, ca, rega.dump()) == (checked, cb, regb.dump()), (p.name, t)


# -- the tuner/profiler pair ---------------------------------------------------------

COMM = derive_comm_id(1)
STATE = struct.Struct("<QI4xQQ")   # avg_latency_ns, channels, samples, last_adjust


def tuner_case(tuner, msg_size, entry):
    def registry():
        reg = MapRegistry()
        m = reg.resolve(tuner)[0]
        if entry is not None:
            m.update(COMM.to_bytes(4, "little"), STATE.pack(*entry))
        return reg
    r0, ctx, _ = run_both(tuner, pack_tuner(Collective.ALLREDUCE, msg_size, 8, COMM), registry)
    return r0, unpack_tuner_outputs(ctx)


def test_tree_small_message(tuner):
    assert tuner_case(tuner, 16384, (500_000, 4, 1, 0)) == (
        0, (Algorithm.TREE, Protocol.SIMPLE, 4))


def test_tree_boundary(tuner):
    assert tuner_case(tuner, 32 * 1024, (0, 4, 1, 0))[1][0] == Algorithm.TREE
    assert tuner_case(tuner, 32 * 1024 + 1, (0, 4, 1, 0))[1][0] == Algorithm.RING


def test_ring_and_widen_on_high_latency(tuner):
    assert tuner_case(tuner, 1 << 20, (2_000_000, 4, 1, 0)) == (
        0, (Algorithm.RING, Protocol.SIMPLE, 5))


def test_no_widen_at_threshold(tuner):
    assert tuner_case(tuner, 1 << 20, (1_000_000, 4, 1, 0))[1][2] == 4


def test_absent_entry(tuner):
    assert tuner_case(tuner, 1 << 20, None) == (0, (UNSET32, UNSET32, 4))


def test_channel_cap(tuner):
    assert tuner_case(tuner, 1 << 20, (2_000_000, 16, 1, 0))[1][2] == 16


def _profile(profiler, entry):
    def registry():
        reg = MapRegistry()
        if entry is not None:
            reg.resolve(profiler)[0].update(COMM.to_bytes(4, "little"), STATE.pack(*entry))
        return reg
    return run_both(profiler, pack_profiler(COMM, 1_500_000, 6, 0, 1 << 20), registry)


def test_profiler_records_sample(profiler):
    r0, _, reg = _profile(profiler, (0, 4, 9, 0))
    assert r0 == 0
    v = reg["latency_map"].lookup(COMM.to_bytes(4, "little"))
    assert STATE.unpack(v) == (1_500_000, 6, 10, 0)


def test_profiler_absent_entry_is_noop(profiler):
    r0, _, reg = _profile(profiler, None)
    assert r0 == 0 and len(reg["latency_map"]) == 0


def test_closed_loop_through_shared_map(tuner, profiler):
    reg = MapRegistry()
    t = verified_prepare(tuner, reg)
    p = verified_prepare(profiler, reg)
    reg["latency_map"].update(COMM.to_bytes(4, "little"), STATE.pack(0, 4, 0, 0))
    p.run(pack_profiler(COMM, 3_000_000, 4, 0, 1 << 20))
    ctx = pack_tuner(Collective.ALLREDUCE, 1 << 20, 8, COMM)
    t.run(ctx)
    assert unpack_tuner_outputs(ctx)[2] == 5


# -- fuzzing and the oracle ------------------------------------------------------------

def test_noop_single_trial():
    assert execute_checked_fuzz(load_file(corpus_path("safe/noop.cclpol")), 1, 0) == 0


def test_oracle_catches_null_deref():
    prog = load_file(corpus_path("unsafe/null_deref.cclpol"))
    with pytest.raises(SafetyFault):
        execute(prog, ExecutionEnv(pack_profiler(5, 1, 1, 0, 1), MapRegistry(), mode=Mode.CHECKED))
    assert execute_checked_fuzz(prog, 50, 0) >= 1


def test_oracle_catches_unbounded_stack():
    prog = load_file(corpus_path("unsafe/stack_overflow.cclpol"))
    assert execute_checked_fuzz(prog, 5, 0) >= 1


def test_verified_prepare_rejects():
    with pytest.raises(ValueError, match="map_value_or_null"):
        verified_prepare(load_file(corpus_path("unsafe/null_deref.cclpol")), MapRegistry())


def test_fast_mode_trap_is_engine_bug():
    # bypass the verifier: unchecked dereference of a missing entry
    prog = load_file(corpus_path("unsafe/null_deref.cclpol"))
    fast = prepare(prog, MapRegistry())
    with pytest.raises(EngineBug):
        fast.run(pack_profiler(5, 1, 1, 0, 1))


def test_deterministic_outputs(tuner):
    outs = {tuner_case(tuner, 1 << 20, (2_000_000, 4, 1, 0)) for _ in range(3)}
    assert len(outs) == 1
