import pytest
from hypothesis import given, settings, strategies as st

from cclpol.isa import (ALU_OPS, COND_JUMPS, Hook, Instruction, MapDescriptor, MapKind, Op,
                        ParseError, Program, assemble, disassemble, load_file)

from conftest import policy_path


def test_single_exit():
    p = assemble("exit")
    assert p.instructions == (Instruction(Op.EXIT),)
    assert p.hook is Hook.TUNER


def test_tuner_has_one_latency_map_slot():
    p = load_file(policy_path("size_aware_adaptive"))
    loads = [i for i in p.instructions if i.op is Op.LD_MAP]
    assert len(loads) == 1
    assert p.map_slots[loads[0].imm] == "latency_map"


def test_undefined_label_names_it():
    with pytest.raises(ParseError, match="nowhere"):
        assemble("ja nowhere\nexit")


@pytest.mark.parametrize("src, fragment", [
    ("", "no instructions"),
    ("a:\na:\nexit", "duplicate"),
    ("mov r11, 1\nexit", "register"),
    ("add r1, 0x1ffffffff\nexit", "32 bits"),
    ("ldxw r1, [r2+40000]\nexit", "16 bits"),
    ("ld_map r1, nope\nexit", "undeclared"),
    ("frob r1\nexit", "mnemonic"),
    (".hook sideways\nexit", "hook"),
])
def test_parse_errors(src, fragment):
    with pytest.raises(ParseError, match=fragment):
        assemble(src)


def test_parse_error_carries_position():
    with pytest.raises(ParseError) as info:
        assemble("mov r0, 0\n  frob r1\nexit")
    assert info.value.line == 2


def test_disassemble_exit():
    assert disassemble(Program("policy", Hook.TUNER, (Instruction(Op.EXIT),))) == "exit"


def test_corpus_round_trip(manifest):
    for e in manifest:
        p = load_file(e.path)
        again = assemble(disassemble(p))
        assert again == p, e.name


def test_imm_hex_wraps_to_signed():
    p = assemble("mov r0, 0xffffffff\nexit")
    assert p.instructions[0].imm == -1


# -- generated round trip ----------------------------------------------------------

regs = st.integers(0, 10)
imm32 = st.integers(-(1 << 31), (1 << 31) - 1)
off16 = st.integers(-(1 << 15), (1 << 15) - 1)
widths = st.sampled_from([1, 2, 4, 8])
ALU = sorted(ALU_OPS, key=lambda o: o.value)
CJ = sorted(COND_JUMPS, key=lambda o: o.value)

MAPS = (MapDescriptor("m0", MapKind.HASH, 4, 16, 8), MapDescriptor("m1", MapKind.ARRAY, 4, 8, 4))


@st.composite
def instruction(draw, pc: int, n: int):
    kind = draw(st.sampled_from(["alu", "neg", "ja", "jcc", "ldx", "stx", "st", "call",
                                 "ld_map", "exit"]))
    tgt = draw(st.integers(0, n - 1))
    jo = tgt - (pc + 1)
    if kind == "alu":
        op = draw(st.sampled_from(ALU))
        if draw(st.booleans()):
            return Instruction(op, dst=draw(regs), src=draw(regs), reg_src=True)
        return Instruction(op, dst=draw(regs), imm=draw(imm32))
    if kind == "neg":
        return Instruction(Op.NEG, dst=draw(regs))
    if kind == "ja":
        return Instruction(Op.JA, offset=jo)
    if kind == "jcc":
        op = draw(st.sampled_from(CJ))
        if draw(st.booleans()):
            return Instruction(op, dst=draw(regs), src=draw(regs), offset=jo, reg_src=True)
        return Instruction(op, dst=draw(regs), imm=draw(imm32), offset=jo)
    if kind == "ldx":
        return Instruction(Op.LDX, dst=draw(regs), src=draw(regs), offset=draw(off16),
                           width=draw(widths), reg_src=True)
    if kind == "stx":
        return Instruction(Op.STX, dst=draw(regs), src=draw(regs), offset=draw(off16),
                           width=draw(widths), reg_src=True)
    if kind == "st":
        return Instruction(Op.ST, dst=draw(regs), offset=draw(off16), imm=draw(imm32),
                           width=draw(widths))
    if kind == "call":
        return Instruction(Op.CALL, imm=draw(st.integers(0, 200)))
    if kind == "ld_map":
        return Instruction(Op.LD_MAP, dst=draw(regs), imm=draw(st.integers(0, len(MAPS) - 1)))
    return Instruction(Op.EXIT)


@st.composite
def programs(draw):
    n = draw(st.integers(1, 24))
    insns = tuple(draw(instruction(pc, n)) for pc in range(n))
    hook = draw(st.sampled_from(list(Hook)))
    name = draw(st.from_regex(r"[a-z][a-z0-9_]{0,10}", fullmatch=True))
    return Program(name, hook, insns, MAPS)


@settings(max_examples=200, deadline=None)
@given(programs())
def test_generated_round_trip(p):
    assert assemble(disassemble(p)) == p
