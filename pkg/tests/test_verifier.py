import pytest

from cclpol.corpus import corpus_path
from cclpol.isa import assemble, load_file
from cclpol.verifier import RejectClass, VerifierConfig, explain, verify


def _unsafe(name):
    return verify(load_file(corpus_path(f"unsafe/{name}.cclpol")))


def test_profiler_with_null_check_accepted(profiler):
    assert verify(profiler).accepted


def test_null_check_removed():
    v = _unsafe("null_deref")
    assert v.rejection_class is RejectClass.NULL_DEREF
    assert "map_value_or_null" in v.message
    text = explain(v)
    assert text.startswith("VERIFIER REJECT:")
    assert "at insn 7" in text


def test_input_field_write():
    v = verify(assemble("stw [r1+8], 0\nmov r0, 0\nexit"))
    assert v.rejection_class is RejectClass.INPUT_FIELD_WRITE
    assert "msg_size" in v.message


def test_output_field_write_allowed():
    assert verify(assemble("stw [r1+24], 1\nstw [r1+32], 8\nmov r0, 0\nexit")).accepted


@pytest.mark.parametrize("name, cls", [
    ("out_of_bounds", RejectClass.OUT_OF_BOUNDS),
    ("illegal_helper", RejectClass.ILLEGAL_HELPER),
    ("stack_overflow", RejectClass.STACK_OVERFLOW),
    ("unbounded_loop", RejectClass.UNBOUNDED_LOOP),
    ("input_field_write", RejectClass.INPUT_FIELD_WRITE),
    ("unsafe_div", RejectClass.DIV_BY_ZERO),
])
def test_unsafe_corpus_classes(name, cls):
    v = _unsafe(name)
    assert not v.accepted and v.rejection_class is cls


def test_stack_overflow_names_interval():
    text = explain(_unsafe("stack_overflow"))
    assert "-520" in text and "512" in text


def test_stack_read_above_frame_names_interval():
    v = verify(assemble("ldxdw r0, [r10+0]\nexit"))
    assert v.rejection_class in (RejectClass.OUT_OF_BOUNDS, RejectClass.STACK_OVERFLOW)
    assert "[0,8)" in explain(v)


def test_illegal_helper_names_id_and_whitelist():
    text = explain(_unsafe("illegal_helper"))
    assert "99" in text and "{1, 2, 6}" in text


def test_div_by_register_range():
    v = verify(assemble("ldxw r0, [r1+16]\nmov r3, 7\nmod r3, r0\nmov r0, 0\nexit"))
    assert v.rejection_class is RejectClass.DIV_BY_ZERO


def test_div_after_zero_check_accepted():
    src = "ldxw r2, [r1+16]\nmov r0, 100\njeq r2, 0, out\ndiv r0, r2\nout:\nmov r0, 0\nexit"
    assert verify(assemble(src)).accepted


@pytest.mark.parametrize("src", [
    "mov r0, 0",                 # falls off the end
    "ja +5\nexit",               # jump out of range
    "mov r10, 0\nexit",          # frame pointer is read only
    "exit",                      # r0 never written
    "mov r0, r2\nexit",          # uninitialised register
    "ldxdw r0, [r10-8]\nexit",   # uninitialised stack
    "mov r0, r10\nexit",         # pointer returned
])
def test_malformed(src):
    v = verify(assemble(src))
    assert v.rejection_class is RejectClass.MALFORMED


REFINE = """.map a array key=4 value=64 entries=4
    stw [r10-4], 0
    ld_map r1, a
    mov r2, r10
    add r2, -4
    call 1
    jeq r0, 0, out
    ldxdw r3, [r0+0]
    jgt r3, {bound}, out
    add r0, r3
    ldxdw r4, [r0+0]
out:
    mov r0, 0
    exit
"""


def test_branch_refinement_bounds_index():
    assert verify(assemble(REFINE.format(bound=56))).accepted
    v = verify(assemble(REFINE.format(bound=57)))
    assert v.rejection_class is RejectClass.OUT_OF_BOUNDS
    assert "[0,65)" in v.message


def test_bounded_loop_accepted_and_limit_respected():
    src = "mov r0, 0\nmov r1, 0\nl:\nadd r1, 1\njlt r1, 100, l\nexit"
    assert verify(assemble(src)).accepted
    v = verify(assemble(src), VerifierConfig(max_loop_iterations=50))
    assert v.rejection_class is RejectClass.UNBOUNDED_LOOP


def test_instruction_budget():
    src = "mov r0, 0\nmov r1, 0\nl:\nadd r1, 1\njlt r1, 1000, l\nexit"
    v = verify(assemble(src), VerifierConfig(max_total_instructions=500))
    assert not v.accepted


def test_smaller_stack_limit():
    v = verify(assemble("stdw [r10-64], 0\nmov r0, 0\nexit"), VerifierConfig(max_stack=32))
    assert v.rejection_class is RejectClass.STACK_OVERFLOW


def test_helper_whitelist_configurable():
    prog = load_file(corpus_path("safe/lookup_only.cclpol"))
    v = verify(prog, VerifierConfig(allowed_helpers={}))
    assert v.rejection_class is RejectClass.ILLEGAL_HELPER


def test_deterministic(manifest):
    for e in manifest:
        p = load_file(e.path)
        a, b = verify(p), verify(p)
        assert a == b
        assert a.sites == b.sites
        if not a.accepted:
            assert explain(a) == explain(b)


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        VerifierConfig(max_stack=0)
