"""Load-time checking of policy programs.

Assemble a program, run the verifier, and read its diagnostics. The
profiler below is shipped in two forms: one checks the lookup result for
NULL, one does not.
"""
from cclpol.corpus import corpus_path
from cclpol.isa import disassemble, load_file
from cclpol.verifier import explain, verify

good = load_file(corpus_path("safe/record_latency.cclpol"))
bad = load_file(corpus_path("unsafe/null_deref.cclpol"))

print(disassemble(bad))
print()

# the checked version passes, the other is stopped before it can run
print(explain(verify(good)))
print(explain(verify(bad)))
print()

# every unsafe corpus program fails for its own reason
for name in ("out_of_bounds", "illegal_helper", "stack_overflow", "unbounded_loop",
             "input_field_write", "unsafe_div"):
    v = verify(load_file(corpus_path(f"unsafe/{name}.cclpol")))
    print(f"{name:18} {v.rejection_class.name:18} {v.message}")
