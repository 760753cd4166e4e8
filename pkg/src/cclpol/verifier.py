"""Load-time verifier.

Every path through the program is explored with an abstract register and
stack state. Scalars carry signed and unsigned 64-bit intervals; pointers
carry their region (context, stack, map value) and an offset interval.
Branches refine both. Identical states reached twice are explored once, and
loops are unrolled until their exit condition is decided or the per-edge
iteration limit runs out.

Rejections map onto a fixed set of classes (see :class:`RejectClass`).
Reading an uninitialised register or stack byte, falling off the end and
similar structural problems are all reported as MALFORMED.
"""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace

from .context import ContextLayout, layout_for
from .isa import (ALU_OPS, COND_JUMPS, FRAME_REG, NUM_REGS, Hook, Instruction, Op, Program,
                  WIDTH_SUFFIX)

U64 = 1 << 64
U64_MAX = U64 - 1
S64_MIN = -(1 << 63)
S64_MAX = (1 << 63) - 1

HELPER_MAP_LOOKUP = 1
HELPER_MAP_UPDATE = 2
HELPER_MAP_DELETE = 3
HELPER_TRACE_LOG = 6

HELPER_NAMES = {
    HELPER_MAP_LOOKUP: "map_lookup_elem",
    HELPER_MAP_UPDATE: "map_update_elem",
    HELPER_MAP_DELETE: "map_delete_elem",
    HELPER_TRACE_LOG: "trace_log",
}

DEFAULT_HELPERS = {
    Hook.TUNER: frozenset({HELPER_MAP_LOOKUP, HELPER_MAP_UPDATE, HELPER_TRACE_LOG}),
    Hook.PROFILER: frozenset({HELPER_MAP_LOOKUP, HELPER_MAP_UPDATE, HELPER_MAP_DELETE,
                              HELPER_TRACE_LOG}),
    Hook.NET_TX: frozenset({HELPER_MAP_LOOKUP, HELPER_MAP_UPDATE, HELPER_TRACE_LOG}),
    Hook.NET_RX: frozenset({HELPER_MAP_LOOKUP, HELPER_MAP_UPDATE, HELPER_TRACE_LOG}),
}


class RejectClass(enum.Enum):
    NULL_DEREF = "NULL_DEREF"
    OUT_OF_BOUNDS = "OUT_OF_BOUNDS"
    ILLEGAL_HELPER = "ILLEGAL_HELPER"
    STACK_OVERFLOW = "STACK_OVERFLOW"
    UNBOUNDED_LOOP = "UNBOUNDED_LOOP"
    INPUT_FIELD_WRITE = "INPUT_FIELD_WRITE"
    DIV_BY_ZERO = "DIV_BY_ZERO"
    MALFORMED = "MALFORMED"


class VClass(enum.Enum):
    SCALAR = "scalar"
    CTX_REF = "ctx"
    MAP_VALUE_REF = "map_value"
    MAP_VALUE_OR_NULL = "map_value_or_null"
    STACK_REF = "fp"
    MAP_HANDLE = "map_ptr"
    UNINIT = "uninit"


POINTERS = frozenset({VClass.CTX_REF, VClass.MAP_VALUE_REF, VClass.STACK_REF})


@dataclass(frozen=True)
class AbstractValue:
    cls: VClass
    smin: int = 0
    smax: int = 0
    umin: int = 0
    umax: int = 0
    off_lo: int = 0
    off_hi: int = 0
    region_size: int = 0
    map: str | None = None
    ref_id: int = 0
    origin: int = -1  # pc of the lookup that produced a map value pointer

    @property
    def range(self) -> tuple[int, int]:
        return self.smin, self.smax

    @property
    def offset_range(self) -> tuple[int, int]:
        return self.off_lo, self.off_hi

    @property
    def is_const(self) -> bool:
        return self.cls is VClass.SCALAR and self.umin == self.umax

    def describe(self) -> str:
        c = self.cls
        if c is VClass.UNINIT:
            return "uninit"
        if c is VClass.SCALAR:
            if self.is_const:
                return f"scalar({self.smin})"
            return f"scalar(s=[{self.smin},{self.smax}] u=[{self.umin},{self.umax}])"
        if c is VClass.MAP_HANDLE:
            return f"map_ptr({self.map})"
        off = (f"{self.off_lo:+d}" if self.off_lo == self.off_hi
               else f"[{self.off_lo},{self.off_hi}]")
        if c is VClass.CTX_REF:
            return f"ctx{off}"
        if c is VClass.STACK_REF:
            return f"fp{off}"
        return f"{c.value}({self.map},size={self.region_size},off={off},id={self.ref_id})"


UNINIT = AbstractValue(VClass.UNINIT)


def scalar(smin=S64_MIN, smax=S64_MAX, umin=0, umax=U64_MAX) -> AbstractValue | None:
    """Build a normalised scalar; None if the constraints are unsatisfiable."""
    for _ in range(2):
        if smin > smax or umin > umax:
            return None
        if smin >= 0:
            umin, umax = max(umin, smin), min(umax, smax)
            smin, smax = umin, umax
        elif smax < 0:
            umin, umax = max(umin, smin + U64), min(umax, smax + U64)
            smin, smax = umin - U64, umax - U64
        elif umax <= S64_MAX:
            smin, smax = max(smin, umin), min(smax, umax)
            umin, umax = smin, smax
        elif umin > S64_MAX:
            smin, smax = max(smin, umin - U64), min(smax, umax - U64)
            umin, umax = smin + U64, smax + U64
    if smin > smax or umin > umax:
        return None
    return AbstractValue(VClass.SCALAR, smin, smax, umin, umax)


def const(v: int) -> AbstractValue:
    v &= U64_MAX
    s = v - U64 if v > S64_MAX else v
    return AbstractValue(VClass.SCALAR, s, s, v, v)


UNKNOWN = scalar()


def width_scalar(width: int) -> AbstractValue:
    if width == 8:
        return UNKNOWN
    return scalar(0, (1 << (8 * width)) - 1)


@dataclass(frozen=True)
class VerifierConfig:
    max_stack: int = 512
    max_total_instructions: int = 1_000_000
    max_loop_iterations: int = 4096
    allowed_helpers: dict = field(default_factory=lambda: dict(DEFAULT_HELPERS))

    def __post_init__(self):
        if min(self.max_stack, self.max_total_instructions, self.max_loop_iterations) <= 0:
            raise ValueError("verifier limits must be positive")

    def helpers_for(self, hook: Hook) -> frozenset:
        return frozenset(self.allowed_helpers.get(hook, ()))


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    rejection_class: RejectClass | None = None
    message: str = ""
    insn: int | None = None
    reg: int | None = None
    state: str = ""
    detail: dict = field(default_factory=dict, compare=False)
    analyzed_insns: int = field(default=0, compare=False)
    elapsed_ms: float = field(default=0.0, compare=False)
    # pc -> fact that held on every analyzed path (accepted programs only);
    # used by the VM to specialise generated code
    sites: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.accepted == (self.rejection_class is not None):
            raise ValueError("a verdict is either accepted or carries a rejection class")

    def __bool__(self):
        return self.accepted


class _Reject(Exception):
    def __init__(self, cls: RejectClass, pc: int, message: str, reg: int | None = None,
                 **detail):
        super().__init__(message)
        self.cls = cls
        self.pc = pc
        self.message = message
        self.reg = reg
        self.detail = detail


class _State:
    __slots__ = ("regs", "stack_init", "spills", "loops")

    def __init__(self, regs, stack_init, spills, loops):
        self.regs = regs
        self.stack_init = stack_init
        self.spills = spills
        self.loops = loops

    def copy(self) -> _State:
        return _State(list(self.regs), bytearray(self.stack_init), dict(self.spills),
                      dict(self.loops))

    def key(self, pc):
        return (pc, tuple(self.regs), bytes(self.stack_init),
                tuple(sorted(self.spills.items())), tuple(sorted(self.loops.items())))

    def summary(self) -> str:
        parts = [f"r{i}={v.describe()}" for i, v in enumerate(self.regs)
                 if v.cls is not VClass.UNINIT]
        return " ".join(parts)


def _signed(v: int) -> int:
    v &= U64_MAX
    return v - U64 if v > S64_MAX else v


def _bitlen_mask(v: int) -> int:
    return (1 << v.bit_length()) - 1


# -- scalar transfer functions ------------------------------------------------

def _const_alu(op: Op, a: int, b: int) -> int:
    a &= U64_MAX
    b &= U64_MAX
    if op is Op.ADD:
        return a + b
    if op is Op.SUB:
        return a - b
    if op is Op.MUL:
        return a * b
    if op is Op.DIV:
        return a // b
    if op is Op.MOD:
        return a % b
    if op is Op.AND:
        return a & b
    if op is Op.OR:
        return a | b
    if op is Op.XOR:
        return a ^ b
    if op is Op.LSH:
        return a << (b & 63)
    if op is Op.RSH:
        return a >> (b & 63)
    if op is Op.ARSH:
        return _signed(a) >> (b & 63)
    raise AssertionError(op)


def scalar_alu(op: Op, a: AbstractValue, b: AbstractValue) -> AbstractValue:
    """Abstract result of ``a <op> b`` for two scalars (divisor assumed non-zero)."""
    if op is Op.MOV:
        return b
    if a.is_const and b.is_const:
        return const(_const_alu(op, a.umin, b.umin))
    if op is Op.ADD:
        smin, smax = a.smin + b.smin, a.smax + b.smax
        if smin < S64_MIN or smax > S64_MAX:
            smin, smax = S64_MIN, S64_MAX
        umin, umax = a.umin + b.umin, a.umax + b.umax
        if umax > U64_MAX:
            umin, umax = 0, U64_MAX
        return scalar(smin, smax, umin, umax) or UNKNOWN
    if op is Op.SUB:
        smin, smax = a.smin - b.smax, a.smax - b.smin
        if smin < S64_MIN or smax > S64_MAX:
            smin, smax = S64_MIN, S64_MAX
        if a.umin >= b.umax:
            umin, umax = a.umin - b.umax, a.umax - b.umin
        else:
            umin, umax = 0, U64_MAX
        return scalar(smin, smax, umin, umax) or UNKNOWN
    if op is Op.MUL:
        if a.umax * b.umax <= U64_MAX:
            return scalar(umin=a.umin * b.umin, umax=a.umax * b.umax) or UNKNOWN
        corners = [x * y for x in (a.smin, a.smax) for y in (b.smin, b.smax)]
        if min(corners) >= S64_MIN and max(corners) <= S64_MAX:
            return scalar(min(corners), max(corners)) or UNKNOWN
        return UNKNOWN
    if op is Op.DIV:
        lo_div = max(b.umin, 1)
        return scalar(umin=a.umin // b.umax, umax=a.umax // lo_div) or UNKNOWN
    if op is Op.MOD:
        return scalar(umin=0, umax=min(a.umax, b.umax - 1 if b.umax else 0)) or UNKNOWN
    if op is Op.AND:
        return scalar(umin=0, umax=min(a.umax, b.umax)) or UNKNOWN
    if op in (Op.OR, Op.XOR):
        hi = _bitlen_mask(max(a.umax, b.umax))
        lo = max(a.umin, b.umin) if op is Op.OR else 0
        return scalar(umin=lo, umax=hi) or UNKNOWN
    if op is Op.LSH:
        if b.is_const:
            k = b.umin & 63
            if a.umax << k <= U64_MAX:
                return scalar(umin=a.umin << k, umax=a.umax << k) or UNKNOWN
        return UNKNOWN
    if op is Op.RSH:
        if b.is_const:
            k = b.umin & 63
            return scalar(umin=a.umin >> k, umax=a.umax >> k) or UNKNOWN
        return scalar(umin=0, umax=a.umax) or UNKNOWN
    if op is Op.ARSH:
        if b.is_const:
            k = b.umin & 63
            return scalar(a.smin >> k, a.smax >> k) or UNKNOWN
        return scalar(min(a.smin, 0), max(a.smax, 0)) or UNKNOWN
    raise AssertionError(op)


def scalar_neg(a: AbstractValue) -> AbstractValue:
    if a.is_const:
        return const(-a.umin)
    if a.smin == S64_MIN:
        return UNKNOWN
    return scalar(-a.smax, -a.smin) or UNKNOWN


# -- branch refinement --------------------------------------------------------

def _refine_scalar(op: Op, a: AbstractValue, b: AbstractValue):
    """Return (a_if_taken, a_if_not_taken) for ``if a <op> b``; None = infeasible.

    ``b`` is only used through its bounds; ``a`` gets narrowed.
    """
    def mk(**kw):
        base = dict(smin=a.smin, smax=a.smax, umin=a.umin, umax=a.umax)
        for k, v in kw.items():
            if k in ("smin", "umin"):
                base[k] = max(base[k], v)
            else:
                base[k] = min(base[k], v)
        return scalar(**base)

    def exclude(v: int):
        # a != v, expressible only at interval edges
        v &= U64_MAX
        sv = _signed(v)
        kw = dict(smin=a.smin, smax=a.smax, umin=a.umin, umax=a.umax)
        if kw["umin"] == v:
            kw["umin"] += 1
        if kw["umax"] == v:
            kw["umax"] -= 1
        if kw["smin"] == sv:
            kw["smin"] += 1
        if kw["smax"] == sv:
            kw["smax"] -= 1
        return scalar(**kw)

    if op in (Op.JEQ, Op.JNE):
        if b.is_const:
            eq = mk(smin=b.smin, smax=b.smax, umin=b.umin, umax=b.umax)
            ne = exclude(b.umin)
        else:
            eq = mk(smin=b.smin, smax=b.smax, umin=b.umin, umax=b.umax)
            ne = a
        return (eq, ne) if op is Op.JEQ else (ne, eq)
    if op is Op.JGT:
        return (mk(umin=b.umin + 1), mk(umax=b.umax))
    if op is Op.JGE:
        return (mk(umin=b.umin), mk(umax=b.umax - 1))
    if op is Op.JLT:
        return (mk(umax=b.umax - 1), mk(umin=b.umin))
    if op is Op.JLE:
        return (mk(umax=b.umax), mk(umin=b.umin + 1))
    if op is Op.JSGT:
        return (mk(smin=b.smin + 1), mk(smax=b.smax))
    if op is Op.JSGE:
        return (mk(smin=b.smin), mk(smax=b.smax - 1))
    if op is Op.JSLT:
        return (mk(smax=b.smax - 1), mk(smin=b.smin))
    if op is Op.JSLE:
        return (mk(smax=b.smax), mk(smin=b.smin + 1))
    raise AssertionError(op)


def _decided(op: Op, a: AbstractValue, b: AbstractValue) -> bool | None:
    """Exact outcome when both sides are constants."""
    if not (a.is_const and b.is_const):
        return None
    x, y = a.umin, b.umin
    sx, sy = a.smin, b.smin
    return {
        Op.JEQ: x == y, Op.JNE: x != y, Op.JGT: x > y, Op.JGE: x >= y, Op.JLT: x < y,
        Op.JLE: x <= y, Op.JSGT: sx > sy, Op.JSGE: sx >= sy, Op.JSLT: sx < sy,
        Op.JSLE: sx <= sy,
    }[op]


_SWAP = {Op.JEQ: Op.JEQ, Op.JNE: Op.JNE, Op.JGT: Op.JLT, Op.JGE: Op.JLE, Op.JLT: Op.JGT,
         Op.JLE: Op.JGE, Op.JSGT: Op.JSLT, Op.JSGE: Op.JSLE, Op.JSLT: Op.JSGT,
         Op.JSLE: Op.JSGE}


# -- the analysis ---------------------------------------------------------------

class _Analysis:
    def __init__(self, program: Program, config: VerifierConfig, layout: ContextLayout):
        self.prog = program
        self.insns = program.instructions
        self.cfg = config
        self.layout = layout
        self.helpers = config.helpers_for(program.hook)
        self.maps = {m.name: m for m in program.maps}
        self.analyzed = 0
        self.next_ref = 1
        self.leaders = self._leaders()
        self.slot_of = {m.name: i for i, m in enumerate(program.maps)}
        self._sites: dict[int, set] = {}

    def note(self, pc: int, fact):
        self._sites.setdefault(pc, set()).add(fact)

    def stable_sites(self) -> tuple:
        """Facts that were identical on every path through their instruction."""
        return tuple(sorted((pc, next(iter(f))) for pc, f in self._sites.items()
                            if len(f) == 1 and None not in next(iter(f))))

    def _leaders(self) -> set[int]:
        out = {0}
        for pc, insn in enumerate(self.insns):
            if insn.is_jump:
                out.add(insn.target(pc))
        return out

    def structural(self):
        n = len(self.insns)
        if n == 0:
            raise _Reject(RejectClass.MALFORMED, 0, "empty program")
        for pc, insn in enumerate(self.insns):
            regs = [insn.dst] + ([insn.src] if insn.reg_src else [])
            for r in regs:
                if not 0 <= r < NUM_REGS:
                    raise _Reject(RejectClass.MALFORMED, pc, f"invalid register r{r} at insn {pc}")
            if insn.is_jump and not 0 <= insn.target(pc) < n:
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"jump out of range (target {insn.target(pc)}) at insn {pc}")
            if insn.op in (Op.LDX, Op.STX, Op.ST) and insn.width not in WIDTH_SUFFIX:
                raise _Reject(RejectClass.MALFORMED, pc, f"invalid access width {insn.width}")
            if insn.op is Op.LD_MAP and not 0 <= insn.imm < len(self.prog.maps):
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"ld_map references unknown map slot {insn.imm} at insn {pc}")

    def initial_state(self) -> _State:
        regs = [UNINIT] * NUM_REGS
        regs[1] = AbstractValue(VClass.CTX_REF, region_size=self.layout.size)
        regs[FRAME_REG] = AbstractValue(VClass.STACK_REF, region_size=self.cfg.max_stack)
        return _State(regs, bytearray(self.cfg.max_stack), {}, {})

    def run(self):
        self.structural()
        n = len(self.insns)
        seen: set = set()
        work = [(0, self.initial_state())]
        while work:
            pc, st = work.pop()
            while True:
                if pc == n:
                    raise _Reject(RejectClass.MALFORMED, n - 1,
                                  f"fall-through past end of program after insn {n - 1}")
                if pc in self.leaders:
                    k = st.key(pc)
                    if k in seen:
                        break
                    seen.add(k)
                self.analyzed += 1
                if self.analyzed > self.cfg.max_total_instructions:
                    raise _Reject(RejectClass.UNBOUNDED_LOOP, pc,
                                  f"analysis budget of {self.cfg.max_total_instructions} "
                                  f"instructions exhausted at insn {pc}",
                                  state=st.summary())
                succ = self.step(pc, st)
                if not succ:
                    break
                for extra in succ[1:]:
                    work.append(extra)
                pc, st = succ[0]

    # -- helpers for register access
    def read(self, st: _State, r: int, pc: int) -> AbstractValue:
        v = st.regs[r]
        if v.cls is VClass.UNINIT:
            raise _Reject(RejectClass.MALFORMED, pc, f"R{r} !read_ok: read of uninitialized "
                          f"register at insn {pc}", reg=r, state=st.summary())
        return v

    def write(self, st: _State, r: int, v: AbstractValue, pc: int):
        if r == FRAME_REG:
            raise _Reject(RejectClass.MALFORMED, pc, f"frame pointer R10 is read only at insn {pc}",
                          reg=r, state=st.summary())
        st.regs[r] = v

    # -- single instruction
    def step(self, pc: int, st: _State):
        insn = self.insns[pc]
        op = insn.op
        if op in ALU_OPS or op is Op.NEG:
            self.alu(pc, insn, st)
            return [(pc + 1, st)]
        if op is Op.LDX:
            v = self.access(pc, insn, st, insn.src, insn.offset, insn.width, store=False)
            self.write(st, insn.dst, v, pc)
            return [(pc + 1, st)]
        if op in (Op.STX, Op.ST):
            val = self.read(st, insn.src, pc) if op is Op.STX else const(insn.imm)
            self.access(pc, insn, st, insn.dst, insn.offset, insn.width, store=True, value=val)
            return [(pc + 1, st)]
        if op is Op.JA:
            return [self.edge(pc, insn.target(pc), st)]
        if op in COND_JUMPS:
            return self.branch(pc, insn, st)
        if op is Op.CALL:
            self.call(pc, insn, st)
            return [(pc + 1, st)]
        if op is Op.LD_MAP:
            m = self.prog.maps[insn.imm]
            self.write(st, insn.dst, AbstractValue(VClass.MAP_HANDLE, map=m.name,
                                                  region_size=m.value_size), pc)
            return [(pc + 1, st)]
        if op is Op.EXIT:
            r0 = st.regs[0]
            if r0.cls is VClass.UNINIT:
                raise _Reject(RejectClass.MALFORMED, pc, f"R0 !read_ok at exit (insn {pc})",
                              reg=0, state=st.summary())
            if r0.cls is not VClass.SCALAR:
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"R0 leaks a {r0.cls.value} pointer as return value at insn {pc}",
                              reg=0, state=st.summary())
            return []
        raise _Reject(RejectClass.MALFORMED, pc, f"unknown opcode {op} at insn {pc}")

    def edge(self, pc: int, target: int, st: _State):
        if target <= pc:
            count = st.loops.get(pc, 0) + 1
            if count > self.cfg.max_loop_iterations:
                raise _Reject(RejectClass.UNBOUNDED_LOOP, pc,
                              f"back-edge at insn {pc} -> {target} taken more than "
                              f"{self.cfg.max_loop_iterations} times; loop bound not provable",
                              state=st.summary())
            st.loops[pc] = count
        return (target, st)

    def alu(self, pc: int, insn: Instruction, st: _State):
        op, d = insn.op, insn.dst
        if op is Op.NEG:
            a = self.read(st, d, pc)
            if a.cls is not VClass.SCALAR:
                self.ptr_misuse(pc, d, a, st, "negation")
            self.write(st, d, scalar_neg(a), pc)
            return
        b = self.read(st, insn.src, pc) if insn.reg_src else const(insn.imm)
        if op is Op.MOV:
            self.write(st, d, b, pc)
            return
        a = self.read(st, d, pc)
        if op in (Op.DIV, Op.MOD):
            if a.cls is not VClass.SCALAR:
                self.ptr_misuse(pc, d, a, st, op.value)
            if b.cls is not VClass.SCALAR:
                self.ptr_misuse(pc, insn.src, b, st, op.value)
            if b.umin == 0:
                src = f"R{insn.src}" if insn.reg_src else "immediate"
                raise _Reject(RejectClass.DIV_BY_ZERO, pc,
                              f"{op.value} by {src} whose range u=[{b.umin},{b.umax}] "
                              f"includes 0 at insn {pc}",
                              reg=insn.src if insn.reg_src else None, state=st.summary(),
                              divisor=(b.umin, b.umax))
        if a.cls is VClass.SCALAR and b.cls is VClass.SCALAR:
            self.write(st, d, scalar_alu(op, a, b), pc)
            return
        # pointer arithmetic: ptr +/- scalar, scalar + ptr
        if op is Op.ADD and a.cls is VClass.SCALAR and b.cls in POINTERS:
            a, b = b, a
        elif a.cls not in POINTERS:
            bad_reg = d if a.cls is not VClass.SCALAR else insn.src
            self.ptr_misuse(pc, bad_reg, a if a.cls is not VClass.SCALAR else b, st, op.value)
        if b.cls is not VClass.SCALAR or op not in (Op.ADD, Op.SUB):
            bad = b if b.cls is not VClass.SCALAR else a
            self.ptr_misuse(pc, d, bad, st, op.value)
        if op is Op.ADD:
            lo, hi = a.off_lo + b.smin, a.off_hi + b.smax
        else:
            lo, hi = a.off_lo - b.smax, a.off_hi - b.smin
        self.write(st, d, replace(a, off_lo=lo, off_hi=hi), pc)

    def ptr_misuse(self, pc, reg, v: AbstractValue, st, what):
        if v.cls is VClass.MAP_VALUE_OR_NULL:
            raise _Reject(RejectClass.NULL_DEREF, pc,
                          f"R{reg} pointer arithmetic ({what}) on map_value_or_null prohibited; "
                          f"must check != NULL first at insn {pc}", reg=reg, state=st.summary())
        raise _Reject(RejectClass.MALFORMED, pc,
                      f"R{reg} {what} on {v.cls.value} pointer prohibited at insn {pc}",
                      reg=reg, state=st.summary())

    # -- memory
    def access(self, pc, insn, st: _State, base_reg: int, off: int, width: int, store: bool,
               value: AbstractValue | None = None) -> AbstractValue | None:
        base = self.read(st, base_reg, pc)
        verb = "write" if store else "read"
        cls = base.cls
        if cls is VClass.MAP_VALUE_OR_NULL:
            raise _Reject(RejectClass.NULL_DEREF, pc,
                          f"R{base_reg} is a pointer to map_value_or_null; must check != NULL "
                          f"before dereference at insn {pc}", reg=base_reg, state=st.summary())
        if cls is VClass.SCALAR:
            if base.is_const and base.umin == 0:
                raise _Reject(RejectClass.NULL_DEREF, pc,
                              f"R{base_reg} is NULL (scalar 0); dereference at insn {pc}",
                              reg=base_reg, state=st.summary())
            raise _Reject(RejectClass.OUT_OF_BOUNDS, pc,
                          f"R{base_reg} invalid mem access 'scalar' at insn {pc}",
                          reg=base_reg, state=st.summary())
        if cls is VClass.MAP_HANDLE:
            raise _Reject(RejectClass.OUT_OF_BOUNDS, pc,
                          f"R{base_reg} invalid mem access 'map_ptr' at insn {pc}",
                          reg=base_reg, state=st.summary())
        lo, hi = base.off_lo + off, base.off_hi + off + width
        fixed = base.off_lo if base.off_lo == base.off_hi else None
        if cls is VClass.MAP_VALUE_REF:
            self.note(pc, (cls.value, fixed, base.origin))
        else:
            self.note(pc, (cls.value, fixed))
        if store and value is not None and value.cls is not VClass.SCALAR and cls is not VClass.STACK_REF:
            raise _Reject(RejectClass.MALFORMED, pc,
                          f"storing {value.cls.value} pointer into {cls.value} memory leaks an "
                          f"address at insn {pc}", reg=insn.src, state=st.summary())

        if cls is VClass.CTX_REF:
            size = self.layout.size
            if lo < 0 or hi > size:
                raise _Reject(RejectClass.OUT_OF_BOUNDS, pc,
                              f"invalid ctx {verb} of {width} bytes at offset interval "
                              f"[{lo},{hi}) outside [0,{size}) at insn {pc}",
                              reg=base_reg, state=st.summary(), interval=(lo, hi), region="ctx")
            if store and not all(self.layout.is_writable(o, o + width)
                                 for o in range(lo, hi - width + 1)):
                fld = self.layout.field_at(lo) or "?"
                raise _Reject(RejectClass.INPUT_FIELD_WRITE, pc,
                              f"write of {width} bytes to read-only {self.layout.hook_kind} "
                              f"context field '{fld}' (offset {lo}) at insn {pc}",
                              reg=base_reg, state=st.summary(), interval=(lo, hi), region="ctx")
            return None if store else width_scalar(width)

        if cls is VClass.MAP_VALUE_REF:
            size = base.region_size
            if lo < 0 or hi > size:
                raise _Reject(RejectClass.OUT_OF_BOUNDS, pc,
                              f"invalid map_value {verb} of {width} bytes at offset interval "
                              f"[{lo},{hi}) outside value_size {size} of map '{base.map}' "
                              f"at insn {pc}",
                              reg=base_reg, state=st.summary(), interval=(lo, hi),
                              region=f"map_value({base.map})")
            return None if store else width_scalar(width)

        # stack: offsets are relative to the frame top, valid range [-max_stack, 0)
        max_stack = self.cfg.max_stack
        if lo < -max_stack:
            raise _Reject(RejectClass.STACK_OVERFLOW, pc,
                          f"stack {verb} at frame offset {lo} exceeds the {max_stack}-byte "
                          f"stack limit (offset interval [{lo},{hi})) at insn {pc}",
                          reg=base_reg, state=st.summary(), interval=(lo, hi), region="stack")
        if hi > 0:
            raise _Reject(RejectClass.OUT_OF_BOUNDS, pc,
                          f"invalid stack {verb} at offset interval [{lo},{hi}) above the "
                          f"frame top at insn {pc}",
                          reg=base_reg, state=st.summary(), interval=(lo, hi), region="stack")
        fixed = base.off_lo == base.off_hi
        if store:
            if value.cls is not VClass.SCALAR and not (fixed and width == 8 and lo % 8 == 0):
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"partial or unaligned spill of {value.cls.value} pointer to "
                              f"stack offset {lo} at insn {pc}", reg=insn.src, state=st.summary())
            for s in [s for s in st.spills if s < hi and lo < s + 8]:
                del st.spills[s]
            if fixed:
                for o in range(lo, hi):
                    st.stack_init[max_stack + o] = 1
                if width == 8 and lo % 8 == 0:
                    st.spills[lo] = value
            return None
        for o in range(lo, hi):
            if not st.stack_init[max_stack + o]:
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"invalid read from stack offset {o}: uninitialized byte "
                              f"(read interval [{lo},{hi})) at insn {pc}",
                              reg=base_reg, state=st.summary(), interval=(lo, hi), region="stack")
        if fixed and width == 8 and lo in st.spills:
            return st.spills[lo]
        for s, v in st.spills.items():
            if v.cls is not VClass.SCALAR and s < hi and lo < s + 8:
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"partial read of spilled {v.cls.value} pointer at stack "
                              f"offset {s} at insn {pc}", reg=base_reg, state=st.summary())
        return width_scalar(width)

    def stack_arg(self, pc, st, reg: int, nbytes: int, what: str) -> int | None:
        """Validate a stack-buffer argument; returns its fixed frame offset if known."""
        v = self.read(st, reg, pc)
        if v.cls is VClass.MAP_VALUE_OR_NULL:
            raise _Reject(RejectClass.NULL_DEREF, pc,
                          f"R{reg} is a pointer to map_value_or_null passed as {what}; must "
                          f"check != NULL at insn {pc}", reg=reg, state=st.summary())
        if v.cls is not VClass.STACK_REF:
            raise _Reject(RejectClass.MALFORMED, pc,
                          f"R{reg} type={v.cls.value} expected=fp ({what}) at insn {pc}",
                          reg=reg, state=st.summary())
        lo, hi = v.off_lo, v.off_hi + nbytes
        if lo < -self.cfg.max_stack:
            raise _Reject(RejectClass.STACK_OVERFLOW, pc,
                          f"R{reg} {what} at frame offset {lo} exceeds the {self.cfg.max_stack}"
                          f"-byte stack limit at insn {pc}",
                          reg=reg, state=st.summary(), interval=(lo, hi), region="stack")
        if hi > 0:
            raise _Reject(RejectClass.OUT_OF_BOUNDS, pc,
                          f"R{reg} {what} of {nbytes} bytes at offset interval [{lo},{hi}) "
                          f"runs above the frame top at insn {pc}",
                          reg=reg, state=st.summary(), interval=(lo, hi), region="stack")
        for o in range(lo, hi):
            if not st.stack_init[self.cfg.max_stack + o]:
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"R{reg} {what}: stack byte at offset {o} is uninitialized "
                              f"at insn {pc}", reg=reg, state=st.summary(),
                              interval=(lo, hi), region="stack")
        return v.off_lo if v.off_lo == v.off_hi else None

    def map_arg(self, pc, st, reg: int = 1):
        v = self.read(st, reg, pc)
        if v.cls is not VClass.MAP_HANDLE:
            raise _Reject(RejectClass.MALFORMED, pc,
                          f"R{reg} type={v.cls.value} expected=map_ptr at insn {pc}",
                          reg=reg, state=st.summary())
        return self.maps[v.map]

    def call(self, pc, insn, st: _State):
        hid = insn.imm
        if hid not in self.helpers:
            allowed = ", ".join(str(h) for h in sorted(self.helpers))
            raise _Reject(RejectClass.ILLEGAL_HELPER, pc,
                          f"call to helper {hid} is not allowed for hook "
                          f"'{self.prog.hook.value}' (whitelist: {{{allowed}}}) at insn {pc}",
                          state=st.summary(), helper=hid, whitelist=tuple(sorted(self.helpers)))
        if hid == HELPER_MAP_LOOKUP:
            m = self.map_arg(pc, st)
            k = self.stack_arg(pc, st, 2, m.key_size, "key")
            self.note(pc, ("call", self.slot_of[m.name], k, 0))
            ret = AbstractValue(VClass.MAP_VALUE_OR_NULL, region_size=m.value_size, map=m.name,
                                ref_id=self.next_ref, origin=pc)
            self.next_ref += 1
        elif hid == HELPER_MAP_UPDATE:
            m = self.map_arg(pc, st)
            k = self.stack_arg(pc, st, 2, m.key_size, "key")
            val = self.stack_arg(pc, st, 3, m.value_size, "value")
            self.note(pc, ("call", self.slot_of[m.name], k, val))
            flags = self.read(st, 4, pc)
            if flags.cls is not VClass.SCALAR:
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"R4 type={flags.cls.value} expected=scalar (flags) at insn {pc}",
                              reg=4, state=st.summary())
            ret = scalar(-4095, 0)
        elif hid == HELPER_MAP_DELETE:
            m = self.map_arg(pc, st)
            k = self.stack_arg(pc, st, 2, m.key_size, "key")
            self.note(pc, ("call", self.slot_of[m.name], k, 0))
            ret = scalar(-4095, 0)
        elif hid == HELPER_TRACE_LOG:
            v = self.read(st, 1, pc)
            if v.cls is not VClass.SCALAR:
                raise _Reject(RejectClass.MALFORMED, pc,
                              f"R1 type={v.cls.value} expected=scalar (trace_log) at insn {pc}",
                              reg=1, state=st.summary())
            ret = const(0)
        else:
            raise _Reject(RejectClass.ILLEGAL_HELPER, pc,
                          f"helper {hid} is whitelisted but not implemented at insn {pc}",
                          helper=hid, whitelist=tuple(sorted(self.helpers)))
        st.regs[0] = ret
        for r in range(1, 6):
            st.regs[r] = UNINIT

    # -- branches
    def branch(self, pc, insn: Instruction, st: _State):
        op = insn.op
        a = self.read(st, insn.dst, pc)
        b = self.read(st, insn.src, pc) if insn.reg_src else const(insn.imm)
        target = insn.target(pc)

        null_reg, other = None, None
        if a.cls is VClass.MAP_VALUE_OR_NULL:
            null_reg, other = insn.dst, b
        elif insn.reg_src and b.cls is VClass.MAP_VALUE_OR_NULL:
            null_reg, other = insn.src, a
        if null_reg is not None:
            if op in (Op.JEQ, Op.JNE) and other.is_const and other.umin == 0:
                ref = st.regs[null_reg].ref_id
                eq, ne = st, st.copy()
                self.mark_null(eq, ref, null=True)
                self.mark_null(ne, ref, null=False)
                taken, fall = (eq, ne) if op is Op.JEQ else (ne, eq)
                return [(pc + 1, fall), self.edge(pc, target, taken)]
            return [(pc + 1, st), self.edge(pc, target, st.copy())]

        if a.cls is VClass.SCALAR and b.cls is VClass.SCALAR:
            decided = _decided(op, a, b)
            if decided is True:
                return [self.edge(pc, target, st)]
            if decided is False:
                return [(pc + 1, st)]
            a_t, a_f = _refine_scalar(op, a, b)
            b_t, b_f = (_refine_scalar(_SWAP[op], b, a) if insn.reg_src else (b, b))
            out = []
            if a_f is not None and b_f is not None:
                fst = st.copy()
                fst.regs[insn.dst] = a_f
                if insn.reg_src:
                    fst.regs[insn.src] = b_f
                out.append((pc + 1, fst))
            if a_t is not None and b_t is not None:
                tst = st
                tst.regs[insn.dst] = a_t
                if insn.reg_src:
                    tst.regs[insn.src] = b_t
                out.append(self.edge(pc, target, tst))
            return out

        # comparisons involving non-null pointers: against 0 they are decided
        ptr = a if a.cls in POINTERS else (b if b.cls in POINTERS else None)
        other = b if ptr is a else a
        if (ptr is not None and other.cls is VClass.SCALAR and other.is_const
                and other.umin == 0 and op in (Op.JEQ, Op.JNE)):
            if op is Op.JEQ:
                return [(pc + 1, st)]
            return [self.edge(pc, target, st)]
        return [(pc + 1, st), self.edge(pc, target, st.copy())]

    def mark_null(self, st: _State, ref: int, null: bool):
        def fix(v: AbstractValue) -> AbstractValue:
            if v.cls is VClass.MAP_VALUE_OR_NULL and v.ref_id == ref:
                if null:
                    return const(0)
                return replace(v, cls=VClass.MAP_VALUE_REF, ref_id=0)
            return v
        st.regs = [fix(v) for v in st.regs]
        st.spills = {k: fix(v) for k, v in st.spills.items()}


def verify(program: Program, config: VerifierConfig | None = None,
           context_layout: ContextLayout | None = None) -> Verdict:
    """Statically check ``program``; never raises for unsafe programs."""
    config = config or VerifierConfig()
    layout = context_layout or layout_for(program.hook)
    t0 = time.perf_counter()
    an = _Analysis(program, config, layout)
    try:
        an.run()
    except _Reject as rej:
        return Verdict(False, rej.cls, rej.message, insn=rej.pc, reg=rej.reg,
                       state=rej.detail.pop("state", ""), detail=rej.detail,
                       analyzed_insns=an.analyzed,
                       elapsed_ms=(time.perf_counter() - t0) * 1e3)
    return Verdict(True, analyzed_insns=an.analyzed,
                   elapsed_ms=(time.perf_counter() - t0) * 1e3, sites=an.stable_sites())


def explain(verdict: Verdict) -> str:
    """Multi-line diagnostic for a rejection, led by a ``VERIFIER REJECT`` line."""
    if verdict.accepted:
        return (f"VERIFIER ACCEPT: {verdict.analyzed_insns} instructions analyzed "
                f"in {verdict.elapsed_ms:.2f} ms")
    lines = [f"VERIFIER REJECT: {verdict.message}"]
    if "at insn" not in verdict.message and verdict.insn is not None:
        lines[0] += f" at insn {verdict.insn}"
    lines.append(f"  class: {verdict.rejection_class.value}")
    if verdict.insn is not None:
        lines.append(f"  insn: {verdict.insn}")
    if verdict.reg is not None:
        lines.append(f"  register: R{verdict.reg}")
    d = verdict.detail
    if "interval" in d:
        lo, hi = d["interval"]
        lines.append(f"  {d.get('region', 'memory')} offset interval: [{lo}, {hi})")
    if "helper" in d:
        wl = ", ".join(str(h) for h in d.get("whitelist", ()))
        lines.append(f"  helper: {d['helper']} ({HELPER_NAMES.get(d['helper'], 'unknown')}); "
                     f"hook whitelist: {{{wl}}}")
    if "divisor" in d:
        lines.append(f"  divisor range: u=[{d['divisor'][0]}, {d['divisor'][1]}]")
    if verdict.state:
        lines.append(f"  state: {verdict.state}")
    return "\n".join(lines)
